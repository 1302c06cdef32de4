#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "calibflow/correspondence.hpp"
#include "calibflow/geometry.hpp"

namespace calibflow {

// Dense 2-channel pixel-displacement field with a validity mask. Cells with
// mask = 0 carry (0, 0).
template <typename Scalar>
struct FlowField {
  MatX<Scalar> du, dv;                                             // H x W
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;  // H x W

  FlowField() = default;
  FlowField(int width, int height)
      : du(MatX<Scalar>::Zero(height, width)),
        dv(MatX<Scalar>::Zero(height, width)),
        mask(Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(
            height, width)) {}

  int width() const { return static_cast<int>(du.cols()); }
  int height() const { return static_cast<int>(du.rows()); }
  Eigen::Index mask_count() const {
    return (mask != std::uint8_t(0)).count();
  }
};

struct LossConfig {
  double epsilon = 1e-9;
  double alpha = 0.25;
};

// Displacement from the projection under t_init to the projection under t_gt,
// recorded on the grid cell owned by each point's initial projection. A cell
// is masked in only when its owning point (nearest initial depth) is also
// valid under t_gt.
template <typename Scalar>
inline FlowField<Scalar> ground_truth_flow_on_grid(
    const PointCloud<Scalar>& cloud, const CameraIntrinsics<Scalar>& intrinsics,
    const RigidTransform<Scalar>& t_init, const RigidTransform<Scalar>& t_gt,
    const CropWindow& window) {
  const auto proj_init = project(cloud, intrinsics, t_init);
  const auto proj_gt = project(cloud, intrinsics, t_gt);
  FlowField<Scalar> field(window.width, window.height);
  const auto owners = pixel_owners(proj_init, window);
  for (int r = 0; r < window.height; ++r) {
    for (int c = 0; c < window.width; ++c) {
      const Eigen::Index i = owners(r, c);
      if (i < 0 || !proj_gt.valid[static_cast<std::size_t>(i)]) continue;
      field.du(r, c) = proj_gt.pixels(0, i) - proj_init.pixels(0, i);
      field.dv(r, c) = proj_gt.pixels(1, i) - proj_init.pixels(1, i);
      field.mask(r, c) = 1;
    }
  }
  return field;
}

template <typename Scalar>
inline FlowField<Scalar> ground_truth_flow(const PointCloud<Scalar>& cloud,
                                           const CameraIntrinsics<Scalar>& intrinsics,
                                           const RigidTransform<Scalar>& t_init,
                                           const RigidTransform<Scalar>& t_gt) {
  return ground_truth_flow_on_grid(cloud, intrinsics, t_init, t_gt,
                                   {0, 0, intrinsics.width, intrinsics.height});
}

// Shift each masked cell's owning point by the cell's flow vector and pair
// the result with its 3D point. Pairs whose rectified coordinates leave the
// image are dropped. `window` places the flow grid inside the full image;
// rectified coordinates are always global.
template <typename Scalar>
inline CorrespondenceSet<Scalar> rectify(const ProjectedCloud<Scalar>& projected,
                                         const FlowField<Scalar>& flow,
                                         const Mat3X<Scalar>& points,
                                         const CameraIntrinsics<Scalar>& intrinsics,
                                         const CropWindow* window = nullptr) {
  const CropWindow win = window ? *window
                                : CropWindow{0, 0, intrinsics.width,
                                             intrinsics.height};
  if (flow.width() != win.width || flow.height() != win.height ||
      win.x0 < 0 || win.y0 < 0 ||
      win.x0 + win.width > intrinsics.width ||
      win.y0 + win.height > intrinsics.height) {
    throw std::invalid_argument("rectify: flow dimensions mismatch");
  }
  if (points.cols() != projected.size()) {
    throw std::invalid_argument("rectify: cloud size mismatch");
  }
  const auto owners = pixel_owners(projected, win);
  CorrespondenceSet<Scalar> set;
  set.intrinsics = intrinsics;
  std::vector<Eigen::Index> kept;
  std::vector<Vec2<Scalar>> rectified;
  for (int r = 0; r < win.height; ++r) {
    for (int c = 0; c < win.width; ++c) {
      const Eigen::Index i = owners(r, c);
      if (i < 0 || !flow.mask(r, c)) continue;
      const Scalar u = projected.pixels(0, i) + flow.du(r, c);
      const Scalar v = projected.pixels(1, i) + flow.dv(r, c);
      if (u < Scalar(0) || u >= Scalar(intrinsics.width) || v < Scalar(0) ||
          v >= Scalar(intrinsics.height)) {
        continue;
      }
      kept.push_back(i);
      rectified.emplace_back(u, v);
    }
  }
  const Eigen::Index m = static_cast<Eigen::Index>(kept.size());
  set.pixels.resize(2, m);
  set.points.resize(3, m);
  set.source_index.resize(static_cast<std::size_t>(m));
  for (Eigen::Index j = 0; j < m; ++j) {
    set.pixels.col(j) = rectified[static_cast<std::size_t>(j)];
    set.points.col(j) = points.col(kept[static_cast<std::size_t>(j)]);
    set.source_index[static_cast<std::size_t>(j)] =
        projected.source_index[static_cast<std::size_t>(kept[j])];
  }
  return set;
}

// Mean L1 deviation from the reference flow over its masked cells.
template <typename Scalar>
inline Scalar photometric_loss(const FlowField<Scalar>& pred,
                               const FlowField<Scalar>& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height())
    throw std::invalid_argument("photometric_loss: dimensions mismatch");
  Scalar sum = Scalar(0);
  Eigen::Index count = 0;
  for (int r = 0; r < gt.height(); ++r) {
    for (int c = 0; c < gt.width(); ++c) {
      if (!gt.mask(r, c)) continue;
      sum += std::abs(gt.du(r, c) - pred.du(r, c)) +
             std::abs(gt.dv(r, c) - pred.dv(r, c));
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("photometric_loss: no valid pixels");
  return sum / static_cast<Scalar>(count);
}

// Generalized Charbonnier penalty on a 2-vector difference.
template <typename Scalar>
inline Scalar charbonnier(Scalar dx, Scalar dy, const LossConfig& cfg) {
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);
  return std::pow(dx * dx + dy * dy + eps * eps,
                  static_cast<Scalar>(cfg.alpha));
}

// Mean forward-difference smoothness over cells lacking a ground truth.
// Neighbor terms that would leave the grid are skipped.
template <typename Scalar>
inline Scalar smoothness_loss(
    const FlowField<Scalar>& pred,
    const Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& gt_mask,
    const LossConfig& cfg = {}) {
  if (static_cast<int>(gt_mask.cols()) != pred.width() ||
      static_cast<int>(gt_mask.rows()) != pred.height())
    throw std::invalid_argument("smoothness_loss: dimensions mismatch");
  Scalar sum = Scalar(0);
  Eigen::Index count = 0;
  for (int r = 0; r < pred.height(); ++r) {
    for (int c = 0; c < pred.width(); ++c) {
      if (gt_mask(r, c)) continue;
      Scalar ds = Scalar(0);
      if (c + 1 < pred.width())
        ds += charbonnier(pred.du(r, c) - pred.du(r, c + 1),
                          pred.dv(r, c) - pred.dv(r, c + 1), cfg);
      if (r + 1 < pred.height())
        ds += charbonnier(pred.du(r, c) - pred.du(r + 1, c),
                          pred.dv(r, c) - pred.dv(r + 1, c), cfg);
      sum += ds;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("smoothness_loss: no invalid pixels");
  return sum / static_cast<Scalar>(count);
}

// ---------------------------------------------------------------------------
// CFL1 flow file format. Little-endian: magic "CFL1", u32 width, u32 height,
// row-major H*W float32 (du, dv) pairs, then H*W mask bytes (0/1).
// ---------------------------------------------------------------------------

template <typename Scalar>
inline void write_flow(const std::string& path, const FlowField<Scalar>& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_flow: cannot open " + path);
  const char magic[4] = {'C', 'F', 'L', '1'};
  out.write(magic, 4);
  const std::uint32_t w = static_cast<std::uint32_t>(field.width());
  const std::uint32_t h = static_cast<std::uint32_t>(field.height());
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  for (int r = 0; r < field.height(); ++r) {
    for (int c = 0; c < field.width(); ++c) {
      const float pair[2] = {static_cast<float>(field.du(r, c)),
                             static_cast<float>(field.dv(r, c))};
      out.write(reinterpret_cast<const char*>(pair), 8);
    }
  }
  for (int r = 0; r < field.height(); ++r)
    for (int c = 0; c < field.width(); ++c)
      out.put(field.mask(r, c) ? char(1) : char(0));
  if (!out) throw std::runtime_error("write_flow: write failed for " + path);
}

template <typename Scalar = double>
inline FlowField<Scalar> read_flow(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_flow: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CFL1", 4) != 0)
    throw std::runtime_error("read_flow: bad magic in " + path);
  std::uint32_t w = 0, h = 0;
  if (!in.read(reinterpret_cast<char*>(&w), 4) ||
      !in.read(reinterpret_cast<char*>(&h), 4))
    throw std::runtime_error("read_flow: truncated header in " + path);
  if (w == 0 || h == 0 || static_cast<std::uint64_t>(w) * h > (1ULL << 28))
    throw std::runtime_error("read_flow: implausible dimensions in " + path);
  FlowField<Scalar> field(static_cast<int>(w), static_cast<int>(h));
  for (std::uint32_t r = 0; r < h; ++r) {
    for (std::uint32_t c = 0; c < w; ++c) {
      float pair[2];
      if (!in.read(reinterpret_cast<char*>(pair), 8))
        throw std::runtime_error("read_flow: truncated payload in " + path);
      field.du(r, c) = static_cast<Scalar>(pair[0]);
      field.dv(r, c) = static_cast<Scalar>(pair[1]);
    }
  }
  for (std::uint32_t r = 0; r < h; ++r) {
    for (std::uint32_t c = 0; c < w; ++c) {
      const int b = in.get();
      if (b == std::ifstream::traits_type::eof())
        throw std::runtime_error("read_flow: truncated payload in " + path);
      if (b != 0 && b != 1)
        throw std::runtime_error("read_flow: invalid mask byte in " + path);
      field.mask(r, c) = static_cast<std::uint8_t>(b);
      if (b == 0) {
        field.du(r, c) = Scalar(0);
        field.dv(r, c) = Scalar(0);
      }
    }
  }
  if (in.get() != std::ifstream::traits_type::eof())
    throw std::runtime_error("read_flow: trailing bytes in " + path);
  return field;
}

}  // namespace calibflow
