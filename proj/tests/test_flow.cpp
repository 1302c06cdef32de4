#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "calibflow/flow.hpp"
#include "oracles.hpp"

using namespace calibflow;

namespace {

CameraIntrinsics<double> test_intrinsics() {
  return {500.0, 500.0, 480.0, 160.0, 960, 320};
}

// Cloud whose points are all visible under `t`.
PointCloud<double> frustum_cloud(Rng& rng, const RigidTransform<double>& t,
                                 int n, const CameraIntrinsics<double>& k,
                                 double z_min = 4.0, double z_max = 40.0) {
  PointCloud<double> c;
  c.points.resize(3, n);
  const auto t_inv = invert(t);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform(1.0, k.width - 1.0);
    const double v = rng.uniform(1.0, k.height - 1.0);
    const double z = rng.uniform(z_min, z_max);
    c.points.col(i) = t_inv(
        Eigen::Vector3d(z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z));
  }
  return c;
}

}  // namespace

TEST_CASE("ground_truth_flow is zero when t_init equals t_gt") {
  Rng rng(3);
  const auto k = test_intrinsics();
  const auto t = oracle::random_transform(rng, 0.3);
  const auto cloud = frustum_cloud(rng, t, 500, k);
  const auto field = ground_truth_flow(cloud, k, t, t);
  REQUIRE(field.mask_count() > 0);
  for (int r = 0; r < field.height(); ++r)
    for (int c = 0; c < field.width(); ++c)
      if (field.mask(r, c)) {
        CHECK(std::abs(field.du(r, c)) < 1e-12);
        CHECK(std::abs(field.dv(r, c)) < 1e-12);
      }
}

TEST_CASE("ground_truth_flow records the per-point deviation") {
  const auto k = test_intrinsics();
  // Single point projecting to (100, 50) at depth 10 under identity.
  PointCloud<double> c;
  c.points.resize(3, 1);
  const double z = 10.0;
  c.points.col(0) = Eigen::Vector3d(z * (100.0 - k.cx) / k.fx,
                                    z * (50.0 - k.cy) / k.fy, z);
  const RigidTransform<double> t_init = RigidTransform<double>::identity();
  // Shift the projection to (103, 47): du = fx*tx/z, dv = fy*ty/z.
  RigidTransform<double> t_gt = t_init;
  t_gt.translation = Eigen::Vector3d(3.0 * z / k.fx, -3.0 * z / k.fy, 0.0);
  const auto field = ground_truth_flow(c, k, t_init, t_gt);
  CHECK(field.mask(50, 100) == 1);
  CHECK(field.du(50, 100) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(field.dv(50, 100) == doctest::Approx(-3.0).epsilon(1e-12));
  CHECK(field.mask_count() == 1);
}

TEST_CASE("constant-depth plane under lateral shift gives a uniform flow") {
  const auto k = test_intrinsics();
  Rng rng(5);
  const double z0 = 12.0;
  PointCloud<double> c;
  const int n = 200;
  c.points.resize(3, n);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform(5.0, 900.0);
    const double v = rng.uniform(5.0, 315.0);
    c.points.col(i) =
        Eigen::Vector3d(z0 * (u - k.cx) / k.fx, z0 * (v - k.cy) / k.fy, z0);
  }
  const auto t_init = RigidTransform<double>::identity();
  RigidTransform<double> t_gt = t_init;
  const double tx = 0.1;
  t_gt.translation.x() = tx;
  const auto field = ground_truth_flow(c, k, t_init, t_gt);
  const double expected_du = k.fx * tx / z0;
  REQUIRE(field.mask_count() > 100);
  for (int r = 0; r < field.height(); ++r)
    for (int col = 0; col < field.width(); ++col)
      if (field.mask(r, col)) {
        CHECK(field.du(r, col) == doctest::Approx(expected_du).epsilon(1e-10));
        CHECK(std::abs(field.dv(r, col)) < 1e-10);
      }
  // Brute-force check against scalar pinhole projections, point by point.
  for (int i = 0; i < n; ++i) {
    double u0, v0, z_a, u1, v1, z_b;
    oracle::pinhole_project(k.fx, k.fy, k.cx, k.cy, t_init.rotation,
                            t_init.translation, c.points.col(i), u0, v0, z_a);
    oracle::pinhole_project(k.fx, k.fy, k.cx, k.cy, t_gt.rotation,
                            t_gt.translation, c.points.col(i), u1, v1, z_b);
    CHECK(u1 - u0 == doctest::Approx(expected_du).epsilon(1e-10));
    CHECK(std::abs(v1 - v0) < 1e-12);
  }
}

TEST_CASE("ground_truth_flow with disjoint valid sets yields an empty mask") {
  const auto k = test_intrinsics();
  PointCloud<double> c;
  c.points.resize(3, 1);
  c.points.col(0) = Eigen::Vector3d(0, 0, 10);
  RigidTransform<double> t_gt{Eigen::Matrix3d::Identity(),
                              Eigen::Vector3d(0, 0, -25)};  // behind camera
  const auto field =
      ground_truth_flow(c, k, RigidTransform<double>::identity(), t_gt);
  CHECK(field.mask_count() == 0);
}

TEST_CASE("flow collisions are resolved by nearest initial depth") {
  const auto k = test_intrinsics();
  PointCloud<double> c;
  c.points.resize(3, 2);
  // Both points project to pixel (480, 160) initially; depths 20 and 8.
  c.points.col(0) = Eigen::Vector3d(0, 0, 20);
  c.points.col(1) = Eigen::Vector3d(0, 0, 8);
  RigidTransform<double> t_gt{Eigen::Matrix3d::Identity(),
                              Eigen::Vector3d(0.1, 0, 0)};
  const auto field =
      ground_truth_flow(c, k, RigidTransform<double>::identity(), t_gt);
  // Nearer point (depth 8) owns the cell: du = fx * 0.1 / 8.
  CHECK(field.du(160, 480) == doctest::Approx(500.0 * 0.1 / 8.0).epsilon(1e-12));
}

TEST_CASE("rectify applies flow and drops out-of-bounds pairs") {
  const auto k = test_intrinsics();
  PointCloud<double> c;
  c.points.resize(3, 2);
  const double z = 10.0;
  c.points.col(0) = Eigen::Vector3d(z * (100.0 - k.cx) / k.fx,
                                    z * (50.0 - k.cy) / k.fy, z);
  c.points.col(1) = Eigen::Vector3d(z * (959.0 - k.cx) / k.fx,
                                    z * (319.0 - k.cy) / k.fy, z);
  const auto proj = project(c, k, RigidTransform<double>::identity());

  FlowField<double> flow(k.width, k.height);
  flow.du(50, 100) = 3.0;
  flow.dv(50, 100) = -3.0;
  flow.mask(50, 100) = 1;
  flow.du(319, 959) = 5.0;
  flow.dv(319, 959) = 5.0;
  flow.mask(319, 959) = 1;

  const auto set = rectify(proj, flow, c.points, k);
  REQUIRE(set.size() == 1);  // the edge point leaves the image and is dropped
  CHECK(set.pixels(0, 0) == doctest::Approx(103.0).epsilon(1e-12));
  CHECK(set.pixels(1, 0) == doctest::Approx(47.0).epsilon(1e-12));
  CHECK(set.source_index[0] == 0);

  // All-zero flow keeps initial coordinates.
  FlowField<double> zero(k.width, k.height);
  zero.mask(50, 100) = 1;
  zero.mask(319, 959) = 1;
  const auto same = rectify(proj, zero, c.points, k);
  REQUIRE(same.size() == 2);
  CHECK(same.pixels(0, 0) == doctest::Approx(100.0));
  CHECK(same.pixels(1, 0) == doctest::Approx(50.0));
}

TEST_CASE("rectify rejects mismatched flow dimensions") {
  const auto k = test_intrinsics();
  PointCloud<double> c;
  c.points.resize(3, 1);
  c.points.col(0) = Eigen::Vector3d(0, 0, 10);
  const auto proj = project(c, k, RigidTransform<double>::identity());
  FlowField<double> flow(100, 100);
  CHECK_THROWS_AS(rectify(proj, flow, c.points, k), std::invalid_argument);
}

TEST_CASE("rectified pixels close the loop to the ground-truth projection") {
  // The keystone property: initial projection + exact flow lands exactly on
  // the projection under t_gt, for every surviving correspondence.
  Rng rng(31);
  const auto k = test_intrinsics();
  for (int trial = 0; trial < 25; ++trial) {
    const auto t_gt = oracle::random_transform(rng, 0.3);
    const auto cloud = frustum_cloud(rng, t_gt, 800, k);
    auto delta_rng = rng.fork(trial);
    const RigidTransform<double> delta{
        euler_to_rotation(delta_rng.uniform(-0.15, 0.15),
                          delta_rng.uniform(-0.15, 0.15),
                          delta_rng.uniform(-0.15, 0.15)),
        Eigen::Vector3d(delta_rng.uniform(-0.5, 0.5),
                        delta_rng.uniform(-0.5, 0.5),
                        delta_rng.uniform(-0.5, 0.5))};
    const auto t_init = compose(delta, t_gt);
    const auto field = ground_truth_flow(cloud, k, t_init, t_gt);
    const auto proj_init = project(cloud, k, t_init);
    const auto proj_gt = project(cloud, k, t_gt);
    const auto set = rectify(proj_init, field, cloud.points, k);
    REQUIRE(set.size() > 0);
    for (Eigen::Index j = 0; j < set.size(); ++j) {
      const auto i = set.source_index[static_cast<std::size_t>(j)];
      CHECK((set.pixels.col(j) - proj_gt.pixels.col(i)).norm() < 1e-9);
    }
  }
}

TEST_CASE("photometric loss") {
  const auto k = test_intrinsics();
  Rng rng(37);
  const auto t = oracle::random_transform(rng, 0.2);
  const auto cloud = frustum_cloud(rng, t, 300, k);
  RigidTransform<double> t2 = t;
  t2.translation.x() += 0.05;
  const auto gt = ground_truth_flow(cloud, k, t, t2);
  REQUIRE(gt.mask_count() > 0);

  CHECK(photometric_loss(gt, gt) == 0.0);

  auto shifted = gt;
  shifted.du.array() += 1.0;
  shifted.dv.array() += 1.0;
  CHECK(photometric_loss(shifted, gt) == doctest::Approx(2.0).epsilon(1e-12));

  // Values outside the reference mask do not matter.
  auto noisy_outside = shifted;
  for (int r = 0; r < gt.height(); ++r)
    for (int c = 0; c < gt.width(); ++c)
      if (!gt.mask(r, c)) noisy_outside.du(r, c) += 1000.0;
  CHECK(photometric_loss(noisy_outside, gt) == doctest::Approx(2.0).epsilon(1e-12));

  FlowField<double> empty_mask(k.width, k.height);
  CHECK_THROWS_AS(photometric_loss(gt, empty_mask), std::invalid_argument);
}

TEST_CASE("smoothness loss on a constant field") {
  // Mark the boundary valid so every invalid cell is interior: each then
  // contributes exactly 2 * (eps^2)^alpha.
  const int w = 6, h = 5;
  FlowField<double> f(w, h);
  f.du.setConstant(3.7);
  f.dv.setConstant(-1.2);
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> gt_mask(h, w);
  gt_mask.setZero();
  for (int c = 0; c < w; ++c) gt_mask(h - 1, c) = 1;
  for (int r = 0; r < h; ++r) gt_mask(r, w - 1) = 1;
  const LossConfig cfg;
  const double per_pixel = 2.0 * std::pow(1e-9 * 1e-9, 0.25);
  CHECK(smoothness_loss(f, gt_mask, cfg) ==
        doctest::Approx(per_pixel).epsilon(1e-12));
  CHECK(per_pixel == doctest::Approx(6.3246e-5).epsilon(1e-4));
}

TEST_CASE("smoothness loss sees a unit step as roughly one") {
  const int w = 2, h = 1;
  FlowField<double> f(w, h);
  f.du(0, 0) = 0.0;
  f.du(0, 1) = 1.0;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> gt_mask(h, w);
  gt_mask.setZero();
  gt_mask(0, 1) = 1;  // only cell (0,0) counts; it has no downward neighbor
  const double term = std::pow(1.0 + 1e-18, 0.25);
  CHECK(smoothness_loss(f, gt_mask, {}) == doctest::Approx(term).epsilon(1e-12));
  CHECK(term == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("smoothness loss is invariant to a global flow offset") {
  Rng rng(41);
  const int w = 24, h = 16;
  FlowField<double> f(w, h);
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> gt_mask(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      f.du(r, c) = rng.uniform(-5, 5);
      f.dv(r, c) = rng.uniform(-5, 5);
      gt_mask(r, c) = rng.uniform() < 0.3 ? 1 : 0;
    }
  gt_mask(0, 0) = 0;
  const double base = smoothness_loss(f, gt_mask, {});
  auto g = f;
  g.du.array() += 17.5;
  g.dv.array() -= 4.25;
  CHECK(smoothness_loss(g, gt_mask, {}) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("smoothness loss requires at least one invalid pixel") {
  FlowField<double> f(4, 4);
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> all_valid(4, 4);
  all_valid.setConstant(1);
  CHECK_THROWS_AS(smoothness_loss(f, all_valid, {}), std::invalid_argument);
}

TEST_CASE("CFL1 round trip is bit exact") {
  Rng rng(43);
  const int w = 37, h = 21;
  FlowField<double> f(w, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (rng.uniform() < 0.4) {
        f.mask(r, c) = 1;
        f.du(r, c) = static_cast<float>(rng.uniform(-100, 100));
        f.dv(r, c) = static_cast<float>(rng.uniform(-100, 100));
      }
  const std::string path_a = "cfl_roundtrip_a.cfl";
  const std::string path_b = "cfl_roundtrip_b.cfl";
  write_flow(path_a, f);
  const auto g = read_flow<double>(path_a);
  CHECK(g.width() == w);
  CHECK(g.height() == h);
  CHECK((g.du - f.du).cwiseAbs().maxCoeff() == 0.0);
  CHECK((g.dv - f.dv).cwiseAbs().maxCoeff() == 0.0);
  CHECK((g.mask != f.mask).count() == 0);
  write_flow(path_b, g);
  std::ifstream a(path_a, std::ios::binary), b(path_b, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)),
                            std::istreambuf_iterator<char>());
  const std::string bytes_b((std::istreambuf_iterator<char>(b)),
                            std::istreambuf_iterator<char>());
  CHECK(bytes_a == bytes_b);
  std::remove(path_a.c_str());
  std::remove(path_b.c_str());
}

TEST_CASE("CFL1 reader rejects bad files") {
  const std::string path = "cfl_bad.cfl";
  {
    std::ofstream out(path, std::ios::binary);
    out.write("FLO9", 4);
    const std::uint32_t w = 2, h = 2;
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
  }
  CHECK_THROWS_AS(read_flow<double>(path), std::runtime_error);
  {
    FlowField<double> f(4, 4);
    write_flow(path, f);
    // Truncate the mask section.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() - 3);
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(read_flow<double>(path), std::runtime_error);
  std::remove(path.c_str());
}
