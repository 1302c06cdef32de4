#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace calibflow {

template <typename Scalar> using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar> using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar> using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar> using Vec6 = Eigen::Matrix<Scalar, 6, 1>;
template <typename Scalar> using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar> using Mat4 = Eigen::Matrix<Scalar, 4, 4>;
template <typename Scalar> using Mat34 = Eigen::Matrix<Scalar, 3, 4>;
template <typename Scalar> using Mat2X = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;
template <typename Scalar> using Mat3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;
template <typename Scalar> using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar> using ArrX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
constexpr Scalar pi() { return static_cast<Scalar>(3.14159265358979323846L); }

template <typename Scalar>
constexpr Scalar deg_to_rad(Scalar d) { return d * pi<Scalar>() / Scalar(180); }

template <typename Scalar>
constexpr Scalar rad_to_deg(Scalar r) { return r * Scalar(180) / pi<Scalar>(); }

// Pixel binning convention used everywhere a continuous coordinate meets the
// grid: half-values round down (2.5 -> 2, 2.6 -> 3).
template <typename Scalar>
inline int round_half_down(Scalar x) {
  return static_cast<int>(std::ceil(x - Scalar(0.5)));
}

template <typename Derived>
inline bool is_rotation(const Eigen::MatrixBase<Derived>& r,
                        typename Derived::Scalar tol) {
  using S = typename Derived::Scalar;
  const Mat3<S> rr = r * r.transpose();
  return (rr - Mat3<S>::Identity()).template lpNorm<Eigen::Infinity>() <= tol &&
         std::abs(r.determinant() - S(1)) <= tol;
}

// ---------------------------------------------------------------------------
// Rigid transform on SE(3)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct RigidTransform {
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();

  RigidTransform() = default;
  RigidTransform(const Mat3<Scalar>& r, const Vec3<Scalar>& t)
      : rotation(r), translation(t) {}

  static RigidTransform identity() { return RigidTransform(); }

  template <typename Derived>
  Vec3<Scalar> operator()(const Eigen::MatrixBase<Derived>& p) const {
    return rotation * p + translation;
  }

  Mat34<Scalar> matrix34() const {
    Mat34<Scalar> m;
    m.template leftCols<3>() = rotation;
    m.col(3) = translation;
    return m;
  }

  Mat4<Scalar> matrix() const {
    Mat4<Scalar> m = Mat4<Scalar>::Identity();
    m.template topLeftCorner<3, 3>() = rotation;
    m.template block<3, 1>(0, 3) = translation;
    return m;
  }

  bool is_valid(Scalar tol = Scalar(1e-9)) const {
    return is_rotation(rotation, tol) && translation.allFinite();
  }
};

// compose(a, b) applies b first, then a.
template <typename Scalar>
inline RigidTransform<Scalar> compose(const RigidTransform<Scalar>& a,
                                      const RigidTransform<Scalar>& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

template <typename Scalar>
inline RigidTransform<Scalar> invert(const RigidTransform<Scalar>& t) {
  Mat3<Scalar> rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

// ---------------------------------------------------------------------------
// Quaternions (Hamilton convention, canonicalized so w >= 0)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Quaternion {
  Scalar w = Scalar(1), x = Scalar(0), y = Scalar(0), z = Scalar(0);

  Quaternion() = default;
  Quaternion(Scalar w_, Scalar x_, Scalar y_, Scalar z_)
      : w(w_), x(x_), y(y_), z(z_) {
    canonicalize();
  }

  Scalar norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Scalar squared_norm() const { return w * w + x * x + y * y + z * z; }
  Vec3<Scalar> vec() const { return Vec3<Scalar>(x, y, z); }

  // Sign convention: w > 0, ties broken by the first nonzero imaginary part.
  void canonicalize() {
    bool flip = w < Scalar(0);
    if (w == Scalar(0)) {
      if (x != Scalar(0)) flip = x < Scalar(0);
      else if (y != Scalar(0)) flip = y < Scalar(0);
      else flip = z < Scalar(0);
    }
    if (flip) { w = -w; x = -x; y = -y; z = -z; }
  }
};

template <typename Scalar>
inline Quaternion<Scalar> quat_mul(const Quaternion<Scalar>& a,
                                   const Quaternion<Scalar>& b) {
  return Quaternion<Scalar>(a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
                            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
                            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w);
}

// Inverse as conjugate over squared norm; defined for any nonzero quaternion.
template <typename Scalar>
inline Quaternion<Scalar> quat_inv(const Quaternion<Scalar>& m) {
  const Scalar n2 = m.squared_norm();
  if (n2 <= Scalar(0)) throw std::invalid_argument("quat_inv: zero norm");
  return Quaternion<Scalar>(m.w / n2, -m.x / n2, -m.y / n2, -m.z / n2);
}

template <typename Derived>
inline Quaternion<typename Derived::Scalar> rotation_to_quaternion(
    const Eigen::MatrixBase<Derived>& r) {
  using S = typename Derived::Scalar;
  const Mat3<S> rm(r);
  const Eigen::Quaternion<S> q(rm);
  return Quaternion<S>(q.w(), q.x(), q.y(), q.z());
}

template <typename Scalar>
inline Mat3<Scalar> quaternion_to_rotation(const Quaternion<Scalar>& q) {
  const Scalar n = q.norm();
  if (n <= Scalar(0)) throw std::invalid_argument("quaternion_to_rotation: zero norm");
  return Eigen::Quaternion<Scalar>(q.w / n, q.x / n, q.y / n, q.z / n)
      .toRotationMatrix();
}

// ---------------------------------------------------------------------------
// Euler angles, ZYX convention: R = Rz(yaw) * Ry(pitch) * Rx(roll)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct EulerAngles {
  Scalar roll = Scalar(0);
  Scalar pitch = Scalar(0);
  Scalar yaw = Scalar(0);
  bool gimbal_lock = false;
};

template <typename Scalar>
inline Mat3<Scalar> rot_x(Scalar a) {
  const Scalar c = std::cos(a), s = std::sin(a);
  Mat3<Scalar> r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

template <typename Scalar>
inline Mat3<Scalar> rot_y(Scalar a) {
  const Scalar c = std::cos(a), s = std::sin(a);
  Mat3<Scalar> r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

template <typename Scalar>
inline Mat3<Scalar> rot_z(Scalar a) {
  const Scalar c = std::cos(a), s = std::sin(a);
  Mat3<Scalar> r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

template <typename Scalar>
inline Mat3<Scalar> euler_to_rotation(Scalar roll, Scalar pitch, Scalar yaw) {
  return rot_z(yaw) * rot_y(pitch) * rot_x(roll);
}

// yaw = atan2(r21, r11), pitch = atan2(-r31, sqrt(r32^2 + r33^2)),
// roll = atan2(r32, r33). At |pitch| = pi/2 only yaw -/+ roll is observable;
// the result is flagged and resolved with roll = 0.
template <typename Derived>
inline EulerAngles<typename Derived::Scalar> rotation_to_euler(
    const Eigen::MatrixBase<Derived>& r) {
  using S = typename Derived::Scalar;
  EulerAngles<S> e;
  const S cos_pitch = std::sqrt(r(2, 1) * r(2, 1) + r(2, 2) * r(2, 2));
  e.pitch = std::atan2(-r(2, 0), cos_pitch);
  if (cos_pitch < S(1e-9)) {
    e.gimbal_lock = true;
    e.roll = S(0);
    e.yaw = std::atan2(-r(0, 1), r(1, 1));
  } else {
    e.roll = std::atan2(r(2, 1), r(2, 2));
    e.yaw = std::atan2(r(1, 0), r(0, 0));
  }
  return e;
}

// Piecewise atan2 with an explicit error at (0, 0).
template <typename Scalar>
inline Scalar atan2_paper(Scalar y, Scalar x) {
  if (x > Scalar(0)) return std::atan(y / x);
  if (x < Scalar(0)) {
    if (y >= Scalar(0)) return std::atan(y / x) + pi<Scalar>();
    return std::atan(y / x) - pi<Scalar>();
  }
  if (y > Scalar(0)) return pi<Scalar>() / Scalar(2);
  if (y < Scalar(0)) return -pi<Scalar>() / Scalar(2);
  throw std::invalid_argument("atan2 undefined");
}

// ---------------------------------------------------------------------------
// so(3) / se(3) exponential and logarithm
// ---------------------------------------------------------------------------

template <typename Scalar>
inline Mat3<Scalar> skew(const Vec3<Scalar>& v) {
  Mat3<Scalar> m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

template <typename Derived>
inline Vec3<typename Derived::Scalar> rotation_log(
    const Eigen::MatrixBase<Derived>& r) {
  using S = typename Derived::Scalar;
  // Quaternion route: stable for all angles including near pi.
  const Mat3<S> rm(r);
  const Eigen::Quaternion<S> q(rm);
  const Vec3<S> v(q.x(), q.y(), q.z());
  const S vn = v.norm();
  const S theta = S(2) * std::atan2(vn, std::abs(q.w()));
  if (vn < S(1e-12)) return S(2) * v;  // small-angle: sin(t/2) ~ t/2
  const Vec3<S> axis = (q.w() >= S(0) ? v : Vec3<S>(-v)) / vn;
  return theta * axis;
}

template <typename Scalar>
inline Mat3<Scalar> rotation_exp(const Vec3<Scalar>& omega) {
  const Scalar theta = omega.norm();
  const Mat3<Scalar> o = skew(omega);
  if (theta < Scalar(1e-7)) {
    return Mat3<Scalar>::Identity() + o + Scalar(0.5) * o * o;
  }
  const Scalar t2 = theta * theta;
  return Mat3<Scalar>::Identity() + std::sin(theta) / theta * o +
         (Scalar(1) - std::cos(theta)) / t2 * o * o;
}

// Tangent vector layout: [rho(3); omega(3)] with rho the translational part.
template <typename Scalar>
inline Vec6<Scalar> se3_log(const RigidTransform<Scalar>& t) {
  const Vec3<Scalar> omega = rotation_log(t.rotation);
  const Scalar theta = omega.norm();
  const Mat3<Scalar> o = skew(omega);
  Mat3<Scalar> v_inv;
  if (theta < Scalar(1e-7)) {
    v_inv = Mat3<Scalar>::Identity() - Scalar(0.5) * o +
            o * o / Scalar(12);
  } else {
    const Scalar t2 = theta * theta;
    const Scalar coeff =
        (Scalar(1) - theta * std::sin(theta) /
                         (Scalar(2) * (Scalar(1) - std::cos(theta)))) / t2;
    v_inv = Mat3<Scalar>::Identity() - Scalar(0.5) * o + coeff * o * o;
  }
  Vec6<Scalar> xi;
  xi.template head<3>() = v_inv * t.translation;
  xi.template tail<3>() = omega;
  return xi;
}

template <typename Scalar>
inline RigidTransform<Scalar> se3_exp(const Vec6<Scalar>& xi) {
  const Vec3<Scalar> rho = xi.template head<3>();
  const Vec3<Scalar> omega = xi.template tail<3>();
  const Scalar theta = omega.norm();
  const Mat3<Scalar> o = skew(omega);
  Mat3<Scalar> v;
  if (theta < Scalar(1e-7)) {
    v = Mat3<Scalar>::Identity() + Scalar(0.5) * o + o * o / Scalar(6);
  } else {
    const Scalar t2 = theta * theta;
    v = Mat3<Scalar>::Identity() +
        (Scalar(1) - std::cos(theta)) / t2 * o +
        (theta - std::sin(theta)) / (t2 * theta) * o * o;
  }
  return {rotation_exp(omega), v * rho};
}

// ---------------------------------------------------------------------------
// Camera model and point clouds
// ---------------------------------------------------------------------------

template <typename Scalar>
struct CameraIntrinsics {
  Scalar fx = Scalar(0), fy = Scalar(0);
  Scalar cx = Scalar(0), cy = Scalar(0);
  int width = 0, height = 0;

  bool is_valid() const {
    return fx > Scalar(0) && fy > Scalar(0) && cx > Scalar(0) &&
           cx < Scalar(width) && cy > Scalar(0) && cy < Scalar(height);
  }
};

template <typename Scalar>
struct PointCloud {
  Mat3X<Scalar> points;                 // columns are points, LiDAR frame
  std::vector<std::int32_t> labels;     // per-point instance label; empty if none
  ArrX<Scalar> reflectance;             // auxiliary channel; empty if none

  Eigen::Index size() const { return points.cols(); }
  bool empty() const { return points.cols() == 0; }
  bool has_labels() const {
    return static_cast<Eigen::Index>(labels.size()) == points.cols();
  }
};

template <typename Scalar>
struct ProjectedCloud {
  Mat2X<Scalar> pixels;                   // continuous (u, v)
  ArrX<Scalar> depths;                    // camera-frame Z
  std::vector<std::uint8_t> valid;        // in bounds and depth > 0
  std::vector<Eigen::Index> source_index; // index into the source cloud
  int width = 0, height = 0;              // image bounds used for validity

  Eigen::Index size() const { return pixels.cols(); }
  Eigen::Index valid_count() const {
    Eigen::Index n = 0;
    for (auto f : valid) n += (f != 0);
    return n;
  }
};

template <typename Scalar>
struct DepthImage {
  MatX<Scalar> values;  // H x W, 0 encodes "no point"

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

struct CropWindow {
  int x0 = 0, y0 = 0;
  int width = 0, height = 0;
};

template <typename Scalar>
inline ProjectedCloud<Scalar> project(const PointCloud<Scalar>& cloud,
                                      const CameraIntrinsics<Scalar>& intrinsics,
                                      const RigidTransform<Scalar>& extrinsic) {
  if (cloud.empty()) throw std::invalid_argument("project: empty input");
  if (!extrinsic.is_valid()) throw std::invalid_argument("project: invalid extrinsic");
  const Eigen::Index n = cloud.size();
  ProjectedCloud<Scalar> out;
  out.width = intrinsics.width;
  out.height = intrinsics.height;
  out.pixels.resize(2, n);
  out.depths.resize(n);
  out.valid.assign(static_cast<std::size_t>(n), 0);
  out.source_index.resize(static_cast<std::size_t>(n));
  const Scalar w = static_cast<Scalar>(intrinsics.width);
  const Scalar h = static_cast<Scalar>(intrinsics.height);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3<Scalar> pc = extrinsic(cloud.points.col(i));
    const Scalar z = pc.z();
    out.depths[i] = z;
    out.source_index[static_cast<std::size_t>(i)] = i;
    if (z > Scalar(0)) {
      const Scalar u = intrinsics.fx * pc.x() / z + intrinsics.cx;
      const Scalar v = intrinsics.fy * pc.y() / z + intrinsics.cy;
      out.pixels(0, i) = u;
      out.pixels(1, i) = v;
      out.valid[static_cast<std::size_t>(i)] =
          (u >= Scalar(0) && u < w && v >= Scalar(0) && v < h) ? 1 : 0;
    } else {
      out.pixels(0, i) = Scalar(0);
      out.pixels(1, i) = Scalar(0);
    }
  }
  return out;
}

// Index of the point owning each grid cell: nearest depth wins, ties go to
// the lowest source index. -1 marks an empty cell. The same resolution rule
// backs the depth image, the flow field, and rectification.
template <typename Scalar>
inline Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> pixel_owners(
    const ProjectedCloud<Scalar>& projected, const CropWindow& window) {
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> owners(
      window.height, window.width);
  owners.setConstant(-1);
  for (Eigen::Index i = 0; i < projected.size(); ++i) {
    if (!projected.valid[static_cast<std::size_t>(i)]) continue;
    const int px = round_half_down(projected.pixels(0, i)) - window.x0;
    const int py = round_half_down(projected.pixels(1, i)) - window.y0;
    if (px < 0 || px >= window.width || py < 0 || py >= window.height) continue;
    const Eigen::Index cur = owners(py, px);
    if (cur < 0 || projected.depths[i] < projected.depths[cur]) owners(py, px) = i;
  }
  return owners;
}

template <typename Scalar>
inline DepthImage<Scalar> render_depth(const ProjectedCloud<Scalar>& projected,
                                       const CameraIntrinsics<Scalar>& intrinsics) {
  DepthImage<Scalar> img;
  img.values = MatX<Scalar>::Zero(intrinsics.height, intrinsics.width);
  const auto owners =
      pixel_owners(projected, {0, 0, intrinsics.width, intrinsics.height});
  for (int r = 0; r < intrinsics.height; ++r)
    for (int c = 0; c < intrinsics.width; ++c)
      if (owners(r, c) >= 0) img.values(r, c) = projected.depths[owners(r, c)];
  return img;
}

}  // namespace calibflow
