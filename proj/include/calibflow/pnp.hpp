#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "calibflow/correspondence.hpp"
#include "calibflow/geometry.hpp"
#include "calibflow/random.hpp"

namespace calibflow {

struct RansacConfig {
  int max_iterations = 10;      // hypothesis draws per repeat
  int repeats = 5;              // independent restarts
  double inlier_threshold_px = 1.0;
  std::uint64_t rng_seed = 0;
  bool refit_on_inliers = true; // final EPnP refit on the winning inlier set
};

template <typename Scalar>
struct PnpResult {
  RigidTransform<Scalar> pose;
  Scalar reprojection_rms = Scalar(0);
};

template <typename Scalar>
struct RansacResult {
  RigidTransform<Scalar> pose;
  std::vector<Eigen::Index> inliers;
  Scalar reprojection_rms = Scalar(0);  // over the inlier set
};

template <typename Scalar>
inline ArrX<Scalar> reprojection_errors(const CorrespondenceSet<Scalar>& set,
                                        const RigidTransform<Scalar>& pose) {
  const auto& k = set.intrinsics;
  ArrX<Scalar> errors(set.size());
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    const Vec3<Scalar> pc = pose(set.points.col(i));
    if (pc.z() <= Scalar(0)) {
      errors[i] = std::numeric_limits<Scalar>::max();
      continue;
    }
    const Vec2<Scalar> proj(k.fx * pc.x() / pc.z() + k.cx,
                            k.fy * pc.y() / pc.z() + k.cy);
    errors[i] = (proj - set.pixels.col(i)).norm();
  }
  return errors;
}

template <typename Scalar>
inline CorrespondenceSet<Scalar> subset(const CorrespondenceSet<Scalar>& set,
                                        const std::vector<Eigen::Index>& idx) {
  CorrespondenceSet<Scalar> out;
  out.intrinsics = set.intrinsics;
  out.pixels.resize(2, static_cast<Eigen::Index>(idx.size()));
  out.points.resize(3, static_cast<Eigen::Index>(idx.size()));
  out.source_index.resize(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    out.pixels.col(static_cast<Eigen::Index>(j)) = set.pixels.col(idx[j]);
    out.points.col(static_cast<Eigen::Index>(j)) = set.points.col(idx[j]);
    out.source_index[j] = set.source_index.empty()
                              ? idx[j]
                              : set.source_index[static_cast<std::size_t>(idx[j])];
  }
  return out;
}

// Horn's closed-form absolute orientation: the rotation taking `src` onto
// `dst` is the unit quaternion maximizing the quadratic form of the 4x4
// cross-covariance matrix.
template <typename Scalar>
inline RigidTransform<Scalar> absolute_orientation(const Mat3X<Scalar>& src,
                                                   const Mat3X<Scalar>& dst) {
  const Vec3<Scalar> cs = src.rowwise().mean();
  const Vec3<Scalar> cd = dst.rowwise().mean();
  const Mat3<Scalar> s =
      (src.colwise() - cs) * (dst.colwise() - cd).transpose();
  Mat4<Scalar> n;
  n << s(0, 0) + s(1, 1) + s(2, 2), s(1, 2) - s(2, 1), s(2, 0) - s(0, 2),
      s(0, 1) - s(1, 0),
      s(1, 2) - s(2, 1), s(0, 0) - s(1, 1) - s(2, 2), s(0, 1) + s(1, 0),
      s(2, 0) + s(0, 2),
      s(2, 0) - s(0, 2), s(0, 1) + s(1, 0), -s(0, 0) + s(1, 1) - s(2, 2),
      s(1, 2) + s(2, 1),
      s(0, 1) - s(1, 0), s(2, 0) + s(0, 2), s(1, 2) + s(2, 1),
      -s(0, 0) - s(1, 1) + s(2, 2);
  Eigen::SelfAdjointEigenSolver<Mat4<Scalar>> eig(n);
  const Vec4<Scalar> q = eig.eigenvectors().col(3);  // largest eigenvalue
  const Mat3<Scalar> r =
      Eigen::Quaternion<Scalar>(q[0], q[1], q[2], q[3]).toRotationMatrix();
  return {r, cd - r * cs};
}

namespace detail {

// Real roots of a polynomial with descending coefficients, via the
// eigenvalues of the companion matrix.
inline std::vector<double> real_roots(std::vector<double> coeffs) {
  double max_abs = 0.0;
  for (double c : coeffs) max_abs = std::max(max_abs, std::abs(c));
  if (max_abs == 0.0) return {};
  std::size_t lead = 0;
  while (lead < coeffs.size() && std::abs(coeffs[lead]) < 1e-13 * max_abs)
    ++lead;
  coeffs.erase(coeffs.begin(), coeffs.begin() + static_cast<long>(lead));
  const int deg = static_cast<int>(coeffs.size()) - 1;
  if (deg < 1) return {};
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
  for (int i = 0; i < deg; ++i) {
    companion(0, i) = -coeffs[static_cast<std::size_t>(i + 1)] / coeffs[0];
    if (i + 1 < deg) companion(i + 1, i) = 1.0;
  }
  Eigen::EigenSolver<Eigen::MatrixXd> eig(companion, false);
  std::vector<double> roots;
  for (int i = 0; i < deg; ++i) {
    const auto ev = eig.eigenvalues()[i];
    if (std::abs(ev.imag()) <= 1e-8 * std::max(1.0, std::abs(ev.real())))
      roots.push_back(ev.real());
  }
  std::sort(roots.begin(), roots.end());
  return roots;
}

template <typename Scalar>
struct EpnpSetup {
  bool planar = false;
  int n_ctrl = 4;
  Mat3X<Scalar> ctrl_world;                  // 3 x n_ctrl
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> alphas;  // n x n_ctrl
};

template <typename Scalar>
inline EpnpSetup<Scalar> epnp_control_points(const Mat3X<Scalar>& points) {
  const Eigen::Index n = points.cols();
  EpnpSetup<Scalar> setup;
  const Vec3<Scalar> centroid = points.rowwise().mean();
  const Mat3X<Scalar> centered = points.colwise() - centroid;
  const Mat3<Scalar> cov = centered * centered.transpose() / Scalar(n);
  Eigen::SelfAdjointEigenSolver<Mat3<Scalar>> eig(cov);
  const Vec3<Scalar> ev = eig.eigenvalues();  // ascending
  if (ev[2] <= Scalar(0) || ev[1] <= ev[2] * Scalar(1e-12))
    throw std::invalid_argument("epnp: degenerate");  // coincident or collinear
  setup.planar = ev[0] <= ev[2] * Scalar(1e-10);
  setup.n_ctrl = setup.planar ? 3 : 4;
  setup.ctrl_world.resize(3, setup.n_ctrl);
  setup.ctrl_world.col(0) = centroid;
  for (int k = 1; k < setup.n_ctrl; ++k) {
    const int axis = 3 - k;  // principal directions, largest spread first
    setup.ctrl_world.col(k) =
        centroid + std::sqrt(ev[axis]) * eig.eigenvectors().col(axis);
  }
  setup.alphas.resize(n, setup.n_ctrl);
  if (setup.planar) {
    Eigen::Matrix<Scalar, 3, 2> basis;
    basis.col(0) = setup.ctrl_world.col(1) - centroid;
    basis.col(1) = setup.ctrl_world.col(2) - centroid;
    const Eigen::Matrix<Scalar, 2, 3> pinv =
        (basis.transpose() * basis).inverse() * basis.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec2<Scalar> a = pinv * centered.col(i);
      setup.alphas(i, 0) = Scalar(1) - a.sum();
      setup.alphas(i, 1) = a[0];
      setup.alphas(i, 2) = a[1];
    }
  } else {
    Mat3<Scalar> basis;
    for (int k = 0; k < 3; ++k)
      basis.col(k) = setup.ctrl_world.col(k + 1) - centroid;
    const Mat3<Scalar> inv = basis.inverse();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec3<Scalar> a = inv * centered.col(i);
      setup.alphas(i, 0) = Scalar(1) - a.sum();
      setup.alphas.row(i).template tail<3>() = a.transpose();
    }
  }
  return setup;
}

// Distance-constraint residuals for Gauss-Newton on the betas. `null_basis`
// holds one candidate control-point solution per column.
template <typename Scalar>
struct BetaProblem {
  std::vector<std::pair<int, int>> pairs;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> diffs;  // 3*|pairs| x nb
  ArrX<Scalar> sq_dist;                                         // |pairs|

  BetaProblem(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& null_basis,
              const Mat3X<Scalar>& ctrl_world) {
    const int nc = static_cast<int>(ctrl_world.cols());
    for (int i = 0; i < nc; ++i)
      for (int j = i + 1; j < nc; ++j) pairs.emplace_back(i, j);
    const int np = static_cast<int>(pairs.size());
    const int nb = static_cast<int>(null_basis.cols());
    diffs.resize(3 * np, nb);
    sq_dist.resize(np);
    for (int k = 0; k < np; ++k) {
      const auto [i, j] = pairs[static_cast<std::size_t>(k)];
      for (int l = 0; l < nb; ++l)
        diffs.template block<3, 1>(3 * k, l) =
            null_basis.template block<3, 1>(3 * i, l) -
            null_basis.template block<3, 1>(3 * j, l);
      sq_dist[k] = (ctrl_world.col(i) - ctrl_world.col(j)).squaredNorm();
    }
  }

  int constraints() const { return static_cast<int>(pairs.size()); }

  void refine(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& betas) const {
    const int np = constraints();
    const int nb = static_cast<int>(betas.size());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> residual(np);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> jac(np, nb);
    for (int iter = 0; iter < 10; ++iter) {
      for (int k = 0; k < np; ++k) {
        Vec3<Scalar> d = Vec3<Scalar>::Zero();
        for (int l = 0; l < nb; ++l)
          d += betas[l] * diffs.template block<3, 1>(3 * k, l);
        residual[k] = d.squaredNorm() - sq_dist[k];
        for (int l = 0; l < nb; ++l)
          jac(k, l) =
              Scalar(2) * d.dot(diffs.template block<3, 1>(3 * k, l));
      }
      if ((jac.transpose() * residual).norm() < Scalar(1e-12)) break;
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> step =
          jac.colPivHouseholderQr().solve(-residual);
      if (!step.allFinite()) break;
      betas += step;
    }
  }
};

}  // namespace detail

// EPnP: express the points in the barycentric frame of four (three, if the
// scene is planar) control points, recover the control points in the camera
// frame from the null space of the projection constraints, fix the scale with
// the inter-control-point distances, and read the pose off with Horn's
// absolute orientation.
template <typename Scalar>
inline PnpResult<Scalar> epnp(const CorrespondenceSet<Scalar>& set) {
  const Eigen::Index n = set.size();
  if (n < 4) throw std::invalid_argument("epnp: fewer than 4 correspondences");
  const auto& k = set.intrinsics;
  const auto setup = detail::epnp_control_points(set.points);
  const int nc = setup.n_ctrl;

  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(2 * n, 3 * nc);
  m.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < nc; ++j) {
      const Scalar a = setup.alphas(i, j);
      m(2 * i, 3 * j) = a * k.fx;
      m(2 * i, 3 * j + 2) = a * (k.cx - set.pixels(0, i));
      m(2 * i + 1, 3 * j + 1) = a * k.fy;
      m(2 * i + 1, 3 * j + 2) = a * (k.cy - set.pixels(1, i));
    }
  }
  const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> mtm =
      m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>
      eig(mtm);
  const int nb = setup.planar ? 2 : 4;  // null vectors kept for the beta cases
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> basis(3 * nc, nb);
  for (int l = 0; l < nb; ++l) basis.col(l) = eig.eigenvectors().col(l);

  const detail::BetaProblem<Scalar> problem(basis, setup.ctrl_world);

  // Initial beta estimates, one per dimension-of-nullspace hypothesis.
  std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> candidates;
  {
    // N = 1.
    Scalar num = 0, den = 0;
    for (int c = 0; c < problem.constraints(); ++c) {
      const Scalar g =
          problem.diffs.template block<3, 1>(3 * c, 0).squaredNorm();
      num += g * problem.sq_dist[c];
      den += g * g;
    }
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> b =
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(nb);
    b[0] = std::sqrt(std::max(Scalar(0), num / den));
    candidates.push_back(b);
  }
  {
    // N = 2: solve for (b1^2, b1*b2, b2^2).
    Eigen::Matrix<Scalar, Eigen::Dynamic, 3> l(problem.constraints(), 3);
    for (int c = 0; c < problem.constraints(); ++c) {
      const Vec3<Scalar> d1 = problem.diffs.template block<3, 1>(3 * c, 0);
      const Vec3<Scalar> d2 = problem.diffs.template block<3, 1>(3 * c, 1);
      l(c, 0) = d1.squaredNorm();
      l(c, 1) = Scalar(2) * d1.dot(d2);
      l(c, 2) = d2.squaredNorm();
    }
    const Eigen::Matrix<Scalar, 3, 1> sol =
        l.colPivHouseholderQr().solve(problem.sq_dist.matrix());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> b =
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(nb);
    if (sol[0] < 0) {
      b[0] = std::sqrt(-sol[0]);
      b[1] = sol[2] < 0 ? std::sqrt(-sol[2]) : Scalar(0);
    } else {
      b[0] = std::sqrt(sol[0]);
      b[1] = sol[2] > 0 ? std::sqrt(sol[2]) : Scalar(0);
    }
    if (sol[1] < 0) b[0] = -b[0];
    candidates.push_back(b);
  }
  if (!setup.planar) {
    // N = 3: solve for (b1^2, b1*b2, b2^2, b1*b3, b2*b3).
    Eigen::Matrix<Scalar, Eigen::Dynamic, 5> l(problem.constraints(), 5);
    for (int c = 0; c < problem.constraints(); ++c) {
      const Vec3<Scalar> d1 = problem.diffs.template block<3, 1>(3 * c, 0);
      const Vec3<Scalar> d2 = problem.diffs.template block<3, 1>(3 * c, 1);
      const Vec3<Scalar> d3 = problem.diffs.template block<3, 1>(3 * c, 2);
      l(c, 0) = d1.squaredNorm();
      l(c, 1) = Scalar(2) * d1.dot(d2);
      l(c, 2) = d2.squaredNorm();
      l(c, 3) = Scalar(2) * d1.dot(d3);
      l(c, 4) = Scalar(2) * d2.dot(d3);
    }
    const Eigen::Matrix<Scalar, 5, 1> sol =
        l.colPivHouseholderQr().solve(problem.sq_dist.matrix());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> b =
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(nb);
    if (sol[0] < 0) {
      b[0] = std::sqrt(-sol[0]);
      b[1] = sol[2] < 0 ? std::sqrt(-sol[2]) : Scalar(0);
    } else {
      b[0] = std::sqrt(sol[0]);
      b[1] = sol[2] > 0 ? std::sqrt(sol[2]) : Scalar(0);
    }
    if (sol[1] < 0) b[0] = -b[0];
    if (b[0] != Scalar(0)) b[2] = sol[3] / b[0];
    candidates.push_back(b);
  }

  PnpResult<Scalar> best;
  best.reprojection_rms = std::numeric_limits<Scalar>::max();
  for (auto& betas : candidates) {
    problem.refine(betas);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> x = basis * betas;
    // Points must sit in front of the camera; the betas are sign-ambiguous.
    Scalar depth_sum = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < nc; ++j)
        depth_sum += setup.alphas(i, j) * x[3 * j + 2];
    if (depth_sum < 0) x = -x;
    Mat3X<Scalar> cam_points(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec3<Scalar> p = Vec3<Scalar>::Zero();
      for (int j = 0; j < nc; ++j)
        p += setup.alphas(i, j) * x.template segment<3>(3 * j);
      cam_points.col(i) = p;
    }
    const RigidTransform<Scalar> pose =
        absolute_orientation(set.points, cam_points);
    const ArrX<Scalar> errors = reprojection_errors(set, pose);
    if (!errors.isFinite().all()) continue;
    const Scalar rms = std::sqrt(errors.square().mean());
    if (rms < best.reprojection_rms) {
      best.pose = pose;
      best.reprojection_rms = rms;
    }
  }
  if (best.reprojection_rms == std::numeric_limits<Scalar>::max())
    throw std::runtime_error("epnp: no valid solution");
  return best;
}

// P3P, classic quartic formulation: with s2 = u*s1, s3 = v*s1 the law of
// cosines for the three point pairs reduces to a quartic in v. Up to four
// camera-frame distance triples, each giving a candidate pose via absolute
// orientation on the three back-projected points.
template <typename Scalar>
inline std::vector<PnpResult<Scalar>> p3p_candidates(
    const CorrespondenceSet<Scalar>& set) {
  if (set.size() != 3)
    throw std::invalid_argument("p3p: exactly 3 correspondences required");
  const auto& k = set.intrinsics;
  Mat3<Scalar> f;  // unit bearing vectors
  for (int i = 0; i < 3; ++i) {
    f.col(i) = Vec3<Scalar>((set.pixels(0, i) - k.cx) / k.fx,
                            (set.pixels(1, i) - k.cy) / k.fy, Scalar(1))
                   .normalized();
  }
  const Vec3<Scalar> p1 = set.points.col(0), p2 = set.points.col(1),
                     p3 = set.points.col(2);
  const Scalar a = (p2 - p3).norm();
  const Scalar b = (p1 - p3).norm();
  const Scalar c = (p1 - p2).norm();
  const Scalar span = std::max({a, b, c});
  if (span <= Scalar(0) ||
      ((p2 - p1).cross(p3 - p1)).norm() < Scalar(1e-10) * span * span)
    throw std::invalid_argument("p3p: degenerate");

  const Scalar ca = f.col(1).dot(f.col(2));
  const Scalar cb = f.col(0).dot(f.col(2));
  const Scalar cg = f.col(0).dot(f.col(1));
  const Scalar A = (a * a) / (b * b);
  const Scalar B = (c * c) / (b * b);
  const Scalar ab = A - B;

  std::vector<double> quartic{
      static_cast<double>((ab - 1) * (ab - 1) - 4 * B * ca * ca),
      static_cast<double>(4 * (cb * ab * (1 - ab) + 2 * B * ca * ca * cb +
                               ca * cg * (A + B - 1))),
      static_cast<double>(2 * (2 * cb * cb * ab * ab + ab * ab -
                               4 * ca * cb * cg * (A + B) - 2 * A * cg * cg -
                               2 * B * ca * ca + 2 * ca * ca + 2 * cg * cg - 1)),
      static_cast<double>(-4 * (cb * ab * ab + cb * ab - 2 * A * cb * cg * cg -
                                ca * cg * (A + B - 1))),
      static_cast<double>((ab + 1) * (ab + 1) - 4 * A * cg * cg)};

  std::vector<PnpResult<Scalar>> results;
  for (double v_root : detail::real_roots(quartic)) {
    const Scalar v = static_cast<Scalar>(v_root);
    if (v <= Scalar(0)) continue;
    const Scalar denom_s1 = Scalar(1) + v * v - Scalar(2) * v * cb;
    if (denom_s1 <= Scalar(0)) continue;
    const Scalar s1 = b / std::sqrt(denom_s1);
    std::vector<Scalar> u_candidates;
    const Scalar denom_u = Scalar(2) * (ca * v - cg);
    if (std::abs(denom_u) > Scalar(1e-10)) {
      u_candidates.push_back(
          ((Scalar(1) - ab) * v * v + Scalar(2) * ab * cb * v - (ab + 1)) /
          denom_u);
    } else {
      // Fall back to the quadratic in u from the third cosine constraint.
      const Scalar disc = cg * cg - (Scalar(1) - B * denom_s1);
      if (disc >= Scalar(0)) {
        u_candidates.push_back(cg + std::sqrt(disc));
        u_candidates.push_back(cg - std::sqrt(disc));
      }
    }
    for (const Scalar u : u_candidates) {
      if (u <= Scalar(0)) continue;
      Mat3X<Scalar> cam(3, 3);
      cam.col(0) = s1 * f.col(0);
      cam.col(1) = u * s1 * f.col(1);
      cam.col(2) = v * s1 * f.col(2);
      PnpResult<Scalar> res;
      res.pose = absolute_orientation(set.points, cam);
      const ArrX<Scalar> errors = reprojection_errors(set, res.pose);
      if (!errors.isFinite().all()) continue;
      res.reprojection_rms = std::sqrt(errors.square().mean());
      results.push_back(res);
    }
  }
  return results;
}

// `set` carries either exactly 3 pairs (the root with the lowest reprojection
// error over those pairs wins) or 4, where the 4th pair only disambiguates.
template <typename Scalar>
inline PnpResult<Scalar> p3p(const CorrespondenceSet<Scalar>& set) {
  if (set.size() != 3 && set.size() != 4)
    throw std::invalid_argument("p3p: 3 correspondences (plus optional 4th) required");
  std::vector<Eigen::Index> first3{0, 1, 2};
  const auto triple = set.size() == 3 ? set : subset(set, first3);
  const auto candidates = p3p_candidates(triple);
  if (candidates.empty()) throw std::runtime_error("p3p: no valid solution");
  PnpResult<Scalar> best;
  Scalar best_err = std::numeric_limits<Scalar>::max();
  for (const auto& cand : candidates) {
    Scalar err;
    if (set.size() == 4) {
      std::vector<Eigen::Index> last{3};
      const auto probe = subset(set, last);
      err = reprojection_errors(probe, cand.pose)[0];
    } else {
      err = cand.reprojection_rms;
    }
    if (err < best_err) {
      best_err = err;
      best = cand;
    }
  }
  return best;
}

// EPnP hypotheses from minimal 4-point samples inside a repeated RANSAC
// loop. Best hypothesis: most inliers, then lower mean inlier error, then
// earlier hypothesis. The returned inlier set is recomputed under the
// returned pose, so its residuals never exceed the threshold.
template <typename Scalar>
inline RansacResult<Scalar> ransac_pnp(const CorrespondenceSet<Scalar>& set,
                                       const RansacConfig& cfg = {}) {
  const Eigen::Index n = set.size();
  if (n < 4)
    throw std::invalid_argument("ransac_pnp: fewer than 4 correspondences");
  const Scalar threshold = static_cast<Scalar>(cfg.inlier_threshold_px);
  const Rng base(cfg.rng_seed);

  bool found = false;
  RigidTransform<Scalar> best_pose;
  Eigen::Index best_count = 0;
  Scalar best_mean = std::numeric_limits<Scalar>::max();
  std::vector<Eigen::Index> sample(4);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    Rng rng = base.fork(static_cast<std::uint64_t>(rep));
    for (int it = 0; it < cfg.max_iterations; ++it) {
      std::iota(order.begin(), order.end(), Eigen::Index(0));
      for (int s = 0; s < 4; ++s) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(s, static_cast<std::int64_t>(n) - 1));
        std::swap(order[static_cast<std::size_t>(s)], order[j]);
        sample[static_cast<std::size_t>(s)] = order[static_cast<std::size_t>(s)];
      }
      RigidTransform<Scalar> pose;
      try {
        pose = epnp(subset(set, sample)).pose;
      } catch (const std::exception&) {
        continue;  // degenerate sample
      }
      const ArrX<Scalar> errors = reprojection_errors(set, pose);
      Eigen::Index count = 0;
      Scalar err_sum = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (errors[i] <= threshold) {
          ++count;
          err_sum += errors[i];
        }
      }
      if (count < 4) continue;
      const Scalar mean = err_sum / static_cast<Scalar>(count);
      if (count > best_count || (count == best_count && mean < best_mean)) {
        best_count = count;
        best_mean = mean;
        best_pose = pose;
        found = true;
      }
    }
  }
  if (!found) throw std::runtime_error("ransac failed");

  RansacResult<Scalar> result;
  result.pose = best_pose;
  if (cfg.refit_on_inliers) {
    std::vector<Eigen::Index> inliers;
    const ArrX<Scalar> errors = reprojection_errors(set, best_pose);
    for (Eigen::Index i = 0; i < n; ++i)
      if (errors[i] <= threshold) inliers.push_back(i);
    try {
      result.pose = epnp(subset(set, inliers)).pose;
    } catch (const std::exception&) {
      result.pose = best_pose;  // keep the hypothesis on a degenerate refit
    }
  }
  const ArrX<Scalar> final_errors = reprojection_errors(set, result.pose);
  Scalar sq_sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (final_errors[i] <= threshold) {
      result.inliers.push_back(i);
      sq_sum += final_errors[i] * final_errors[i];
    }
  }
  if (result.inliers.size() < 4) {
    // The refit drifted off the consensus; fall back to the raw hypothesis.
    result.pose = best_pose;
    result.inliers.clear();
    sq_sum = 0;
    const ArrX<Scalar> errors = reprojection_errors(set, best_pose);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (errors[i] <= threshold) {
        result.inliers.push_back(i);
        sq_sum += errors[i] * errors[i];
      }
    }
  }
  result.reprojection_rms =
      std::sqrt(sq_sum / static_cast<Scalar>(result.inliers.size()));
  return result;
}

}  // namespace calibflow
