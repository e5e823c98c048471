#pragma once

// Camera pose from predicted 2D-3D correspondences: P3P inside RANSAC over
// points, then robust damped least squares over points and lines.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "pl2map/geometry.hpp"
#include "pl2map/losses.hpp"
#include "pl2map/model.hpp"
#include "pl2map/scene.hpp"

namespace pl2map {

struct PointCorrespondence {
  Eigen::Vector2d pixel;
  Eigen::Vector3d world;
  double reliability = 1;
};

struct LineCorrespondence {
  Segment2 segment;
  Line3 line;
  double reliability = 1;
};

struct Correspondences {
  std::vector<PointCorrespondence> points;
  std::vector<LineCorrespondence> lines;
};

struct LocalizeOptions {
  double threshold_px = 3;
  double confidence = 0.999;
  std::size_t max_iterations = 10000;
  double min_point_reliability = 0.5;
  double min_line_reliability = 0.05;
  std::size_t max_refine_steps = 50;
  std::uint64_t seed = 0;
};

struct PoseEstimate {
  bool success = false;
  Pose pose;
  std::vector<bool> point_inliers;  // indexed like the input correspondences
  std::vector<bool> line_inliers;
  std::size_t iterations = 0;

  std::size_t num_point_inliers() const { return std::size_t(std::count(point_inliers.begin(), point_inliers.end(), true)); }
  std::size_t num_line_inliers() const { return std::size_t(std::count(line_inliers.begin(), line_inliers.end(), true)); }
};

// ---------------------------------------------------------------------------
// Minimal solver
// ---------------------------------------------------------------------------

namespace detail {

/// Real roots of c[0] x^n + ... + c[n], via companion-matrix eigenvalues
/// polished with Newton steps.
inline std::vector<double> real_roots(std::vector<double> c) {
  while (!c.empty() && std::abs(c.front()) < 1e-14 * (1 + std::abs(c.back()))) c.erase(c.begin());
  const int n = int(c.size()) - 1;
  if (n < 1) return {};
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) comp(0, i) = -c[i + 1] / c[0];
  for (int i = 1; i < n; ++i) comp(i, i - 1) = 1;
  const Eigen::EigenSolver<Eigen::MatrixXd> es(comp, false);
  auto eval = [&](double x, double& d) {
    double p = 0;
    d = 0;
    for (double coef : c) {
      d = d * x + p;
      p = p * x + coef;
    }
    return p;
  };
  std::vector<double> roots;
  for (int i = 0; i < n; ++i) {
    const std::complex<double> z = es.eigenvalues()[i];
    if (std::abs(z.imag()) > 1e-6 * (1 + std::abs(z.real()))) continue;
    double x = z.real();
    for (int k = 0; k < 8; ++k) {
      double d;
      const double p = eval(x, d);
      if (d == 0) break;
      const double step = p / d;
      x -= step;
      if (std::abs(step) < 1e-15 * (1 + std::abs(x))) break;
    }
    roots.push_back(x);
  }
  return roots;
}

/// Rigid transform mapping world points onto camera points (least squares).
template <std::size_t N>
Pose kabsch(const std::array<Eigen::Vector3d, N>& world, const std::array<Eigen::Vector3d, N>& cam) {
  Eigen::Vector3d cw = Eigen::Vector3d::Zero(), cc = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < N; ++i) {
    cw += world[i];
    cc += cam[i];
  }
  cw /= double(N);
  cc /= double(N);
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < N; ++i) H += (world[i] - cw) * (cam[i] - cc).transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1 : 1;
  const Eigen::Matrix3d R = svd.matrixV() * D * svd.matrixU().transpose();
  return Pose(R, cc - R * cw);
}

}  // namespace detail

/// Grunert's P3P in the quartic form reviewed by Haralick et al.: depths along
/// the three viewing rays from the law of cosines, then the rigid transform.
/// Returns every real solution with positive depths; collinear points give none.
inline std::vector<Pose> p3p_minimal(const std::array<Eigen::Vector2d, 3>& pixels,
                                     const std::array<Eigen::Vector3d, 3>& world, const Intrinsics& K) {
  const Eigen::Vector3d& X1 = world[0];
  const Eigen::Vector3d& X2 = world[1];
  const Eigen::Vector3d& X3 = world[2];
  const double scale = std::max({(X2 - X1).squaredNorm(), (X3 - X1).squaredNorm(), (X3 - X2).squaredNorm()});
  if (scale == 0 || (X2 - X1).cross(X3 - X1).norm() <= 1e-10 * scale) return {};

  std::array<Eigen::Vector3d, 3> f;
  for (int i = 0; i < 3; ++i) f[i] = back_project(K, pixels[i]);
  const double a2 = (X2 - X3).squaredNorm(), b2 = (X1 - X3).squaredNorm(), c2 = (X1 - X2).squaredNorm();
  const double ca = f[1].dot(f[2]), cb = f[0].dot(f[2]), cg = f[0].dot(f[1]);

  const double amc = (a2 - c2) / b2, apc = (a2 + c2) / b2;
  const double A4 = (amc - 1) * (amc - 1) - 4 * c2 / b2 * ca * ca;
  const double A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb);
  const double A2 = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca -
                         4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg);
  const double A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg);
  const double A0 = (1 + amc) * (1 + amc) - 4 * a2 / b2 * cg * cg;

  std::vector<Pose> out;
  for (double v : detail::real_roots({A4, A3, A2, A1, A0})) {
    const double den = 2 * (cg - v * ca);
    if (std::abs(den) < 1e-14) continue;
    const double u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den;
    const double s1sq = b2 / (1 + v * v - 2 * v * cb);
    if (!(s1sq > 0) || u <= 0 || v <= 0) continue;
    const double s1 = std::sqrt(s1sq);
    const std::array<Eigen::Vector3d, 3> cam{s1 * f[0], u * s1 * f[1], v * s1 * f[2]};
    out.push_back(detail::kabsch<3>(world, cam));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Residuals and robust cost
// ---------------------------------------------------------------------------

/// Reprojection error of a point, or +inf when it is not in front of the camera.
inline double point_error(const Pose& pose, const Intrinsics& K, const PointCorrespondence& c) {
  const Eigen::Vector3d x = pose.transform(c.world);
  if (x.z() <= kMinProjectionDepth) return std::numeric_limits<double>::infinity();
  Eigen::Vector2d px;
  pinhole(K, x.x(), x.y(), x.z(), px.x(), px.y());
  return (px - c.pixel).norm();
}

/// psi = d_P + d_Q, or +inf when an endpoint is not in front of the camera.
inline double line_error(const Pose& pose, const Intrinsics& K, const LineCorrespondence& c) {
  if (pose.transform(c.line.p).z() <= kMinProjectionDepth || pose.transform(c.line.q).z() <= kMinProjectionDepth)
    return std::numeric_limits<double>::infinity();
  return line_distance(pose, K, c.line, c.segment).sum();
}

namespace detail {

inline std::vector<std::size_t> reliable(const std::vector<PointCorrespondence>& v, double min_r) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i].reliability > min_r && v[i].pixel.allFinite() && v[i].world.allFinite()) out.push_back(i);
  return out;
}

inline std::vector<std::size_t> reliable(const std::vector<LineCorrespondence>& v, double min_r) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& c = v[i];
    if (c.reliability > min_r && c.line.p.allFinite() && c.line.q.allFinite() && !c.line.degenerate() &&
        (c.segment.q - c.segment.p).norm() > kMinSegmentLengthPx)
      out.push_back(i);
  }
  return out;
}

inline double truncated_huber(double x, double threshold) { return huber(std::min(std::abs(x), threshold)); }

}  // namespace detail

/// Huber cost truncated at the inlier threshold over every reliable
/// correspondence: points on the residual norm, lines on each endpoint distance.
/// Independent of any inlier set, so refinements can be compared with it.
inline double robust_cost(const Pose& pose, const Intrinsics& K, const Correspondences& c, const LocalizeOptions& opt) {
  double cost = 0;
  for (std::size_t i : detail::reliable(c.points, opt.min_point_reliability)) {
    const double e = point_error(pose, K, c.points[i]);
    cost += detail::truncated_huber(std::isfinite(e) ? e : opt.threshold_px, opt.threshold_px);
  }
  for (std::size_t i : detail::reliable(c.lines, opt.min_line_reliability)) {
    const auto& l = c.lines[i];
    if (!std::isfinite(line_error(pose, K, l))) {
      cost += 2 * huber(opt.threshold_px);
      continue;
    }
    cost += detail::truncated_huber(signed_line_distance(l.segment, project(pose, K, l.line.p).pixel), opt.threshold_px);
    cost += detail::truncated_huber(signed_line_distance(l.segment, project(pose, K, l.line.q).pixel), opt.threshold_px);
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Damped least squares over a fixed inlier set
// ---------------------------------------------------------------------------

namespace detail {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

/// Left increment: R <- exp(w) R, t <- exp(w) t + dt.
inline Pose apply_increment(const Pose& pose, const Vector6d& delta) {
  const Eigen::Vector3d w = delta.head<3>();
  const double angle = w.norm();
  const Eigen::Quaterniond dq =
      angle > 0 ? Eigen::Quaterniond(Eigen::AngleAxisd(angle, w / angle)) : Eigen::Quaterniond::Identity();
  return Pose((dq * pose.rotation).normalized(), dq * pose.translation + delta.tail<3>());
}

/// d(pixel)/d(increment) for a world point.
inline Eigen::Matrix<double, 2, 6> pixel_jacobian(const Pose& pose, const Intrinsics& K, const Eigen::Vector3d& world) {
  const Eigen::Vector3d c = pose.transform(world);
  Eigen::Matrix<double, 3, 6> dc;
  dc.leftCols<3>() << 0, c.z(), -c.y(), -c.z(), 0, c.x(), c.y(), -c.x(), 0;  // -[c]_x
  dc.rightCols<3>() = Eigen::Matrix3d::Identity();
  return pinhole_jacobian(K, c) * dc;
}

struct InlierSet {
  std::vector<std::size_t> points, lines;
};

/// Huber-weighted cost over the inlier set (no truncation), inf if any inlier
/// leaves the front of the camera.
inline double inlier_cost(const Pose& pose, const Intrinsics& K, const Correspondences& c, const InlierSet& s) {
  double cost = 0;
  for (std::size_t i : s.points) {
    const double e = point_error(pose, K, c.points[i]);
    if (!std::isfinite(e)) return e;
    cost += huber(e);
  }
  for (std::size_t i : s.lines) {
    const auto& l = c.lines[i];
    if (!std::isfinite(line_error(pose, K, l))) return std::numeric_limits<double>::infinity();
    cost += huber(signed_line_distance(l.segment, project(pose, K, l.line.p).pixel));
    cost += huber(signed_line_distance(l.segment, project(pose, K, l.line.q).pixel));
  }
  return cost;
}

/// Levenberg-Marquardt with iteratively reweighted Huber weights.
inline Pose levenberg_marquardt(Pose pose, const Intrinsics& K, const Correspondences& c, const InlierSet& s,
                                std::size_t max_steps) {
  double cost = inlier_cost(pose, K, c, s);
  if (!std::isfinite(cost)) return pose;
  double lambda = 1e-3;
  for (std::size_t it = 0; it < max_steps; ++it) {
    Matrix6d H = Matrix6d::Zero();
    Vector6d g = Vector6d::Zero();
    for (std::size_t i : s.points) {
      const auto& p = c.points[i];
      const Eigen::Vector2d r = project(pose, K, p.world).pixel - p.pixel;
      const double n = r.norm();
      const double w = n <= kHuberDelta ? 1.0 : kHuberDelta / n;
      const auto J = pixel_jacobian(pose, K, p.world);
      H += w * J.transpose() * J;
      g += w * J.transpose() * r;
    }
    for (std::size_t i : s.lines) {
      const auto& l = c.lines[i];
      const Eigen::Vector2d d = l.segment.q - l.segment.p;
      const Eigen::Vector2d normal = Eigen::Vector2d(-d.y(), d.x()) / d.norm();
      for (const Eigen::Vector3d* X : {&l.line.p, &l.line.q}) {
        const double r = signed_line_distance(l.segment, project(pose, K, *X).pixel);
        const double w = std::abs(r) <= kHuberDelta ? 1.0 : kHuberDelta / std::abs(r);
        const Eigen::Matrix<double, 1, 6> J = normal.transpose() * pixel_jacobian(pose, K, *X);
        H += w * J.transpose() * J;
        g += w * J.transpose() * r;
      }
    }
    bool improved = false;
    for (int tries = 0; tries < 10 && !improved; ++tries) {
      Matrix6d A = H;
      A.diagonal() += lambda * (H.diagonal().array() + 1e-12).matrix();
      const Vector6d delta = -A.ldlt().solve(g);
      if (!delta.allFinite()) break;
      const Pose trial = apply_increment(pose, delta);
      const double trial_cost = inlier_cost(trial, K, c, s);
      if (trial_cost < cost) {
        const double gain = cost - trial_cost;
        pose = trial;
        cost = trial_cost;
        lambda = std::max(lambda / 10, 1e-12);
        improved = true;
        if (gain < 1e-14 * (1 + cost) || delta.norm() < 1e-14) return pose;
      } else {
        lambda *= 10;
      }
    }
    if (!improved) break;
  }
  return pose;
}

inline InlierSet collect_inliers(const Pose& pose, const Intrinsics& K, const Correspondences& c,
                                 const std::vector<std::size_t>& points, const std::vector<std::size_t>& lines,
                                 double threshold) {
  InlierSet s;
  for (std::size_t i : points)
    if (point_error(pose, K, c.points[i]) < threshold) s.points.push_back(i);
  for (std::size_t i : lines)
    if (line_error(pose, K, c.lines[i]) < threshold) s.lines.push_back(i);
  return s;
}

inline void fill_flags(PoseEstimate& e, const Correspondences& c, const InlierSet& s) {
  e.point_inliers.assign(c.points.size(), false);
  e.line_inliers.assign(c.lines.size(), false);
  for (std::size_t i : s.points) e.point_inliers[i] = true;
  for (std::size_t i : s.lines) e.line_inliers[i] = true;
}

}  // namespace detail

/// Robust refinement from an initial pose over reliable points and lines. Two
/// rounds of: collect inliers (point error, and psi for lines, below the
/// threshold) then LM on them. Falls back to the initial pose if the truncated
/// robust cost did not improve. Lines are optional; without any the result is
/// the point-only refinement.
inline PoseEstimate refine_points_lines(const Pose& init, const Correspondences& c, const Intrinsics& K,
                                        const LocalizeOptions& opt = {}) {
  const auto pts = detail::reliable(c.points, opt.min_point_reliability);
  const auto lns = detail::reliable(c.lines, opt.min_line_reliability);
  Pose pose = init;
  for (int round = 0; round < 2; ++round) {
    const auto s = detail::collect_inliers(pose, K, c, pts, lns, opt.threshold_px);
    if (s.points.size() + s.lines.size() < 3) break;
    pose = detail::levenberg_marquardt(pose, K, c, s, opt.max_refine_steps);
  }
  if (robust_cost(pose, K, c, opt) > robust_cost(init, K, c, opt)) pose = init;
  PoseEstimate e;
  e.success = true;
  e.pose = pose;
  detail::fill_flags(e, c, detail::collect_inliers(pose, K, c, pts, lns, opt.threshold_px));
  return e;
}

/// Point-only refinement: refine_points_lines with the lines dropped.
inline PoseEstimate refine_points(const Pose& init, const Correspondences& c, const Intrinsics& K,
                                  const LocalizeOptions& opt = {}) {
  PoseEstimate e = refine_points_lines(init, Correspondences{c.points, {}}, K, opt);
  e.line_inliers.assign(c.lines.size(), false);
  return e;
}

/// Number of RANSAC iterations needed to draw one all-inlier sample of size 3
/// with the requested confidence.
inline std::size_t ransac_iterations_needed(double inlier_ratio, double confidence, std::size_t cap) {
  const double w3 = std::pow(std::clamp(inlier_ratio, 0.0, 1.0), 3);
  if (w3 >= 1) return 1;
  if (w3 <= 0) return cap;
  const double n = std::log(1 - confidence) / std::log(1 - w3);
  return n >= double(cap) ? cap : std::max<std::size_t>(1, std::size_t(std::ceil(n)));
}

/// RANSAC over P3P hypotheses on reliable points; the best hypothesis is
/// refined over point inliers. Fails softly with fewer than 3 usable points.
inline PoseEstimate ransac_pnp(const Correspondences& c, const Intrinsics& K, const LocalizeOptions& opt = {}) {
  PoseEstimate result;
  result.point_inliers.assign(c.points.size(), false);
  result.line_inliers.assign(c.lines.size(), false);
  const auto usable = detail::reliable(c.points, opt.min_point_reliability);
  if (usable.size() < 3) return result;

  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
  std::size_t best_count = 0;
  double best_score = std::numeric_limits<double>::infinity();
  Pose best;
  std::size_t needed = opt.max_iterations, it = 0;
  for (; it < needed && it < opt.max_iterations; ++it) {
    std::size_t a = pick(rng), b = pick(rng), d = pick(rng);
    while (b == a) b = pick(rng);
    while (d == a || d == b) d = pick(rng);
    const auto& p = c.points;
    for (const Pose& h : p3p_minimal({p[usable[a]].pixel, p[usable[b]].pixel, p[usable[d]].pixel},
                                     {p[usable[a]].world, p[usable[b]].world, p[usable[d]].world}, K)) {
      std::size_t count = 0;
      double score = 0;
      for (std::size_t i : usable) {
        const double e = point_error(h, K, p[i]);
        if (e < opt.threshold_px) {
          ++count;
          score += e * e;
        }
      }
      if (count > best_count || (count == best_count && count > 0 && score < best_score)) {
        best_count = count;
        best_score = score;
        best = h;
        needed = ransac_iterations_needed(double(count) / double(usable.size()), opt.confidence, opt.max_iterations);
      }
    }
  }
  result.iterations = it;
  if (best_count < 3) return result;
  PoseEstimate refined = refine_points(best, c, K, opt);
  refined.iterations = it;
  return refined;
}

/// Correspondences between an image's observations and the network's
/// predictions for it.
template <typename S>
Correspondences correspondences_from(const Prediction<S>& pred, const ImageRecord& im) {
  if (pred.num_points() != im.num_points() || pred.num_lines() != im.num_lines())
    throw DimensionError("prediction does not match image '" + im.id + "'");
  Correspondences c;
  for (std::size_t i = 0; i < im.num_points(); ++i)
    c.points.push_back({im.keypoint(i), pred.point(i), double(pred.point_reliability[i])});
  for (std::size_t i = 0; i < im.num_lines(); ++i)
    c.lines.push_back({im.segment(i), pred.line(i), double(pred.line_reliability[i])});
  return c;
}

/// RANSAC PnP on points, then (when use_lines) joint point+line refinement.
inline PoseEstimate localize(const Correspondences& c, const Intrinsics& K, bool use_lines,
                             const LocalizeOptions& opt = {}) {
  PoseEstimate e = ransac_pnp(c, K, opt);
  if (!e.success || !use_lines) return e;
  PoseEstimate refined = refine_points_lines(e.pose, c, K, opt);
  refined.iterations = e.iterations;
  return refined;
}

}  // namespace pl2map
