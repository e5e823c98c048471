#pragma once

// Training objectives: 3D map regression, reliability, robust reprojection and
// the circular threshold schedule that tempers the reprojection term.

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pl2map/diffcore.hpp"
#include "pl2map/geometry.hpp"
#include "pl2map/scene.hpp"

namespace pl2map {

inline constexpr double kHuberDelta = 1.0;

inline double huber(double x, double delta = kHuberDelta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double x, double delta = kHuberDelta) {
  return std::abs(x) <= delta ? x : (x > 0 ? delta : -delta);
}

struct LossWeights {
  double map = 1, reliability = 1, reprojection = 1;

  void validate() const {
    if (!(map >= 0 && reliability >= 0 && reprojection >= 0))
      throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct TauSchedule {
  double tau_max = 50;  // px; 100 for outdoor scenes
  double tau_min = 1;

  void validate() const {
    if (!(tau_max > tau_min && tau_min > 0)) throw std::invalid_argument("tau schedule needs tau_max > tau_min > 0");
  }
};

/// sqrt(1 - t^2) * tau_max + tau_min for training progress t in (0, 1).
inline double tau(double t, const TauSchedule& s) {
  if (!(t > 0 && t < 1)) throw std::out_of_range("tau: progress " + std::to_string(t) + " outside (0, 1)");
  return std::sqrt(1 - t * t) * s.tau_max + s.tau_min;
}

// ---------------------------------------------------------------------------
// Differentiable loss primitives. Geometry and targets are double; the
// arithmetic runs in double and is rounded back to S.
// ---------------------------------------------------------------------------

/// sum_r w_r * huber(|x_r - target_r|) over rows of x [R, C].
template <typename S>
Var<S> huber_row_norm(Var<S> x, const Tensor<double>& target, const std::vector<double>& weights,
                      double delta = kHuberDelta) {
  detail::require(x.shape().size() == 2 && target.shape() == x.shape() && weights.size() == x.shape()[0],
                  "huber_row_norm: shapes disagree (" + shape_string(x.shape()) + " vs " +
                      shape_string(target.shape()) + ", " + std::to_string(weights.size()) + " weights)");
  const std::size_t R = x.shape()[0], C = x.shape()[1];
  std::vector<double> coef(R, 0.0);  // w * huber'(n) / n
  double total = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (weights[r] == 0) continue;
    double n2 = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double e = double(x.value()(r, c)) - target(r, c);
      n2 += e * e;
    }
    const double n = std::sqrt(n2);
    total += weights[r] * huber(n, delta);
    coef[r] = weights[r] * (n <= delta ? 1.0 : delta / n);
  }
  return x.graph->node(Tensor<S>::scalar(S(total)), {x}, [x, target, coef, R, C](Graph<S>& g, std::size_t self) {
    const double go = double(g.grad(self)[0]);
    Tensor<S>& gx = g.grad(x.id);
    const Tensor<S>& xv = g.value(x.id);
    for (std::size_t r = 0; r < R; ++r) {
      if (coef[r] == 0) continue;
      for (std::size_t c = 0; c < C; ++c) gx(r, c) += S(go * coef[r] * (double(xv(r, c)) - target(r, c)));
    }
  });
}

/// sum_i w_i * huber(x_i - target_i) over every element of x.
template <typename S>
Var<S> huber_sum(Var<S> x, const Tensor<double>& target, const std::vector<double>& weights,
                 double delta = kHuberDelta) {
  const std::size_t n = x.value().size();
  detail::require(target.size() == n && weights.size() == n, "huber_sum: sizes disagree");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (weights[i] != 0) total += weights[i] * huber(double(x.value()[i]) - target[i], delta);
  return x.graph->node(Tensor<S>::scalar(S(total)), {x}, [x, target, weights, delta](Graph<S>& g, std::size_t self) {
    const double go = double(g.grad(self)[0]);
    Tensor<S>& gx = g.grad(x.id);
    const Tensor<S>& xv = g.value(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (weights[i] != 0) gx[i] += S(go * weights[i] * huber_derivative(double(xv[i]) - target[i], delta));
  });
}

/// Elementwise r = 1 / (1 + |beta z|).
template <typename S>
Var<S> reliability(Var<S> z, double beta) {
  const S b = S(beta);
  return detail::unary(
      z, [b](S v) { return S(1) / (S(1) + std::abs(b * v)); },
      [b](S v, S y) { return v > 0 ? -b * y * y : (v < 0 ? b * y * y : S(0)); });
}

/// Pixel coordinates [R, 2] of world points x [R, 3]. Rows with active[r] false
/// are left at zero and pass no gradient (they may sit at or behind the camera).
template <typename S>
Var<S> project_points(Var<S> x, const Pose& pose, const Intrinsics& K, const std::vector<bool>& active) {
  detail::require(x.shape().size() == 2 && x.shape()[1] == 3 && active.size() == x.shape()[0],
                  "project_points: expected [R, 3] points and R flags, got " + shape_string(x.shape()));
  const std::size_t R = x.shape()[0];
  const Eigen::Matrix3d Rw = pose.rotation_matrix();
  Tensor<S> out(Shape{R, 2});
  std::vector<Eigen::Matrix<double, 2, 3>> jac(R, Eigen::Matrix<double, 2, 3>::Zero());
  for (std::size_t r = 0; r < R; ++r) {
    if (!active[r]) continue;
    const Eigen::Vector3d w(x.value()(r, 0), x.value()(r, 1), x.value()(r, 2));
    const Eigen::Vector3d c = Rw * w + pose.translation;
    if (std::abs(c.z()) < kMinProjectionDepth) throw ProjectionError("project_points: active row at zero depth");
    double u, v;
    pinhole(K, c.x(), c.y(), c.z(), u, v);
    out(r, 0) = S(u);
    out(r, 1) = S(v);
    jac[r] = pinhole_jacobian(K, c) * Rw;
  }
  return x.graph->node(std::move(out), {x}, [x, jac, R](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(x.id);
    for (std::size_t r = 0; r < R; ++r) {
      const Eigen::Vector3d d = jac[r].transpose() * Eigen::Vector2d(go(r, 0), go(r, 1));
      for (int c = 0; c < 3; ++c) gx(r, c) += S(d[c]);
    }
  });
}

/// Signed distance of each pixel row of px [R, 2] to the infinite line through
/// lines[r]; result shape [R].
template <typename S>
Var<S> signed_line_distances(Var<S> px, const std::vector<Segment2>& lines) {
  detail::require(px.shape().size() == 2 && px.shape()[1] == 2 && lines.size() == px.shape()[0],
                  "signed_line_distances: expected [R, 2] pixels and R segments");
  const std::size_t R = lines.size();
  std::vector<Eigen::Vector2d> normals(R);
  Tensor<S> out(Shape{R});
  for (std::size_t r = 0; r < R; ++r) {
    const Eigen::Vector2d d = lines[r].q - lines[r].p;
    const double len = d.norm();
    if (len <= kMinSegmentLengthPx) throw DegenerateSegmentError("2D segment endpoints coincide");
    normals[r] = Eigen::Vector2d(-d.y(), d.x()) / len;
    out[r] = S(normals[r].dot(Eigen::Vector2d(px.value()(r, 0), px.value()(r, 1)) - lines[r].p));
  }
  return px.graph->node(std::move(out), {px}, [px, normals, R](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad(px.id);
    for (std::size_t r = 0; r < R; ++r) {
      gx(r, 0) += go[r] * S(normals[r].x());
      gx(r, 1) += go[r] * S(normals[r].y());
    }
  });
}

// ---------------------------------------------------------------------------
// Objectives over one image. `points` is the [N, 4] point head output and
// `lines` the [M, 7] line head output.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void check_counts(Var<S> points, Var<S> lines, const ImageRecord& im, const char* op) {
  if (points.shape() != Shape{im.num_points(), 4} || lines.shape() != Shape{im.num_lines(), 7})
    throw DimensionError(std::string(op) + ": predictions " + shape_string(points.shape()) + " / " +
                         shape_string(lines.shape()) + " do not match image '" + im.id + "' with " +
                         std::to_string(im.num_points()) + " points and " + std::to_string(im.num_lines()) + " lines");
}

inline Tensor<double> columns(const Tensor<double>& t, std::size_t start, std::size_t n) {
  Tensor<double> out(Shape{t.rows(), n});
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = t(r, start + c);
  return out;
}

inline std::vector<double> column(const Tensor<double>& t, std::size_t c) {
  std::vector<double> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) out[r] = t(r, c);
  return out;
}

}  // namespace detail

/// sum r * huber(|P - P'|) over points plus the same over the 6-vectors of lines.
template <typename S>
Var<S> map_loss(Var<S> points, Var<S> lines, const ImageRecord& labels) {
  detail::check_counts(points, lines, labels, "map_loss");
  Var<S> lp = huber_row_norm(slice(points, 1, 0, 3), detail::columns(labels.point_labels, 0, 3),
                             detail::column(labels.point_labels, 3));
  Var<S> ll = huber_row_norm(slice(lines, 1, 0, 6), detail::columns(labels.line_labels, 0, 6),
                             detail::column(labels.line_labels, 6));
  return add(lp, ll);
}

/// sum huber(r - r_hat) over all points and lines.
template <typename S>
Var<S> reliability_loss(Var<S> points, Var<S> lines, const ImageRecord& labels, double beta) {
  detail::check_counts(points, lines, labels, "reliability_loss");
  const std::size_t N = labels.num_points(), M = labels.num_lines();
  Var<S> rp = reliability(slice(points, 1, 3, 1), beta);
  Var<S> rl = reliability(slice(lines, 1, 6, 1), beta);
  return add(huber_sum(rp, Tensor<double>(Shape{N, 1}, detail::column(labels.point_labels, 3)), std::vector<double>(N, 1.0)),
             huber_sum(rl, Tensor<double>(Shape{M, 1}, detail::column(labels.line_labels, 6)), std::vector<double>(M, 1.0)));
}

/// Per-feature gates v * r for the reprojection term, from the current
/// predictions (constants on the tape).
struct ReprojectionGates {
  std::vector<double> points;
  std::vector<double> lines;
};

template <typename S>
ReprojectionGates reprojection_gates(const Tensor<S>& points, const Tensor<S>& lines, const ImageRecord& im,
                                     const Intrinsics& K) {
  ReprojectionGates g{std::vector<double>(im.num_points(), 0.0), std::vector<double>(im.num_lines(), 0.0)};
  for (std::size_t i = 0; i < im.num_points(); ++i) {
    if (!im.point_labeled(i)) continue;
    const Eigen::Vector3d p(points(i, 0), points(i, 1), points(i, 2));
    g.points[i] = p.allFinite() && validity_mask(im.pose, K, p, im.keypoint(i)) ? 1.0 : 0.0;
  }
  for (std::size_t i = 0; i < im.num_lines(); ++i) {
    if (!im.line_labeled(i)) continue;
    const Line3 l{{lines(i, 0), lines(i, 1), lines(i, 2)}, {lines(i, 3), lines(i, 4), lines(i, 5)}};
    g.lines[i] = l.p.allFinite() && l.q.allFinite() && validity_mask(im.pose, K, l, im.segment(i)) ? 1.0 : 0.0;
  }
  return g;
}

/// sum v r huber(|pi(P') - p|) + sum v r (huber(d_P) + huber(d_Q)).
template <typename S>
Var<S> reprojection_loss(Var<S> points, Var<S> lines, const ImageRecord& obs, const Intrinsics& K) {
  detail::check_counts(points, lines, obs, "reprojection_loss");
  const std::size_t N = obs.num_points(), M = obs.num_lines();
  const ReprojectionGates gates = reprojection_gates(points.value(), lines.value(), obs, K);

  std::vector<bool> active_p(N);
  for (std::size_t i = 0; i < N; ++i) active_p[i] = gates.points[i] != 0;
  Var<S> px = project_points(slice(points, 1, 0, 3), obs.pose, K, active_p);
  Var<S> lp = huber_row_norm(px, obs.keypoints, gates.points);

  // Endpoints P, Q of line i become rows 2i, 2i+1.
  std::vector<bool> active_l(2 * M);
  std::vector<double> weights_l(2 * M);
  std::vector<Segment2> segments(2 * M);
  for (std::size_t i = 0; i < M; ++i) {
    active_l[2 * i] = active_l[2 * i + 1] = gates.lines[i] != 0;
    weights_l[2 * i] = weights_l[2 * i + 1] = gates.lines[i];
    segments[2 * i] = segments[2 * i + 1] = obs.segment(i);
  }
  Var<S> ends = reshape(slice(lines, 1, 0, 6), Shape{2 * M, 3});
  Var<S> dist = signed_line_distances(project_points(ends, obs.pose, K, active_l), segments);
  Var<S> ll = huber_sum(dist, Tensor<double>(Shape{2 * M}), weights_l);
  return add(lp, ll);
}

/// tau * tanh(L / tau): ~L for small L, saturating at tau.
template <typename S>
Var<S> robust_wrap(Var<S> loss, double tau_px) {
  if (!(tau_px > 0)) throw std::invalid_argument("robust_wrap: tau must be positive");
  return scale(tanh(scale(loss, S(1.0 / tau_px))), S(tau_px));
}

template <typename S>
struct LossTerms {
  Var<S> map, reliability, reprojection, wrapped, total;
};

template <typename S>
LossTerms<S> total_loss(Var<S> points, Var<S> lines, const ImageRecord& im, const Intrinsics& K,
                        const LossWeights& w, double tau_px, double beta) {
  LossTerms<S> t;
  t.map = map_loss(points, lines, im);
  t.reliability = reliability_loss(points, lines, im, beta);
  t.reprojection = reprojection_loss(points, lines, im, K);
  t.wrapped = robust_wrap(t.reprojection, tau_px);
  t.total = add(add(scale(t.map, S(w.map)), scale(t.reliability, S(w.reliability))),
                scale(t.wrapped, S(w.reprojection)));
  return t;
}

}  // namespace pl2map
