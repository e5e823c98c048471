#pragma once

// Pinhole camera geometry: world-to-camera poses, projection, point and line
// reprojection residuals, validity masking and augmentation of cameras.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

namespace pl2map {

class ProjectionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class DegenerateSegmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Pose() = default;
  Pose(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) : rotation(q.normalized()), translation(t) {}
  Pose(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) : rotation(Eigen::Quaterniond(R).normalized()), translation(t) {}

  static Pose identity() { return Pose(); }

  Eigen::Matrix3d rotation_matrix() const { return rotation.toRotationMatrix(); }
  Eigen::Vector3d transform(const Eigen::Vector3d& world) const { return rotation * world + translation; }

  /// Camera center in world coordinates.
  Eigen::Vector3d center() const { return -(rotation.conjugate() * translation); }

  Pose inverse() const {
    const Eigen::Quaterniond inv = rotation.conjugate();
    return Pose(inv, -(inv * translation));
  }

  /// (a * b)(x) = a(b(x)); the product quaternion is renormalized.
  friend Pose operator*(const Pose& a, const Pose& b) {
    return Pose((a.rotation * b.rotation).normalized(), a.rotation * b.translation + a.translation);
  }
};

struct Intrinsics {
  double fx = 500, fy = 500;
  double cx = 320, cy = 240;
  int width = 640, height = 480;

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw std::invalid_argument("intrinsics: focal lengths must be positive");
    if (!(cx >= 0 && cx <= width && cy >= 0 && cy <= height))
      throw std::invalid_argument("intrinsics: principal point outside the image");
  }

  bool contains(const Eigen::Vector2d& px) const {
    return px.x() >= 0 && px.y() >= 0 && px.x() < width && px.y() < height;
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// 3D segment with endpoints P and Q (the 6-vector line label).
struct Line3 {
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  Eigen::Vector3d q = Eigen::Vector3d::Zero();

  bool degenerate(double eps = 1e-9) const { return (p - q).norm() <= eps; }
};

/// Detected 2D segment with endpoints p and q, in pixels.
struct Segment2 {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();
  Eigen::Vector2d q = Eigen::Vector2d::Zero();
};

inline constexpr double kMinProjectionDepth = 1e-9;
inline constexpr double kMinValidDepth = 0.1;
inline constexpr double kMaxValidDepth = 1000.0;
inline constexpr double kMaxValidResidualPx = 1000.0;
inline constexpr double kMinSegmentLengthPx = 1e-6;

struct Projection {
  Eigen::Vector2d pixel;
  double depth;  // camera-frame z, reported even when behind the camera
};

/// Pinhole projection of a camera-frame point, generic over the scalar so the
/// differentiable losses share it.
template <typename S>
inline void pinhole(const Intrinsics& K, S x, S y, S z, S& u, S& v) {
  u = S(K.fx) * x / z + S(K.cx);
  v = S(K.fy) * y / z + S(K.cy);
}

inline Projection project(const Pose& pose, const Intrinsics& K, const Eigen::Vector3d& world) {
  const Eigen::Vector3d c = pose.transform(world);
  if (std::abs(c.z()) < kMinProjectionDepth) throw ProjectionError("point projects to infinity (|z| < 1e-9)");
  Projection out;
  pinhole(K, c.x(), c.y(), c.z(), out.pixel.x(), out.pixel.y());
  out.depth = c.z();
  return out;
}

/// Unit-length ray through a pixel, in camera coordinates.
inline Eigen::Vector3d back_project(const Intrinsics& K, const Eigen::Vector2d& px) {
  return Eigen::Vector3d((px.x() - K.cx) / K.fx, (px.y() - K.cy) / K.fy, 1.0).normalized();
}

/// d(pixel)/d(camera-frame point).
inline Eigen::Matrix<double, 2, 3> pinhole_jacobian(const Intrinsics& K, const Eigen::Vector3d& c) {
  const double iz = 1.0 / c.z();
  Eigen::Matrix<double, 2, 3> J;
  J << K.fx * iz, 0, -K.fx * c.x() * iz * iz, 0, K.fy * iz, -K.fy * c.y() * iz * iz;
  return J;
}

/// d(pixel)/d(world point).
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Pose& pose, const Intrinsics& K,
                                                       const Eigen::Vector3d& world) {
  return pinhole_jacobian(K, pose.transform(world)) * pose.rotation_matrix();
}

inline Eigen::Vector2d point_residual(const Pose& pose, const Intrinsics& K, const Eigen::Vector3d& world,
                                      const Eigen::Vector2d& observed) {
  return project(pose, K, world).pixel - observed;
}

/// Signed distance of x to the infinite line through seg, positive on the left
/// of p->q.
inline double signed_line_distance(const Segment2& seg, const Eigen::Vector2d& x) {
  const Eigen::Vector2d d = seg.q - seg.p;
  const double len = d.norm();
  if (len <= kMinSegmentLengthPx) throw DegenerateSegmentError("2D segment endpoints coincide");
  const Eigen::Vector2d r = x - seg.p;
  return (d.x() * r.y() - d.y() * r.x()) / len;
}

struct LineDistances {
  double d_p = 0;  // distance of pi(P) to the supporting line of pq
  double d_q = 0;  // distance of pi(Q)
  double sum() const { return d_p + d_q; }
};

/// Perpendicular distances of both projected 3D endpoints to the infinite line
/// supporting the detected segment. Their sum is the line reprojection error.
inline LineDistances line_distance(const Pose& pose, const Intrinsics& K, const Line3& line, const Segment2& seg) {
  if ((seg.q - seg.p).norm() <= kMinSegmentLengthPx) throw DegenerateSegmentError("2D segment endpoints coincide");
  const Eigen::Vector2d pp = project(pose, K, line.p).pixel;
  const Eigen::Vector2d pq = project(pose, K, line.q).pixel;
  return {std::abs(signed_line_distance(seg, pp)), std::abs(signed_line_distance(seg, pq))};
}

inline bool depth_valid(double depth) { return depth >= kMinValidDepth && depth <= kMaxValidDepth; }

/// 1 iff the prediction lies 0.1 m to 1000 m in front of the camera and
/// reprojects within 1000 px of its observation.
inline bool validity_mask(const Pose& pose, const Intrinsics& K, const Eigen::Vector3d& predicted,
                          const Eigen::Vector2d& observed) {
  const Eigen::Vector3d c = pose.transform(predicted);
  if (!depth_valid(c.z())) return false;
  Eigen::Vector2d px;
  pinhole(K, c.x(), c.y(), c.z(), px.x(), px.y());
  return (px - observed).norm() < kMaxValidResidualPx;
}

inline bool validity_mask(const Pose& pose, const Intrinsics& K, const Line3& predicted, const Segment2& observed) {
  if (!depth_valid(pose.transform(predicted.p).z()) || !depth_valid(pose.transform(predicted.q).z())) return false;
  if ((observed.q - observed.p).norm() <= kMinSegmentLengthPx) return false;
  return line_distance(pose, K, predicted, observed).sum() < kMaxValidResidualPx;
}

inline Eigen::Matrix3d rotation_z(double theta) {
  return Eigen::AngleAxisd(theta, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Angle of the relative rotation a * b^T, in degrees.
inline double rotation_error_deg(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
  const double w = std::abs((a * b.conjugate()).normalized().w());
  return rad_to_deg(2.0 * std::acos(std::min(1.0, w)));
}

/// In-plane image rotation about the principal point followed by a rescale of
/// the image about its origin.
struct CameraAugmentation {
  double rotation = 0;  // radians, expected in [-30 deg, 30 deg]
  double scale = 1;     // expected in [0.66, 1.5]
};

/// Pose and intrinsics that see the augmented image. Rotation pre-composes the
/// pose with R_z(theta) and leaves K unchanged; scaling multiplies focal
/// lengths, principal point and image size by s. Pixel rotation equivalence
/// holds for square pixels (fx == fy).
inline std::pair<Pose, Intrinsics> augment_camera(const Pose& pose, const Intrinsics& K, const CameraAugmentation& aug) {
  Pose rotated = Pose(rotation_z(aug.rotation), Eigen::Vector3d::Zero()) * pose;
  Intrinsics scaled = K;
  scaled.fx *= aug.scale;
  scaled.fy *= aug.scale;
  scaled.cx *= aug.scale;
  scaled.cy *= aug.scale;
  scaled.width = static_cast<int>(std::lround(K.width * aug.scale));
  scaled.height = static_cast<int>(std::lround(K.height * aug.scale));
  return {rotated, scaled};
}

/// Where an observed pixel of the original image lands in the augmented image.
inline Eigen::Vector2d augment_pixel(const Intrinsics& K, const CameraAugmentation& aug, const Eigen::Vector2d& px) {
  const double c = std::cos(aug.rotation), s = std::sin(aug.rotation);
  const Eigen::Vector2d d = px - Eigen::Vector2d(K.cx, K.cy);
  const Eigen::Vector2d rotated(K.cx + c * d.x() - s * d.y(), K.cy + s * d.x() + c * d.y());
  return aug.scale * rotated;
}

}  // namespace pl2map
