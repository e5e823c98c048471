#include <gtest/gtest.h>

#include <random>

#include "pl2map/geometry.hpp"

using namespace pl2map;
using Eigen::Vector2d;
using Eigen::Vector3d;

namespace {

Intrinsics vga() { return Intrinsics{500, 500, 320, 240, 640, 480}; }

Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return Pose(q.normalized(), Vector3d(n(rng), n(rng), n(rng)));
}

// A world point in front of `pose` at depth in [2, 10].
Vector3d point_in_front(const Pose& pose, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> xy(-2, 2), z(2, 10);
  const Vector3d cam(xy(rng), xy(rng), z(rng));
  return pose.inverse().transform(cam);
}

// Distance from x to the line through p and q via the homogeneous line p~ x q~.
double homogeneous_distance(const Vector2d& p, const Vector2d& q, const Vector2d& x) {
  const Vector3d l = Vector3d(p.x(), p.y(), 1).cross(Vector3d(q.x(), q.y(), 1));
  return std::abs(l.dot(Vector3d(x.x(), x.y(), 1))) / std::hypot(l.x(), l.y());
}

}  // namespace

TEST(Project, OpticalAxis) {
  auto pr = project(Pose::identity(), vga(), Vector3d(0, 0, 1));
  EXPECT_EQ(pr.pixel, Vector2d(320, 240));
  EXPECT_EQ(pr.depth, 1.0);
}

TEST(Project, OffAxisPoint) {
  auto pr = project(Pose::identity(), vga(), Vector3d(1, 0, 2));
  EXPECT_EQ(pr.pixel, Vector2d(570, 240));
  EXPECT_EQ(pr.depth, 2.0);
}

TEST(Project, DepthBehindCameraIsReported) {
  auto pr = project(Pose::identity(), vga(), Vector3d(0, 0, -3));
  EXPECT_EQ(pr.depth, -3.0);
}

TEST(Project, PointAtInfinityThrows) {
  EXPECT_THROW(project(Pose::identity(), vga(), Vector3d(1, 1, 1e-12)), ProjectionError);
}

TEST(Project, BackProjectedRayContainsPoint) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Pose pose = random_pose(rng);
    const Vector3d P = point_in_front(pose, rng);
    const auto pr = project(pose, vga(), P);
    const Vector3d dir = pose.rotation.conjugate() * back_project(vga(), pr.pixel);
    const Vector3d c = pose.center();
    const Vector3d off = P - c;
    EXPECT_LT((off - off.dot(dir) * dir).norm(), 1e-9);
  }
}

TEST(PointResidual, ExactProjectionGivesZero) {
  const Vector3d P(0.3, -0.2, 4);
  const Vector2d u = project(Pose::identity(), vga(), P).pixel;
  EXPECT_EQ(point_residual(Pose::identity(), vga(), P, u), Vector2d::Zero());
}

TEST(PointResidual, SimilarTriangles) {
  const Vector2d r = point_residual(Pose::identity(), vga(), Vector3d(1, 0, 1), Vector2d(320, 240));
  EXPECT_DOUBLE_EQ(r.x(), 500.0);
  EXPECT_DOUBLE_EQ(r.y(), 0.0);
}

TEST(PointResidual, SquaredNormGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const double h = 1e-6;
  for (int i = 0; i < 50; ++i) {
    const Pose pose = random_pose(rng);
    const Vector3d P = point_in_front(pose, rng);
    const Vector2d u = project(pose, vga(), P).pixel + Vector2d(3.5, -2.0);
    const Vector3d analytic = 2.0 * projection_jacobian(pose, vga(), P).transpose() * point_residual(pose, vga(), P, u);
    for (int k = 0; k < 3; ++k) {
      Vector3d pp = P, pm = P;
      pp[k] += h;
      pm[k] -= h;
      const double numeric =
          (point_residual(pose, vga(), pp, u).squaredNorm() - point_residual(pose, vga(), pm, u).squaredNorm()) / (2 * h);
      EXPECT_LE(std::abs(numeric - analytic[k]) / std::max({std::abs(numeric), std::abs(analytic[k]), 1e-3}), 1e-6);
    }
  }
}

TEST(LineDistance, EndpointsOnSupportingLine) {
  Intrinsics K{100, 100, 0, 0, 640, 480};
  Line3 L{Vector3d(1, 0, 100), Vector3d(-4, 0, 50)};
  Segment2 seg{Vector2d(0, 0), Vector2d(10, 0)};
  auto d = line_distance(Pose::identity(), K, L, seg);
  EXPECT_EQ(d.d_p, 0.0);
  EXPECT_EQ(d.d_q, 0.0);
}

TEST(LineDistance, DistancesToXAxis) {
  Intrinsics K{100, 100, 0, 0, 640, 480};
  Line3 L{Vector3d(2, 3, 100), Vector3d(8, -4, 100)};
  Segment2 seg{Vector2d(0, 0), Vector2d(10, 0)};
  auto d = line_distance(Pose::identity(), K, L, seg);
  EXPECT_NEAR(d.d_p, 3.0, 1e-12);
  EXPECT_NEAR(d.d_q, 4.0, 1e-12);
  EXPECT_NEAR(d.sum(), 7.0, 1e-12);
}

TEST(LineDistance, DegenerateSegmentThrows) {
  Line3 L{Vector3d(0, 0, 5), Vector3d(1, 0, 5)};
  Segment2 seg{Vector2d(3, 3), Vector2d(3, 3)};
  EXPECT_THROW(line_distance(Pose::identity(), vga(), L, seg), DegenerateSegmentError);
}

TEST(LineDistance, MatchesHomogeneousLineFormula) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> px(0, 640);
  for (int i = 0; i < 500; ++i) {
    const Pose pose = random_pose(rng);
    Line3 L{point_in_front(pose, rng), point_in_front(pose, rng)};
    Segment2 seg{Vector2d(px(rng), px(rng)), Vector2d(px(rng), px(rng))};
    const auto d = line_distance(pose, vga(), L, seg);
    EXPECT_NEAR(d.d_p, homogeneous_distance(seg.p, seg.q, project(pose, vga(), L.p).pixel), 1e-9);
    EXPECT_NEAR(d.d_q, homogeneous_distance(seg.p, seg.q, project(pose, vga(), L.q).pixel), 1e-9);
  }
}

TEST(LineDistance, InvariantToEndpointSwapAndReparameterization) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> px(0, 640), t(-2, 3);
  for (int i = 0; i < 200; ++i) {
    const Pose pose = random_pose(rng);
    Line3 L{point_in_front(pose, rng), point_in_front(pose, rng)};
    Segment2 seg{Vector2d(px(rng), px(rng)), Vector2d(px(rng), px(rng))};
    const auto d = line_distance(pose, vga(), L, seg);
    const auto swapped = line_distance(pose, vga(), L, Segment2{seg.q, seg.p});
    EXPECT_NEAR(d.d_p, swapped.d_p, 1e-9);
    EXPECT_NEAR(d.d_q, swapped.d_q, 1e-9);
    double a = t(rng), b = t(rng);
    if (std::abs(a - b) < 0.1) b = a + 1;
    const Vector2d dir = seg.q - seg.p;
    const auto moved = line_distance(pose, vga(), L, Segment2{seg.p + a * dir, seg.p + b * dir});
    EXPECT_NEAR(d.d_p, moved.d_p, 1e-8);
    EXPECT_NEAR(d.d_q, moved.d_q, 1e-8);
  }
}

TEST(ValidityMask, DepthAndResidualBounds) {
  const Intrinsics K = vga();
  // Depth 5 cm in front of the camera.
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Vector3d(0, 0, 0.05), Vector2d(320, 240)));
  // Depth 1 m, 10 px residual.
  EXPECT_TRUE(validity_mask(Pose::identity(), K, Vector3d(0, 0, 1), Vector2d(330, 240)));
  // Depth 2 m, 1500 px residual.
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Vector3d(0, 0, 2), Vector2d(320 + 1500, 240)));
  // Behind the camera and beyond 1000 m.
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Vector3d(0, 0, -2), Vector2d(320, 240)));
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Vector3d(0, 0, 1500), Vector2d(320, 240)));
}

TEST(ValidityMask, LinesNeedBothEndpointsValid) {
  const Intrinsics K = vga();
  Segment2 seg{Vector2d(300, 240), Vector2d(340, 240)};
  EXPECT_TRUE(validity_mask(Pose::identity(), K, Line3{Vector3d(-0.1, 0, 2), Vector3d(0.1, 0, 2)}, seg));
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Line3{Vector3d(-0.1, 0, 2), Vector3d(0.0, 0, 0.05)}, seg));
  // Endpoints 1 m off the line at depth 1: psi = 1000 px is not below the bound.
  EXPECT_FALSE(validity_mask(Pose::identity(), K, Line3{Vector3d(-0.1, 1, 1), Vector3d(0.1, 1, 1)}, seg));
}

TEST(ValidityMask, Monotone) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> depth(-1, 1500), off(0, 2000), shrink(0, 1);
  const Intrinsics K = vga();
  for (int i = 0; i < 2000; ++i) {
    const double z = depth(rng);
    const double r = off(rng);
    const Vector3d P(0, 0, z);
    if (!validity_mask(Pose::identity(), K, P, Vector2d(320 + r, 240))) continue;
    // Smaller residual keeps it valid.
    EXPECT_TRUE(validity_mask(Pose::identity(), K, P, Vector2d(320 + r * shrink(rng), 240)));
  }
  for (int i = 0; i < 2000; ++i) {
    const double z = depth(rng);
    const Vector2d u(320 + off(rng) * 0.4, 240);
    const bool v = validity_mask(Pose::identity(), K, Vector3d(0, 0, z), u);
    // Depth moved toward [0.1, 1000] (point stays on the optical axis).
    const double target = std::clamp(z, kMinValidDepth, kMaxValidDepth);
    const double z2 = z + shrink(rng) * (target - z);
    if (v) {
      EXPECT_TRUE(validity_mask(Pose::identity(), K, Vector3d(0, 0, z2), u));
    }
  }
}

TEST(PoseGroup, InverseAndAssociativity) {
  std::mt19937_64 rng(16);
  for (int i = 0; i < 200; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const Pose e = a.inverse() * a;
    EXPECT_LT(rotation_error_deg(e.rotation, Eigen::Quaterniond::Identity()), 1e-6);
    EXPECT_LT(e.translation.norm(), 1e-9);
    EXPECT_NEAR(e.rotation.norm(), 1.0, 1e-9);
    const Pose l = (a * b) * c, r = a * (b * c);
    EXPECT_LT((l.rotation_matrix() - r.rotation_matrix()).norm(), 1e-9);
    EXPECT_LT((l.translation - r.translation).norm(), 1e-9);
    const Vector3d x(1, 2, 3);
    EXPECT_LT(((a * b).transform(x) - a.transform(b.transform(x))).norm(), 1e-9);
  }
}

TEST(RotationError, ThirtyDegreesAboutZ) {
  EXPECT_NEAR(rotation_error_deg(Eigen::Quaterniond(rotation_z(deg_to_rad(30))), Eigen::Quaterniond::Identity()),
              30.0, 1e-9);
}

TEST(AugmentCamera, IdentityAugmentationIsNoOp) {
  std::mt19937_64 rng(17);
  const Pose pose = random_pose(rng);
  auto [p2, k2] = augment_camera(pose, vga(), CameraAugmentation{0, 1});
  EXPECT_EQ(k2, vga());
  EXPECT_LT((p2.translation - pose.translation).norm(), 1e-15);
  EXPECT_LT(rotation_error_deg(p2.rotation, pose.rotation), 1e-9);
}

TEST(AugmentCamera, ScaleIsConsistentWithProjection) {
  std::mt19937_64 rng(18);
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = random_pose(rng);
    const Vector3d P = point_in_front(pose, rng);
    auto [p2, k2] = augment_camera(pose, vga(), CameraAugmentation{0, 1.5});
    EXPECT_EQ(k2.width, 960);
    EXPECT_LT((project(p2, k2, P).pixel - 1.5 * project(pose, vga(), P).pixel).norm(), 1e-6);
  }
}

TEST(AugmentCamera, RotationMatchesImageRotationAboutPrincipalPoint) {
  std::mt19937_64 rng(19);
  const double theta = deg_to_rad(30);
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = random_pose(rng);
    const Vector3d P = point_in_front(pose, rng);
    auto [p2, k2] = augment_camera(pose, vga(), CameraAugmentation{theta, 1});
    const Vector2d d = project(pose, vga(), P).pixel - Vector2d(320, 240);
    const Vector2d expected = Vector2d(320, 240) + Eigen::Rotation2Dd(theta).toRotationMatrix() * d;
    EXPECT_LT((project(p2, k2, P).pixel - expected).norm(), 1e-6);
    EXPECT_LT((augment_pixel(vga(), {theta, 1}, project(pose, vga(), P).pixel) - expected).norm(), 1e-9);
  }
}

TEST(AugmentCamera, CombinedAugmentationMovesObservationsConsistently) {
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> th(-deg_to_rad(30), deg_to_rad(30)), sc(0.66, 1.5);
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = random_pose(rng);
    const Vector3d P = point_in_front(pose, rng);
    const CameraAugmentation aug{th(rng), sc(rng)};
    auto [p2, k2] = augment_camera(pose, vga(), aug);
    EXPECT_LT((project(p2, k2, P).pixel - augment_pixel(vga(), aug, project(pose, vga(), P).pixel)).norm(), 1e-6);
  }
}
