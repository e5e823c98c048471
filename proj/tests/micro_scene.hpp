#pragma once

// One-image scenes small enough for finite-difference checks and overfitting.

#include <random>

#include "pl2map/geometry.hpp"
#include "pl2map/scene.hpp"

namespace pl2map::testing {

template <typename S>
inline Tensor<S> randn(Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> n(0.0, sigma);
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = S(n(rng));
  return t;
}

/// Landmarks in [-1, 1]^3 viewed from about 5 m; observations are exact
/// projections. Point 1 and line 1 (when present) carry r = 0.
inline SceneDataset micro_scene(std::size_t N, std::size_t M, std::size_t D, std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SceneDataset s;
  s.descriptor_dim = D;
  s.line_tokens = T;
  s.cameras.push_back(Intrinsics{});
  const Intrinsics& K = s.cameras[0];

  ImageRecord im;
  im.id = "micro";
  const Eigen::Vector3d axis = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized();
  im.pose = Pose(Eigen::Quaterniond(Eigen::AngleAxisd(0.2 * u(rng), axis)), Eigen::Vector3d(0.1 * u(rng), 0.1 * u(rng), 5.0));
  im.keypoints = Tensor<double>(Shape{N, 2});
  im.point_labels = Tensor<double>(Shape{N, 4});
  for (std::size_t i = 0; i < N; ++i) {
    const Eigen::Vector3d X(u(rng), u(rng), u(rng));
    const Eigen::Vector2d px = project(im.pose, K, X).pixel;
    im.keypoints(i, 0) = px.x();
    im.keypoints(i, 1) = px.y();
    for (int c = 0; c < 3; ++c) im.point_labels(i, c) = X[c];
    im.point_labels(i, 3) = i == 1 ? 0.0 : 1.0;
  }
  im.line_endpoints = Tensor<double>(Shape{M, 4});
  im.line_labels = Tensor<double>(Shape{M, 7});
  for (std::size_t i = 0; i < M; ++i) {
    const Eigen::Vector3d P(u(rng), u(rng), u(rng)), Q(u(rng), u(rng), u(rng));
    const Eigen::Vector2d p = project(im.pose, K, P).pixel, q = project(im.pose, K, Q).pixel;
    im.line_endpoints(i, 0) = p.x();
    im.line_endpoints(i, 1) = p.y();
    im.line_endpoints(i, 2) = q.x();
    im.line_endpoints(i, 3) = q.y();
    for (int c = 0; c < 3; ++c) {
      im.line_labels(i, c) = P[c];
      im.line_labels(i, 3 + c) = Q[c];
    }
    im.line_labels(i, 6) = i == 1 ? 0.0 : 1.0;
  }
  im.descriptors = randn<float>({N, D}, rng);
  im.line_tokens = randn<float>({M, T, D}, rng);
  s.images.push_back(std::move(im));
  s.validate();
  return s;
}

}  // namespace pl2map::testing
