#pragma once

// In-memory scene: cameras plus per-image 2D features, descriptors and the
// SfM-derived 3D labels used for training.

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pl2map/diffcore.hpp"
#include "pl2map/geometry.hpp"

namespace pl2map {

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw SceneError("unknown split '" + s + "'");
}

struct ImageRecord {
  std::string id;
  std::size_t camera = 0;
  Split split = Split::train;
  Pose pose;  // world-to-camera ground truth
  Tensor<double> keypoints{Shape{0, 2}};       // [N, 2] px
  Tensor<float> descriptors{Shape{0, 0}};      // [N, D]
  Tensor<double> point_labels{Shape{0, 4}};    // [N, 4]: xyz + r flag
  Tensor<double> line_endpoints{Shape{0, 4}};  // [M, 4]: p.x p.y q.x q.y px
  Tensor<float> line_tokens{Shape{0, 0, 0}};   // [M, T, D]
  Tensor<double> line_labels{Shape{0, 7}};     // [M, 7]: P xyz, Q xyz + r flag

  std::size_t num_points() const { return keypoints.dim(0); }
  std::size_t num_lines() const { return line_endpoints.dim(0); }

  Eigen::Vector2d keypoint(std::size_t i) const { return {keypoints(i, 0), keypoints(i, 1)}; }
  Segment2 segment(std::size_t i) const {
    return {{line_endpoints(i, 0), line_endpoints(i, 1)}, {line_endpoints(i, 2), line_endpoints(i, 3)}};
  }
  Eigen::Vector3d point_label(std::size_t i) const { return {point_labels(i, 0), point_labels(i, 1), point_labels(i, 2)}; }
  Line3 line_label(std::size_t i) const {
    return {{line_labels(i, 0), line_labels(i, 1), line_labels(i, 2)},
            {line_labels(i, 3), line_labels(i, 4), line_labels(i, 5)}};
  }
  bool point_labeled(std::size_t i) const { return point_labels(i, 3) == 1.0; }
  bool line_labeled(std::size_t i) const { return line_labels(i, 6) == 1.0; }

  friend bool operator==(const ImageRecord& a, const ImageRecord& b) {
    return a.id == b.id && a.camera == b.camera && a.split == b.split &&
           a.pose.rotation.coeffs() == b.pose.rotation.coeffs() && a.pose.translation == b.pose.translation &&
           a.keypoints == b.keypoints && a.descriptors == b.descriptors && a.point_labels == b.point_labels &&
           a.line_endpoints == b.line_endpoints && a.line_tokens == b.line_tokens && a.line_labels == b.line_labels;
  }
};

struct SceneDataset {
  std::size_t descriptor_dim = 256;
  std::size_t line_tokens = 12;
  std::vector<Intrinsics> cameras;
  std::vector<ImageRecord> images;

  const Intrinsics& intrinsics(const ImageRecord& im) const { return cameras.at(im.camera); }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (images[i].split == split) out.push_back(i);
    return out;
  }

  /// Throws SceneError naming the first offending image.
  void validate() const;

  friend bool operator==(const SceneDataset&, const SceneDataset&) = default;
};

namespace detail {

inline bool is_flag(double v) { return v == 0.0 || v == 1.0; }

}  // namespace detail

inline void validate_image(const ImageRecord& im, std::size_t D, std::size_t T, std::size_t n_cameras) {
  auto fail = [&](const std::string& what) { throw SceneError("image '" + im.id + "': " + what); };
  if (im.camera >= n_cameras) fail("camera index " + std::to_string(im.camera) + " out of range");
  if (!im.pose.rotation.coeffs().allFinite() || !im.pose.translation.allFinite()) fail("pose is not finite");
  const std::size_t N = im.keypoints.rank() == 2 ? im.keypoints.dim(0) : 0;
  const std::size_t M = im.line_endpoints.rank() == 2 ? im.line_endpoints.dim(0) : 0;
  auto expect = [&](const Shape& got, const Shape& want, const char* name) {
    if (got != want) fail(std::string(name) + " has shape " + shape_string(got) + ", expected " + shape_string(want));
  };
  expect(im.keypoints.shape(), {N, 2}, "keypoints");
  expect(im.descriptors.shape(), {N, D}, "descriptors");
  expect(im.point_labels.shape(), {N, 4}, "point labels");
  expect(im.line_endpoints.shape(), {M, 4}, "line endpoints");
  if (im.line_tokens.rank() == 3 && im.line_tokens.dim(0) == M && im.line_tokens.dim(1) != T)
    fail("line tokens have " + std::to_string(im.line_tokens.dim(1)) + " tokens per line, expected " +
         std::to_string(T));
  expect(im.line_tokens.shape(), {M, T, D}, "line tokens");
  expect(im.line_labels.shape(), {M, 7}, "line labels");
  if (!im.keypoints.all_finite() || !im.descriptors.all_finite() || !im.point_labels.all_finite() ||
      !im.line_endpoints.all_finite() || !im.line_tokens.all_finite() || !im.line_labels.all_finite())
    fail("non-finite values");
  for (std::size_t i = 0; i < N; ++i)
    if (!detail::is_flag(im.point_labels(i, 3))) fail("point label flag must be 0 or 1");
  for (std::size_t i = 0; i < M; ++i) {
    if (!detail::is_flag(im.line_labels(i, 6))) fail("line label flag must be 0 or 1");
    if ((im.segment(i).q - im.segment(i).p).norm() <= kMinSegmentLengthPx) fail("degenerate 2D line segment");
  }
}

inline void SceneDataset::validate() const {
  if (descriptor_dim == 0) throw SceneError("scene: descriptor dim must be positive");
  if (line_tokens < 2) throw SceneError("scene: need at least 2 tokens per line");
  for (const auto& K : cameras) {
    try {
      K.validate();
    } catch (const std::invalid_argument& e) {
      throw SceneError(std::string("scene camera: ") + e.what());
    }
  }
  for (const auto& im : images) validate_image(im, descriptor_dim, line_tokens, cameras.size());
}

}  // namespace pl2map
