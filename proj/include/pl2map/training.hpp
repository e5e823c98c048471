#pragma once

// Optimization: Adam, step-decay learning rate, per-image iterations with
// camera and descriptor augmentation, and pose-accuracy metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pl2map/diffcore.hpp"
#include "pl2map/geometry.hpp"
#include "pl2map/losses.hpp"
#include "pl2map/model.hpp"
#include "pl2map/scene.hpp"

namespace pl2map {

struct TrainConfig {
  std::size_t iterations = 20000;
  double learning_rate = 3e-4;  // 5e-5 for outdoor scenes
  double decay = 0.5;
  std::size_t milestones = 7;  // 10 for outdoor scenes
  bool augment = true;
  double max_rotation_deg = 30;
  double min_scale = 0.66, max_scale = 1.5;
  double descriptor_noise = 0.01;
  TauSchedule tau;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::size_t log_every = 500;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("train config: learning rate must be positive");
    if (!(decay > 0 && decay < 1)) throw std::invalid_argument("train config: decay must be in (0, 1)");
    if (!(min_scale > 0 && min_scale <= max_scale)) throw std::invalid_argument("train config: bad scale range");
    if (!(max_rotation_deg >= 0)) throw std::invalid_argument("train config: bad rotation range");
    if (!(descriptor_noise >= 0)) throw std::invalid_argument("train config: descriptor noise must be >= 0");
    tau.validate();
    weights.validate();
  }
};

/// start * decay^k with k the number of milestones i * total / (n + 1) that
/// iter has reached.
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.iterations)
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(cfg.iterations) + ")");
  std::size_t passed = 0;
  for (std::size_t i = 1; i <= cfg.milestones; ++i)
    if (iter * (cfg.milestones + 1) >= i * cfg.iterations) ++passed;
  return cfg.learning_rate * std::pow(cfg.decay, double(passed));
}

/// Training progress in (0, 1) for the tau schedule: the midpoint of the
/// iteration's slice of the run.
inline double progress(std::size_t iter, std::size_t total) { return (double(iter) + 0.5) / double(total); }

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

template <typename S>
struct AdamState {
  std::vector<Tensor<S>> m, v;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;  // steps dropped for non-finite gradients

  explicit AdamState(const std::vector<Tensor<S>>& params) {
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }
};

/// One bias-corrected Adam update. Returns false (and leaves everything but the
/// skip counter untouched) when any gradient entry is non-finite.
template <typename S>
bool adam_step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads, AdamState<S>& state, double lr,
               const AdamOptions& opt = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw DimensionError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape())
      throw DimensionError("adam_step: shape mismatch for tensor " + std::to_string(i));
    if (!grads[i].all_finite()) {
      ++state.skipped;
      return false;
    }
  }
  ++state.step;
  const double c1 = 1 - std::pow(opt.beta1, double(state.step));
  const double c2 = 1 - std::pow(opt.beta2, double(state.step));
  const S b1 = S(opt.beta1), b2 = S(opt.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    S* p = params[i].data();
    S* m = state.m[i].data();
    S* v = state.v[i].data();
    const S* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      m[k] = b1 * m[k] + (S(1) - b1) * g[k];
      v[k] = b2 * v[k] + (S(1) - b2) * g[k] * g[k];
      const double mhat = double(m[k]) / c1, vhat = double(v[k]) / c2;
      p[k] -= S(lr * mhat / (std::sqrt(vhat) + opt.epsilon));
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentedView {
  ImageRecord image;
  Intrinsics intrinsics;
};

/// The image as seen by an augmented camera: pose and intrinsics via
/// augment_camera, keypoints and segment endpoints moved consistently, and
/// Gaussian noise added to descriptors and line tokens. 3D labels are untouched.
inline AugmentedView augment_view(const ImageRecord& im, const Intrinsics& K, const CameraAugmentation& aug,
                                  double descriptor_noise, std::mt19937_64& rng) {
  AugmentedView out{im, K};
  std::tie(out.image.pose, out.intrinsics) = augment_camera(im.pose, K, aug);
  for (std::size_t i = 0; i < im.num_points(); ++i) {
    const Eigen::Vector2d px = augment_pixel(K, aug, im.keypoint(i));
    out.image.keypoints(i, 0) = px.x();
    out.image.keypoints(i, 1) = px.y();
  }
  for (std::size_t i = 0; i < im.num_lines(); ++i) {
    const Segment2 s = im.segment(i);
    const Eigen::Vector2d p = augment_pixel(K, aug, s.p), q = augment_pixel(K, aug, s.q);
    out.image.line_endpoints(i, 0) = p.x();
    out.image.line_endpoints(i, 1) = p.y();
    out.image.line_endpoints(i, 2) = q.x();
    out.image.line_endpoints(i, 3) = q.y();
  }
  if (descriptor_noise > 0) {
    std::normal_distribution<double> n(0.0, descriptor_noise);
    for (auto& v : out.image.descriptors.values()) v += float(n(rng));
    for (auto& v : out.image.line_tokens.values()) v += float(n(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct StepStats {
  std::size_t iteration = 0;
  std::size_t image = 0;
  bool skipped = false;  // empty image or non-finite gradient
  double lr = 0, tau = 0;
  double total = 0, map = 0, reliability = 0, reprojection = 0;
};

/// Runs iterations over the training split of a scene. Images are drawn
/// uniformly with replacement, one per iteration.
class Trainer {
 public:
  Trainer(const SceneDataset& scene, ModelParams<float> params, TrainConfig cfg, std::size_t start_iteration = 0)
      : scene_(scene), params_(std::move(params)), cfg_(std::move(cfg)), adam_(params_.tensors),
        rng_(cfg_.seed), iteration_(start_iteration), train_(scene.indices(Split::train)) {
    cfg_.validate();
    params_.config.validate();
    if (train_.empty()) throw std::invalid_argument("trainer: scene has no training images");
    if (scene.descriptor_dim != params_.config.descriptor_dim || scene.line_tokens != params_.config.line_tokens)
      throw std::invalid_argument("trainer: scene D/T do not match the model config");
  }

  StepStats step() {
    if (iteration_ >= cfg_.iterations) throw std::logic_error("trainer: all iterations done");
    StepStats st;
    st.iteration = iteration_;
    st.lr = lr_at(iteration_, cfg_);
    st.tau = tau(progress(iteration_, cfg_.iterations), cfg_.tau);
    st.image = train_[std::uniform_int_distribution<std::size_t>(0, train_.size() - 1)(rng_)];
    const ImageRecord& src = scene_.images[st.image];
    ++iteration_;
    if (src.num_points() == 0 && src.num_lines() == 0) {
      st.skipped = true;
      return st;
    }

    CameraAugmentation aug;
    if (cfg_.augment) {
      const double r = deg_to_rad(cfg_.max_rotation_deg);
      aug.rotation = std::uniform_real_distribution<double>(-r, r)(rng_);
      aug.scale = std::uniform_real_distribution<double>(cfg_.min_scale, cfg_.max_scale)(rng_);
    }
    const AugmentedView view = cfg_.augment ? augment_view(src, scene_.intrinsics(src), aug, cfg_.descriptor_noise, rng_)
                                            : AugmentedView{src, scene_.intrinsics(src)};

    Graph<float> g;
    const BoundModel<float> m = bind(g, params_, true);
    const auto out = forward(m, g.constant(view.image.descriptors), g.constant(view.image.line_tokens));
    const auto terms = total_loss(out.points, out.lines, view.image, view.intrinsics, cfg_.weights, st.tau,
                                  params_.config.beta);
    st.total = terms.total.value().item();
    st.map = terms.map.value().item();
    st.reliability = terms.reliability.value().item();
    st.reprojection = terms.reprojection.value().item();
    g.backward(terms.total);
    std::vector<Tensor<float>> grads;
    grads.reserve(m.vars.size());
    for (const auto& v : m.vars) grads.push_back(g.gradient(v));
    st.skipped = !adam_step(params_.tensors, grads, adam_, st.lr);
    return st;
  }

  bool done() const { return iteration_ >= cfg_.iterations; }
  std::size_t iteration() const { return iteration_; }
  const ModelParams<float>& params() const { return params_; }
  const AdamState<float>& optimizer() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  const SceneDataset& scene_;
  ModelParams<float> params_;
  TrainConfig cfg_;
  AdamState<float> adam_;
  std::mt19937_64 rng_;
  std::size_t iteration_;
  std::vector<std::size_t> train_;
};

/// Averages step statistics over a logging window and renders key=value lines.
class TrainLog {
 public:
  void add(const StepStats& s) {
    last_ = s;
    if (s.skipped) {
      ++skipped_;
      return;
    }
    ++count_;
    total_ += s.total;
    map_ += s.map;
    rel_ += s.reliability;
    reproj_ += s.reprojection;
  }

  /// Renders the window and resets it.
  std::string flush() {
    const double n = count_ > 0 ? double(count_) : 1.0;
    char buf[256];
    std::snprintf(buf, sizeof buf, "iter=%zu lr=%.6g tau=%.4f loss=%.6g map=%.6g reliability=%.6g reprojection=%.6g skipped=%zu",
                  last_.iteration + 1, last_.lr, last_.tau, total_ / n, map_ / n, rel_ / n, reproj_ / n, skipped_);
    *this = TrainLog{};
    return buf;
  }

 private:
  StepStats last_;
  std::size_t count_ = 0, skipped_ = 0;
  double total_ = 0, map_ = 0, rel_ = 0, reproj_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline constexpr double kAccuracyTranslationCm = 5.0;
inline constexpr double kAccuracyRotationDeg = 5.0;

struct PoseErrors {
  double translation_cm = 0;
  double rotation_deg = 0;
};

/// Distance between camera centers (scene units are meters) and angle of
/// R_est * R_gt^T.
inline PoseErrors pose_errors(const Pose& est, const Pose& gt) {
  return {100.0 * (est.center() - gt.center()).norm(), rotation_error_deg(est.rotation, gt.rotation)};
}

struct EvalMetrics {
  double median_translation_cm = 0;
  double median_rotation_deg = 0;
  double accuracy = 0;  // percent within 5 cm and 5 deg
  std::size_t count = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Failed localizations enter as infinite errors: they count against the
/// accuracy and push the medians up.
inline EvalMetrics eval_metrics(const std::vector<PoseErrors>& errors) {
  if (errors.empty()) throw std::invalid_argument("eval_metrics: no poses");
  std::vector<double> te, re;
  std::size_t good = 0;
  for (const auto& e : errors) {
    te.push_back(e.translation_cm);
    re.push_back(e.rotation_deg);
    if (e.translation_cm <= kAccuracyTranslationCm && e.rotation_deg <= kAccuracyRotationDeg) ++good;
  }
  return {median(te), median(re), 100.0 * double(good) / double(errors.size()), errors.size()};
}

inline EvalMetrics eval_metrics(const std::vector<Pose>& est, const std::vector<Pose>& gt) {
  if (est.size() != gt.size())
    throw std::invalid_argument("eval_metrics: " + std::to_string(est.size()) + " estimates for " +
                                std::to_string(gt.size()) + " ground-truth poses");
  std::vector<PoseErrors> errors;
  for (std::size_t i = 0; i < est.size(); ++i) errors.push_back(pose_errors(est[i], gt[i]));
  return eval_metrics(errors);
}

/// "median cm / median deg / accuracy %", e.g. "1.9 / 0.63 / 96.0".
inline std::string format_eval_row(const EvalMetrics& m) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.1f / %.2f / %.1f", m.median_translation_cm, m.median_rotation_deg, m.accuracy);
  return buf;
}

}  // namespace pl2map
