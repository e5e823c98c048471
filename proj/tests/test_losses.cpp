#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "micro_scene.hpp"
#include "pl2map/losses.hpp"
#include "pl2map/model.hpp"

using namespace pl2map;
using pl2map::testing::micro_scene;
using pl2map::testing::randn;

namespace {

constexpr double kLossGradTol = 1e-4;

// Image with one point and no lines, identity pose, observed at the principal
// point.
ImageRecord one_point_image(double flag) {
  ImageRecord im;
  im.id = "one";
  im.keypoints = Tensor<double>({1, 2}, {320, 240});
  im.descriptors = Tensor<float>({1, 4});
  im.point_labels = Tensor<double>({1, 4}, {0, 0, 5, flag});
  im.line_tokens = Tensor<float>({0, 2, 4});
  return im;
}

struct Heads {
  Graph<double> g;
  Var<double> points, lines;
  Heads(Tensor<double> p, Tensor<double> l) : points(g.param(std::move(p))), lines(g.param(std::move(l))) {}
};

// Predictions equal to the labels, with logit 0 (r_hat = 1).
Heads perfect_heads(const ImageRecord& im) {
  Tensor<double> p(Shape{im.num_points(), 4}), l(Shape{im.num_lines(), 7});
  for (std::size_t i = 0; i < im.num_points(); ++i)
    for (std::size_t c = 0; c < 3; ++c) p(i, c) = im.point_labels(i, c);
  for (std::size_t i = 0; i < im.num_lines(); ++i)
    for (std::size_t c = 0; c < 6; ++c) l(i, c) = im.line_labels(i, c);
  return Heads(p, l);
}

// Rows of labels perturbed by Gaussian noise, logits random.
Heads noisy_heads(const ImageRecord& im, std::uint64_t seed, double sigma) {
  Heads h = perfect_heads(im);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma), z(0.0, 0.02);
  Tensor<double> p = h.points.value(), l = h.lines.value();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) p(i, c) += n(rng);
    p(i, 3) = z(rng);
  }
  for (std::size_t i = 0; i < l.rows(); ++i) {
    for (std::size_t c = 0; c < 6; ++c) l(i, c) += n(rng);
    l(i, 6) = z(rng);
  }
  return Heads(p, l);
}

}  // namespace

TEST(Huber, Branches) {
  EXPECT_DOUBLE_EQ(huber(0.5), 0.125);
  EXPECT_DOUBLE_EQ(huber(3.0), 2.5);
  EXPECT_DOUBLE_EQ(huber(-3.0), 2.5);
  EXPECT_DOUBLE_EQ(huber(1.0), 0.5);
  EXPECT_DOUBLE_EQ(huber_derivative(0.3), 0.3);
  EXPECT_DOUBLE_EQ(huber_derivative(-7.0), -1.0);
}

TEST(MapLoss, PerfectPredictionsGiveZero) {
  const auto s = micro_scene(5, 3, 8, 4, 1);
  Heads h = perfect_heads(s.images[0]);
  EXPECT_EQ(map_loss(h.points, h.lines, s.images[0]).value().item(), 0.0);
}

TEST(MapLoss, UnlabeledFeaturesAreIgnored) {
  auto s = micro_scene(5, 3, 8, 4, 2);
  auto& im = s.images[0];
  for (std::size_t i = 0; i < 5; ++i) im.point_labels(i, 3) = 0;
  for (std::size_t i = 0; i < 3; ++i) im.line_labels(i, 6) = 0;
  Heads h = noisy_heads(im, 3, 10.0);
  EXPECT_EQ(map_loss(h.points, h.lines, im).value().item(), 0.0);
}

TEST(MapLoss, SinglePointQuadraticBranch) {
  const auto im = one_point_image(1);
  Heads h(Tensor<double>({1, 4}, {0.5, 0, 5, 0}), Tensor<double>({0, 7}));
  EXPECT_DOUBLE_EQ(map_loss(h.points, h.lines, im).value().item(), 0.125);
}

TEST(MapLoss, LineUsesNormOfSixVector) {
  auto s = micro_scene(0, 1, 4, 2, 4);
  Heads h = perfect_heads(s.images[0]);
  Tensor<double> l = h.lines.value();
  l(0, 0) += 3.0;
  l(0, 4) += 4.0;  // |e| = 5 -> 5 - 0.5
  Heads h2(h.points.value(), l);
  EXPECT_DOUBLE_EQ(map_loss(h2.points, h2.lines, s.images[0]).value().item(), 4.5);
}

TEST(MapLoss, CountMismatchThrows) {
  const auto s = micro_scene(3, 2, 4, 2, 5);
  Heads h(Tensor<double>({2, 4}), Tensor<double>({2, 7}));
  EXPECT_THROW(map_loss(h.points, h.lines, s.images[0]), DimensionError);
}

TEST(ReliabilityLoss, Examples) {
  auto im = one_point_image(1);
  Heads zero(Tensor<double>({1, 4}, {0, 0, 5, 0}), Tensor<double>({0, 7}));
  EXPECT_EQ(reliability_loss(zero.points, zero.lines, im, 100).value().item(), 0.0);
  Heads half(Tensor<double>({1, 4}, {0, 0, 5, 0.01}), Tensor<double>({0, 7}));
  EXPECT_DOUBLE_EQ(reliability_loss(half.points, half.lines, im, 100).value().item(), 0.125);
  im.point_labels(0, 3) = 0;
  double previous = 1.0;
  for (double z : {1.0, 1e2, 1e4, 1e6}) {
    Heads far(Tensor<double>({1, 4}, {0, 0, 5, z}), Tensor<double>({0, 7}));
    const double v = reliability_loss(far.points, far.lines, im, 100).value().item();
    EXPECT_LT(v, previous);
    previous = v;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(ReprojectionLoss, InvalidPredictionsAreMasked) {
  const auto s = micro_scene(5, 3, 8, 4, 6);
  const auto& im = s.images[0];
  // Every prediction at the camera center: depth 0, so v = 0 everywhere.
  const Eigen::Vector3d c = im.pose.center();
  Tensor<double> p(Shape{5, 4}), l(Shape{3, 7});
  for (std::size_t i = 0; i < 5; ++i)
    for (int k = 0; k < 3; ++k) p(i, k) = c[k];
  for (std::size_t i = 0; i < 3; ++i)
    for (int k = 0; k < 6; ++k) l(i, k) = c[k % 3];
  Heads h(p, l);
  const auto L = reprojection_loss(h.points, h.lines, im, s.cameras[0]);
  EXPECT_EQ(L.value().item(), 0.0);
  h.g.backward(L);
  const auto gp = h.g.gradient(h.points);
  for (double v : gp.values()) EXPECT_EQ(v, 0.0);
}

TEST(ReprojectionLoss, ThreePixelResidualHitsLinearBranch) {
  const auto im = one_point_image(1);
  // x = 0.03 at depth 5 projects 500 * 0.03 / 5 = 3 px right of the keypoint.
  Heads h(Tensor<double>({1, 4}, {0.03, 0, 5, 0}), Tensor<double>({0, 7}));
  EXPECT_NEAR(reprojection_loss(h.points, h.lines, im, Intrinsics{}).value().item(), 2.5, 1e-12);
}

TEST(ReprojectionLoss, LineTermSumsHuberOfEndpointDistances) {
  ImageRecord im;
  im.id = "line";
  im.descriptors = Tensor<float>({0, 4});
  im.line_endpoints = Tensor<double>({1, 4}, {0, 240, 640, 240});  // horizontal through cy
  im.line_tokens = Tensor<float>({1, 2, 4});
  im.line_labels = Tensor<double>({1, 7}, {0, 0, 5, 1, 0, 5, 1});
  // Endpoints 0.5 px and 3 px below the line: y = 0.005 and 0.03 at depth 5.
  Heads h(Tensor<double>({0, 4}), Tensor<double>({1, 7}, {-1, 0.005, 5, 1, 0.03, 5, 0}));
  EXPECT_NEAR(reprojection_loss(h.points, h.lines, im, Intrinsics{}).value().item(), 0.125 + 2.5, 1e-12);
}

TEST(Tau, ClosedForms) {
  const TauSchedule indoor;
  EXPECT_NEAR(tau(1e-12, indoor), 51.0, 1e-9);
  EXPECT_NEAR(tau(0.6, indoor), 41.0, 1e-9);
  EXPECT_NEAR(tau(std::nextafter(1.0, 0.0), indoor), 1.0, 1e-6);
  EXPECT_THROW(tau(0.0, indoor), std::out_of_range);
  EXPECT_THROW(tau(1.0, indoor), std::out_of_range);
  EXPECT_THROW(tau(-0.1, indoor), std::out_of_range);
}

TEST(Tau, StrictlyDecreasing) {
  const TauSchedule s{100, 1};
  double prev = tau(1e-6, s);
  for (int i = 1; i < 1000; ++i) {
    const double v = tau(i / 1000.0, s);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(RobustWrap, ValuesAndSlope) {
  Graph<double> g;
  auto zero = g.param(Tensor<double>::scalar(0.0));
  auto w = robust_wrap(zero, 51.0);
  EXPECT_EQ(w.value().item(), 0.0);
  g.backward(w);
  EXPECT_NEAR(g.gradient(zero).item(), 1.0, 1e-9);
  Graph<double> g2;
  EXPECT_NEAR(robust_wrap(g2.constant(Tensor<double>::scalar(1e4)), 10.0).value().item(), 10.0, 1e-9);
}

TEST(RobustWrap, BoundedAndMonotone) {
  for (double t : {0.5, 1.0, 51.0}) {
    double prev = -1;
    for (double x = 0; x < 500; x += 0.37) {
      Graph<double> g;
      const double v = robust_wrap(g.constant(Tensor<double>::scalar(x)), t).value().item();
      EXPECT_LE(v, std::min(x, t) + 1e-12);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(TotalLoss, PerfectPredictionsGiveZero) {
  auto s = micro_scene(5, 3, 8, 4, 7);
  for (std::size_t i = 0; i < 5; ++i) s.images[0].point_labels(i, 3) = 1;
  for (std::size_t i = 0; i < 3; ++i) s.images[0].line_labels(i, 6) = 1;
  Heads h = perfect_heads(s.images[0]);
  const auto t = total_loss(h.points, h.lines, s.images[0], s.cameras[0], LossWeights{}, 41.0, 100);
  EXPECT_NEAR(t.total.value().item(), 0.0, 1e-18);
}

TEST(TotalLoss, WeightsSelectComponents) {
  const auto s = micro_scene(5, 3, 8, 4, 8);
  Heads h = noisy_heads(s.images[0], 9, 0.05);
  const auto t = total_loss(h.points, h.lines, s.images[0], s.cameras[0], LossWeights{1, 0, 0}, 41.0, 100);
  EXPECT_EQ(t.total.value().item(), t.map.value().item());
  const auto u = total_loss(h.points, h.lines, s.images[0], s.cameras[0], LossWeights{2, 3, 4}, 41.0, 100);
  EXPECT_NEAR(u.total.value().item(),
              2 * u.map.value().item() + 3 * u.reliability.value().item() +
                  4 * 41.0 * std::tanh(u.reprojection.value().item() / 41.0),
              1e-9);
}

TEST(TotalLoss, NonNegativeOnRandomPredictions) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = micro_scene(6, 3, 8, 4, 100 + seed);
    Heads h = noisy_heads(s.images[0], seed, 0.5);
    const auto t = total_loss(h.points, h.lines, s.images[0], s.cameras[0], LossWeights{}, 20.0, 100);
    EXPECT_GE(t.total.value().item(), 0.0);
    EXPECT_GT(t.total.value().item(), 0.0);
  }
}

TEST(TotalLoss, UnlabeledFeaturesGetNoCoordinateGradient) {
  const auto s = micro_scene(4, 2, 8, 4, 10);
  Heads h = noisy_heads(s.images[0], 11, 0.2);
  const auto t = total_loss(h.points, h.lines, s.images[0], s.cameras[0], LossWeights{}, 41.0, 100);
  h.g.backward(t.total);
  const auto gp = h.g.gradient(h.points);
  const auto gl = h.g.gradient(h.lines);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(gp(1, c), 0.0);
  for (int c = 0; c < 6; ++c) EXPECT_EQ(gl(1, c), 0.0);
  EXPECT_NE(gp(1, 3), 0.0);
  EXPECT_NE(gl(1, 6), 0.0);
  EXPECT_NE(gp(0, 0), 0.0);
}

TEST(LossPrimitives, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  const auto target = randn<double>({5, 3}, rng);
  const std::vector<double> w{1, 0, 2, 1, 0.5};
  auto rows = [&](Graph<double>&, std::span<const Var<double>> p) { return huber_row_norm(p[0], target, w); };
  auto x = randn<double>({5, 3}, rng, 1.5);
  EXPECT_LE(grad_check(rows, {x}).max_rel_error, 1e-6);

  const auto z = randn<double>({6}, rng, 0.02);
  auto rel = [&](Graph<double>&, std::span<const Var<double>> p) {
    return weighted_sum(reliability(p[0], 100.0), Tensor<double>({6}, {1, -2, 3, 0.5, 1, 1}));
  };
  EXPECT_LE(grad_check(rel, {z}).max_rel_error, 1e-6);

  const Pose pose(Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Eigen::Vector3d(1, 2, 3).normalized())),
                  Eigen::Vector3d(0.2, -0.1, 6));
  const auto probe = randn<double>({4, 2}, rng);
  auto proj = [&](Graph<double>&, std::span<const Var<double>> p) {
    return weighted_sum(project_points(p[0], pose, Intrinsics{}, {true, true, false, true}), probe);
  };
  EXPECT_LE(grad_check(proj, {randn<double>({4, 3}, rng)}).max_rel_error, 1e-6);

  const std::vector<Segment2> segs{{{0, 0}, {3, 4}}, {{10, 5}, {-2, 7}}};
  auto dist = [&](Graph<double>&, std::span<const Var<double>> p) {
    return weighted_sum(signed_line_distances(p[0], segs), Tensor<double>({2}, {1.5, -0.7}));
  };
  EXPECT_LE(grad_check(dist, {randn<double>({2, 2}, rng, 10)}).max_rel_error, 1e-6);
}

TEST(SignedLineDistances, MatchesGeometry) {
  Graph<double> g;
  const Segment2 seg{{1, 2}, {7, -3}};
  const Eigen::Vector2d x(4, 9);
  const auto d = signed_line_distances(g.constant(Tensor<double>({1, 2}, {4, 9})), {seg});
  EXPECT_NEAR(d.value()[0], signed_line_distance(seg, x), 1e-12);
}

TEST(TotalLoss, GradientOnMicroSceneMatchesFiniteDifferences) {
  const auto s = micro_scene(4, 2, 16, 4, 13);
  const Heads h = noisy_heads(s.images[0], 14, 0.05);
  auto f = [&](Graph<double>&, std::span<const Var<double>> p) {
    return total_loss(p[0], p[1], s.images[0], s.cameras[0], LossWeights{}, 41.0, 100).total;
  };
  const auto r = grad_check(f, {h.points.value(), h.lines.value()});
  EXPECT_LE(r.max_rel_error, kLossGradTol);
  EXPECT_EQ(r.flagged, 0u);
}

TEST(TotalLoss, EndToEndGradientThroughModel) {
  const auto s = micro_scene(4, 2, 16, 4, 15);
  const auto& im = s.images[0];
  ModelConfig cfg;
  cfg.descriptor_dim = 16;
  cfg.heads = 4;
  cfg.line_tokens = 4;
  cfg.point_head = {12};
  cfg.line_head = {12};
  const auto params = init_params<double>(cfg, 16);
  const auto desc = im.descriptors.cast<double>();
  const auto toks = im.line_tokens.cast<double>();
  auto f = [&](Graph<double>& g, std::span<const Var<double>> p) {
    BoundModel<double> m{cfg, ModelLayout(cfg), {p.begin(), p.end()}, &g};
    const auto out = forward(m, g.constant(desc), g.constant(toks));
    // Untrained outputs reproject ~100 px off. A wide tau keeps the wrap
    // unsaturated and the small weight keeps |f| near 10, where central
    // differences resolve gradients well below the 1e-3 comparison floor.
    return total_loss(out.points, out.lines, im, s.cameras[0], LossWeights{1, 1, 0.01}, 2000.0, 100).total;
  };
  const auto r = grad_check(f, params.tensors);
  EXPECT_LE(r.max_rel_error, kLossGradTol) << "param " << r.worst.param << " index " << r.worst.index
                                        << " analytic " << r.worst.analytic << " numeric " << r.worst.numeric;
}
