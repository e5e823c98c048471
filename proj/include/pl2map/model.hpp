#pragma once

// The point/line mapping network: a transformer block that turns the T tokens
// sampled along each 2D line into one line descriptor, a stack of self/cross
// attention layers over the point and line sets, and two MLP heads regressing
// 3D points (xyz + reliability logit) and 3D lines (two endpoints + logit).

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "pl2map/diffcore.hpp"
#include "pl2map/geometry.hpp"

namespace pl2map {

enum class AttentionKind { self, cross };

inline const char* to_string(AttentionKind k) { return k == AttentionKind::self ? "self" : "cross"; }

inline AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "self") return AttentionKind::self;
  if (s == "cross") return AttentionKind::cross;
  throw std::invalid_argument("unknown attention kind '" + s + "'");
}

struct ModelConfig {
  std::size_t descriptor_dim = 256;
  std::size_t heads = 4;
  std::size_t line_tokens = 12;
  std::vector<AttentionKind> layers{AttentionKind::self, AttentionKind::cross, AttentionKind::self,
                                    AttentionKind::cross, AttentionKind::self};
  // Hidden widths of the two regression heads; input is D, outputs are 4 and 7.
  std::vector<std::size_t> point_head{512, 1024, 512};
  std::vector<std::size_t> line_head{512, 1024, 512};
  // Hidden width of the line encoder's MLP sub-layer, as a multiple of D.
  std::size_t encoder_expansion = 2;
  double beta = 100.0;

  void validate() const {
    if (descriptor_dim == 0 || heads == 0 || descriptor_dim % heads != 0)
      throw std::invalid_argument("model config: descriptor dim must be a positive multiple of heads");
    if (line_tokens < 2) throw std::invalid_argument("model config: need at least 2 line tokens");
    if (layers.empty()) throw std::invalid_argument("model config: layer pattern is empty");
    if (encoder_expansion == 0) throw std::invalid_argument("model config: encoder expansion must be positive");
    if (!(beta > 0)) throw std::invalid_argument("model config: beta must be positive");
  }

  std::size_t head_dim() const { return descriptor_dim / heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// r = 1 / (1 + |beta z|), always in (0, 1].
template <typename S>
inline S reliability_from_logit(S z, double beta) {
  return S(1) / (S(1) + std::abs(S(beta) * z));
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

enum class ParamInit { xavier, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::zeros;
};

struct LinearSlot {
  std::size_t weight = 0, bias = 0;
};

struct AttentionSlot {
  LinearSlot query, key, value, output;
};

struct NormSlot {
  std::size_t gain = 0, bias = 0;
};

struct GraphLayerSlot {
  AttentionKind kind = AttentionKind::self;
  AttentionSlot attention;
  std::vector<LinearSlot> update;  // [2D -> 2D -> D]
};

/// Where every parameter tensor lives in the flat parameter list. Entirely
/// determined by the config.
struct ModelLayout {
  AttentionSlot encoder_attention;
  NormSlot encoder_norm1;
  std::vector<LinearSlot> encoder_mlp;
  NormSlot encoder_norm2;
  std::vector<GraphLayerSlot> graph_layers;
  std::vector<LinearSlot> point_head;
  std::vector<LinearSlot> line_head;
  std::vector<ParamSpec> specs;

  explicit ModelLayout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t D = cfg.descriptor_dim;
    encoder_attention = attention("encoder.attn", D);
    encoder_norm1 = norm("encoder.norm1", D);
    encoder_mlp = mlp("encoder.mlp", {D, cfg.encoder_expansion * D, D});
    encoder_norm2 = norm("encoder.norm2", D);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
      const std::string prefix = "graph." + std::to_string(i);
      GraphLayerSlot layer;
      layer.kind = cfg.layers[i];
      layer.attention = attention(prefix + ".attn", D);
      layer.update = mlp(prefix + ".update", {2 * D, 2 * D, D});
      graph_layers.push_back(std::move(layer));
    }
    std::vector<std::size_t> pw{D}, lw{D};
    pw.insert(pw.end(), cfg.point_head.begin(), cfg.point_head.end());
    lw.insert(lw.end(), cfg.line_head.begin(), cfg.line_head.end());
    pw.push_back(4);
    lw.push_back(7);
    point_head = mlp("point_head", pw);
    line_head = mlp("line_head", lw);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : specs) n += shape_size(s.shape);
    return n;
  }

 private:
  std::size_t add(std::string name, Shape shape, ParamInit init) {
    specs.push_back(ParamSpec{std::move(name), std::move(shape), init});
    return specs.size() - 1;
  }
  LinearSlot linear(const std::string& name, std::size_t in, std::size_t out) {
    LinearSlot s;
    s.weight = add(name + ".weight", {in, out}, ParamInit::xavier);
    s.bias = add(name + ".bias", {out}, ParamInit::zeros);
    return s;
  }
  AttentionSlot attention(const std::string& name, std::size_t D) {
    return {linear(name + ".query", D, D), linear(name + ".key", D, D), linear(name + ".value", D, D),
            linear(name + ".output", D, D)};
  }
  NormSlot norm(const std::string& name, std::size_t D) {
    NormSlot s;
    s.gain = add(name + ".gain", {D}, ParamInit::ones);
    s.bias = add(name + ".bias", {D}, ParamInit::zeros);
    return s;
  }
  std::vector<LinearSlot> mlp(const std::string& name, const std::vector<std::size_t>& widths) {
    std::vector<LinearSlot> out;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      out.push_back(linear(name + "." + std::to_string(i), widths[i], widths[i + 1]));
    return out;
  }
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor<S>> tensors;

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<T>());
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.config == b.config && a.tensors == b.tensors;
  }
};

/// Xavier-uniform weights, zero biases, unit layer-norm gains. Deterministic in
/// the seed.
template <typename S = float>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  const ModelLayout layout(config);
  ModelParams<S> params{config, {}};
  std::mt19937_64 rng(seed);
  for (const auto& spec : layout.specs) {
    Tensor<S> t(spec.shape);
    switch (spec.init) {
      case ParamInit::zeros: break;
      case ParamInit::ones: t.fill(S(1)); break;
      case ParamInit::xavier: {
        const double limit = std::sqrt(6.0 / double(spec.shape[0] + spec.shape[1]));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (auto& v : t.values()) v = S(u(rng));
        break;
      }
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward pass on a Graph
// ---------------------------------------------------------------------------

/// Model parameters placed on a graph, either as trainable leaves or constants.
template <typename S>
struct BoundModel {
  ModelConfig config;
  ModelLayout layout;
  std::vector<Var<S>> vars;
  Graph<S>* graph = nullptr;

  Dense<S> dense(const LinearSlot& s) const { return {vars[s.weight], vars[s.bias]}; }
  std::vector<Dense<S>> dense(const std::vector<LinearSlot>& slots) const {
    std::vector<Dense<S>> out;
    for (const auto& s : slots) out.push_back(dense(s));
    return out;
  }
};

template <typename S>
BoundModel<S> bind(Graph<S>& g, const ModelParams<S>& params, bool trainable) {
  BoundModel<S> m{params.config, ModelLayout(params.config), {}, &g};
  if (params.tensors.size() != m.layout.specs.size())
    throw DimensionError("model params: expected " + std::to_string(m.layout.specs.size()) + " tensors, got " +
                         std::to_string(params.tensors.size()));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (params.tensors[i].shape() != m.layout.specs[i].shape)
      throw DimensionError("model params: " + m.layout.specs[i].name + " has shape " +
                           shape_string(params.tensors[i].shape()) + ", expected " +
                           shape_string(m.layout.specs[i].shape));
    m.vars.push_back(trainable ? g.param(params.tensors[i]) : g.constant(params.tensors[i]));
  }
  return m;
}

/// Multi-head scaled dot-product attention of `queries` over `sources`
/// (rank 2, or rank 3 for independent batches). With no sources the message
/// is a zero vector.
template <typename S>
Var<S> multi_head_attention(const BoundModel<S>& m, const AttentionSlot& slot, Var<S> queries, Var<S> sources) {
  const std::size_t axis = queries.shape().size() - 1;
  const std::size_t n_sources = sources.shape()[axis - 1];
  if (n_sources == 0) return zeros(*m.graph, queries.shape());
  Var<S> q = linear(queries, m.dense(slot.query));
  Var<S> k = linear(sources, m.dense(slot.key));
  Var<S> v = linear(sources, m.dense(slot.value));
  return linear(attention(q, k, v, m.config.heads), m.dense(slot.output));
}

/// Line descriptors from token tensors [M, T, D] -> [M, D]: one post-norm
/// transformer block without positional encoding, then a mean over tokens.
template <typename S>
Var<S> encode_lines(const BoundModel<S>& m, Var<S> tokens) {
  const Shape& ts = tokens.shape();
  if (ts.size() != 3 || ts[1] != m.config.line_tokens || ts[2] != m.config.descriptor_dim)
    throw DimensionError("line tokens must be [M, " + std::to_string(m.config.line_tokens) + ", " +
                         std::to_string(m.config.descriptor_dim) + "], got " + shape_string(ts));
  if (ts[0] == 0) return zeros(*m.graph, Shape{0, m.config.descriptor_dim});
  const auto& L = m.layout;
  Var<S> attn = multi_head_attention(m, L.encoder_attention, tokens, tokens);
  Var<S> x = layer_norm(add(tokens, attn), m.vars[L.encoder_norm1.gain], m.vars[L.encoder_norm1.bias]);
  const auto mlp = m.dense(L.encoder_mlp);
  Var<S> f = mlp_forward(x, std::span<const Dense<S>>(mlp));
  x = layer_norm(add(x, f), m.vars[L.encoder_norm2.gain], m.vars[L.encoder_norm2.bias]);
  return mean(x, 1);
}

/// One residual message-passing layer: d <- d + phi([d || attention(d, E)]).
/// Self layers attend within each set; cross layers send points to lines and
/// lines to points. Attention and update weights are shared by both sets.
template <typename S>
std::pair<Var<S>, Var<S>> attention_layer(const BoundModel<S>& m, std::size_t index, Var<S> points, Var<S> lines) {
  const GraphLayerSlot& layer = m.layout.graph_layers.at(index);
  const bool self = layer.kind == AttentionKind::self;
  Var<S> msg_p = multi_head_attention(m, layer.attention, points, self ? points : lines);
  Var<S> msg_l = multi_head_attention(m, layer.attention, lines, self ? lines : points);
  const auto update = m.dense(layer.update);
  const std::span<const Dense<S>> phi(update);
  Var<S> new_points = add(points, mlp_forward(concat(points, msg_p, 1), phi));
  Var<S> new_lines = add(lines, mlp_forward(concat(lines, msg_l, 1), phi));
  return {new_points, new_lines};
}

template <typename S>
struct HeadOutputs {
  Var<S> points;  // [N, 4]: xyz + logit
  Var<S> lines;   // [M, 7]: P xyz, Q xyz + logit
};

template <typename S>
HeadOutputs<S> forward(const BoundModel<S>& m, Var<S> point_descriptors, Var<S> line_tokens) {
  const std::size_t D = m.config.descriptor_dim;
  const Shape& ps = point_descriptors.shape();
  if (ps.size() != 2 || ps[1] != D)
    throw DimensionError("point descriptors must be [N, " + std::to_string(D) + "], got " + shape_string(ps));
  Var<S> points = point_descriptors;
  Var<S> lines = encode_lines(m, line_tokens);
  for (std::size_t i = 0; i < m.layout.graph_layers.size(); ++i) std::tie(points, lines) = attention_layer(m, i, points, lines);
  const auto ph = m.dense(m.layout.point_head);
  const auto lh = m.dense(m.layout.line_head);
  return {mlp_forward(points, std::span<const Dense<S>>(ph)), mlp_forward(lines, std::span<const Dense<S>>(lh))};
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

template <typename S>
struct Prediction {
  Tensor<S> points;  // [N, 4]
  Tensor<S> lines;   // [M, 7]
  std::vector<S> point_reliability;
  std::vector<S> line_reliability;

  std::size_t num_points() const { return points.rows(); }
  std::size_t num_lines() const { return lines.rows(); }

  Eigen::Vector3d point(std::size_t i) const {
    return Eigen::Vector3d(points(i, 0), points(i, 1), points(i, 2));
  }
  Line3 line(std::size_t i) const {
    return Line3{Eigen::Vector3d(lines(i, 0), lines(i, 1), lines(i, 2)),
                 Eigen::Vector3d(lines(i, 3), lines(i, 4), lines(i, 5))};
  }
};

template <typename S>
Prediction<S> make_prediction(const Tensor<S>& points, const Tensor<S>& lines, double beta) {
  Prediction<S> p{points, lines, {}, {}};
  for (std::size_t i = 0; i < points.rows(); ++i) p.point_reliability.push_back(reliability_from_logit(points(i, 3), beta));
  for (std::size_t i = 0; i < lines.rows(); ++i) p.line_reliability.push_back(reliability_from_logit(lines(i, 6), beta));
  return p;
}

/// Runs the network without recording gradients.
template <typename S>
Prediction<S> predict(const ModelParams<S>& params, const Tensor<S>& point_descriptors, const Tensor<S>& line_tokens) {
  Graph<S> g;
  const BoundModel<S> m = bind(g, params, false);
  const auto out = forward(m, g.constant(point_descriptors), g.constant(line_tokens));
  return make_prediction(out.points.value(), out.lines.value(), params.config.beta);
}

/// Descriptor of a single line from its [T, D] token matrix.
template <typename S>
Tensor<S> encode_line(const ModelParams<S>& params, const Tensor<S>& tokens) {
  const auto& cfg = params.config;
  if (tokens.shape() != Shape{cfg.line_tokens, cfg.descriptor_dim})
    throw DimensionError("encode_line: expected [" + std::to_string(cfg.line_tokens) + ", " +
                         std::to_string(cfg.descriptor_dim) + "] tokens, got " + shape_string(tokens.shape()));
  Graph<S> g;
  const BoundModel<S> m = bind(g, params, false);
  const Var<S> out = encode_lines(m, g.constant(tokens.reshaped({1, cfg.line_tokens, cfg.descriptor_dim})));
  return out.value().reshaped({cfg.descriptor_dim});
}

}  // namespace pl2map
