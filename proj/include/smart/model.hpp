#pragma once

// Parameter containers, initialization and forward passes for the full model:
// encoder + MART blocks (the backbone shared with the EMA teacher), the
// pre-training embedding decoder and the task label decoder.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "smart/config.hpp"
#include "smart/encoder.hpp"
#include "smart/mart_block.hpp"
#include "smart/optim.hpp"

namespace smart {

struct Backbone {
  EncoderParams encoder;
  std::vector<MartBlockParams> blocks;
};

/// Two-layer MLP with one activation, applied position-wise.
struct MlpParams {
  LinearParams first;
  LinearParams second;
};

/// Task head on the flattened N x d representation: LN, Linear, GELU, LN, Linear.
struct LabelDecoderParams {
  NormParams norm_in;
  LinearParams hidden;
  NormParams norm_hidden;
  LinearParams out;
};

struct MartModel {
  ModelConfig config;
  Backbone backbone;
  MlpParams embedding_decoder;
  LabelDecoderParams label_decoder;
};

namespace detail {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = (2.0 * uniform01(rng_) - 1.0) * limit;
    return t.set_requires_grad(true);
  }

  // Box-Muller on our own uniform draws keeps the stream identical across standard libraries.
  Tensor normal(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
      const double u1 = 1.0 - uniform01(rng_), u2 = uniform01(rng_);
      v = stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    return t.set_requires_grad(true);
  }

  LinearParams linear(std::size_t in, std::size_t out) {
    return {xavier(Shape{in, out}, in, out), Tensor(Shape{out}).set_requires_grad(true)};
  }

  static NormParams norm(std::size_t width) {
    return {Tensor(Shape{width}, 1.0).set_requires_grad(true), Tensor(Shape{width}).set_requires_grad(true)};
  }

  AttentionParams attention(std::size_t d) {
    AttentionParams p;
    p.query = linear(d, d);
    p.key = linear(d, d);
    p.value = linear(d, d);
    p.output = linear(d, d);
    p.norm = norm(d);
    return p;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace detail

/// Fresh parameters: Xavier-uniform weights, zero biases, CLS ~ N(0, 0.02^2),
/// unit LayerNorm gains. The last label-decoder layer starts at zero so an
/// untrained model predicts the uninformative prior for every input.
inline MartModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t N = config.n_vars, d = config.d;
  detail::Initializer init(seed);
  MartModel model;
  model.config = config;

  auto& enc = model.backbone.encoder;
  enc.proj_weight = init.xavier(Shape{N, 2, d}, 2, d);
  enc.proj_bias = Tensor(Shape{N, d}).set_requires_grad(true);
  enc.cls = init.normal(Shape{N, d}, 0.02);

  for (std::size_t l = 0; l < config.layers; ++l) {
    MartBlockParams block;
    block.temporal = init.attention(d);
    block.variable = init.attention(d);
    block.ffn.up = init.linear(d, config.ff_mult * d);
    block.ffn.down = init.linear(config.ff_mult * d, d);
    block.ffn.norm = detail::Initializer::norm(d);
    model.backbone.blocks.push_back(std::move(block));
  }

  const std::size_t target_width = config.ablation.impute_input_space ? 1 : d;
  model.embedding_decoder.first = init.linear(d, d);
  model.embedding_decoder.second = init.linear(d, target_width);

  auto& head = model.label_decoder;
  head.norm_in = detail::Initializer::norm(N * d);
  head.hidden = init.linear(N * d, d);
  head.norm_hidden = detail::Initializer::norm(d);
  head.out = {Tensor(Shape{d, config.task.outputs}).set_requires_grad(true),
              Tensor(Shape{config.task.outputs}).set_requires_grad(true)};
  return model;
}

namespace detail {

inline void push(ParameterList& out, const std::string& name, const Tensor& t) { out.push_back({name, t}); }

inline void push(ParameterList& out, const std::string& prefix, const LinearParams& p) {
  push(out, prefix + ".weight", p.weight);
  push(out, prefix + ".bias", p.bias);
}

inline void push(ParameterList& out, const std::string& prefix, const NormParams& p) {
  push(out, prefix + ".gamma", p.gamma);
  push(out, prefix + ".beta", p.beta);
}

inline void push(ParameterList& out, const std::string& prefix, const AttentionParams& p) {
  push(out, prefix + ".query", p.query);
  push(out, prefix + ".key", p.key);
  push(out, prefix + ".value", p.value);
  push(out, prefix + ".output", p.output);
  push(out, prefix + ".norm", p.norm);
}

}  // namespace detail

/// Handles share storage with the model, so updates through the list are visible in the model.
inline ParameterList backbone_parameters(const Backbone& bb) {
  ParameterList out;
  detail::push(out, "encoder.proj.weight", bb.encoder.proj_weight);
  detail::push(out, "encoder.proj.bias", bb.encoder.proj_bias);
  detail::push(out, "encoder.cls", bb.encoder.cls);
  for (std::size_t l = 0; l < bb.blocks.size(); ++l) {
    const std::string p = "block." + std::to_string(l);
    detail::push(out, p + ".temporal", bb.blocks[l].temporal);
    detail::push(out, p + ".variable", bb.blocks[l].variable);
    detail::push(out, p + ".ffn.up", bb.blocks[l].ffn.up);
    detail::push(out, p + ".ffn.down", bb.blocks[l].ffn.down);
    detail::push(out, p + ".ffn.norm", bb.blocks[l].ffn.norm);
  }
  return out;
}

inline ParameterList embedding_decoder_parameters(const MartModel& model) {
  ParameterList out;
  detail::push(out, "embedding_decoder.0", model.embedding_decoder.first);
  detail::push(out, "embedding_decoder.1", model.embedding_decoder.second);
  return out;
}

inline ParameterList label_decoder_parameters(const MartModel& model) {
  ParameterList out;
  const auto& h = model.label_decoder;
  detail::push(out, "label_decoder.norm_in", h.norm_in);
  detail::push(out, "label_decoder.hidden", h.hidden);
  detail::push(out, "label_decoder.norm_hidden", h.norm_hidden);
  detail::push(out, "label_decoder.out", h.out);
  return out;
}

inline ParameterList all_parameters(const MartModel& model) {
  ParameterList out = backbone_parameters(model.backbone);
  for (auto& p : embedding_decoder_parameters(model)) out.push_back(p);
  for (auto& p : label_decoder_parameters(model)) out.push_back(p);
  return out;
}

/// Deep copy with independent storage.
inline Backbone clone(const Backbone& bb) {
  Backbone out = bb;
  auto fresh = [](Tensor& t) { t = t.clone(); };
  fresh(out.encoder.proj_weight);
  fresh(out.encoder.proj_bias);
  fresh(out.encoder.cls);
  for (auto& b : out.blocks) {
    for (AttentionParams* a : {&b.temporal, &b.variable}) {
      for (LinearParams* l : {&a->query, &a->key, &a->value, &a->output}) {
        fresh(l->weight);
        fresh(l->bias);
      }
      fresh(a->norm.gamma);
      fresh(a->norm.beta);
    }
    fresh(b.ffn.up.weight);
    fresh(b.ffn.up.bias);
    fresh(b.ffn.down.weight);
    fresh(b.ffn.down.bias);
    fresh(b.ffn.norm.gamma);
    fresh(b.ffn.norm.beta);
  }
  return out;
}

inline MartModel clone(const MartModel& model) {
  MartModel out = model;
  out.backbone = clone(model.backbone);
  for (LinearParams* l : {&out.embedding_decoder.first, &out.embedding_decoder.second, &out.label_decoder.hidden,
                          &out.label_decoder.out}) {
    l->weight = l->weight.clone();
    l->bias = l->bias.clone();
  }
  for (NormParams* n : {&out.label_decoder.norm_in, &out.label_decoder.norm_hidden}) {
    n->gamma = n->gamma.clone();
    n->beta = n->beta.clone();
  }
  return out;
}

/// Dropout state for one forward pass; eval mode when training is false.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  AttentionTrace* trace = nullptr;
};

inline EncodeOptions encode_options(const ModelConfig& config) {
  return {config.ablation.mask_in_encoder(), !config.ablation.no_cls};
}

inline BlockContext block_context(const ModelConfig& config, const ForwardMode& mode) {
  BlockContext ctx;
  ctx.heads = config.heads;
  ctx.dropout = config.dropout;
  ctx.training = mode.training;
  ctx.rng = mode.rng;
  ctx.pooling = config.key_pooling;
  ctx.ablation = config.ablation;
  ctx.trace = mode.trace;
  return ctx;
}

struct BackboneOutput {
  Tensor s;           // [B, rows, N, d]
  HiddenState state;  // encoder output, mask and lengths
};

inline BackboneOutput backbone_forward(const Backbone& bb, const ModelConfig& config, const Batch& batch,
                                       const ForwardMode& mode = {}) {
  BackboneOutput out;
  out.state = encode(batch, bb.encoder, encode_options(config));
  out.s = mart_forward(out.state, bb.blocks, block_context(config, mode));
  return out;
}

inline Tensor apply(const MlpParams& p, const Tensor& x) { return apply(p.second, gelu(apply(p.first, x))); }

/// Rows carrying the pooled representation: the CLS row, or the last valid row without CLS.
inline std::vector<std::size_t> summary_rows(const HiddenState& state) {
  std::vector<std::size_t> rows(state.B, 0);
  if (!state.has_cls)
    for (std::size_t b = 0; b < state.B; ++b) rows[b] = state.length[b] - 1;
  return rows;
}

inline Tensor label_head(const LabelDecoderParams& p, const Tensor& pooled) {
  Tensor z = apply(p.norm_in, pooled);
  z = apply(p.norm_hidden, gelu(apply(p.hidden, z)));
  return apply(p.out, z);
}

/// Task logits [B, outputs].
inline Tensor predict_logits(const MartModel& model, const Batch& batch, const ForwardMode& mode = {}) {
  const auto out = backbone_forward(model.backbone, model.config, batch, mode);
  const std::size_t N = model.config.n_vars, d = model.config.d;
  const Tensor pooled = reshape(gather_rows(out.s, summary_rows(out.state)), Shape{batch.B, N * d});
  return label_head(model.label_decoder, pooled);
}

}  // namespace smart
