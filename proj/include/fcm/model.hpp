#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fcm/autodiff.hpp"
#include "fcm/data.hpp"
#include "fcm/error.hpp"
#include "fcm/masking.hpp"
#include "fcm/random.hpp"
#include "fcm/tensor.hpp"
#include "fcm/vocab.hpp"

namespace fcm {

// Decoder-only transformer hyperparameters. The feed-forward width is fixed
// at four times d_model.
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 64;
  std::size_t d_head = 32;
  std::size_t vocab_size = vocab::kSize;
  std::size_t seq_len = 128;
  std::size_t d_ff = 256;
  double dropout_rate = 0.0;

  std::size_t q_width() const { return n_heads * d_head; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 || vocab_size == 0 || seq_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_ff != 4 * d_model) {
      throw ConfigError("d_ff must equal 4 * d_model (" + std::to_string(4 * d_model) + "), got " +
                        std::to_string(d_ff));
    }
    if (d_head % 2 != 0) throw ConfigError("d_head must be even for rotary embeddings");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0, 1)");
  }

  bool same_architecture(const ModelConfig& o) const {
    return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model &&
           d_head == o.d_head && vocab_size == o.vocab_size && seq_len == o.seq_len && d_ff == o.d_ff;
  }

  static ModelConfig make(std::size_t layers, std::size_t heads, std::size_t d_model, std::size_t d_head,
                          std::size_t vocab, std::size_t seq_len) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    c.d_head = d_head;
    c.vocab_size = vocab;
    c.seq_len = seq_len;
    c.d_ff = 4 * d_model;
    return c;
  }

  // Desk-scale default used by tests and the CLI.
  static ModelConfig desk() { return make(2, 2, 64, 32, vocab::kSize, 128); }
  // Full-scale rows: 32K vocabulary, head size 256, sequence length 1024.
  static ModelConfig size_128m() { return make(8, 4, 1024, 256, 32000, 1024); }
  static ModelConfig size_1b() { return make(16, 8, 2048, 256, 32000, 1024); }
  static ModelConfig size_8b() { return make(32, 16, 4096, 256, 32000, 1024); }
};

inline std::size_t count_non_embedding_params(const ModelConfig& c) {
  const std::size_t per_layer = c.d_model                  // norm gain
                                + c.d_model * c.q_width()  // wq
                                + 2 * c.d_model * c.d_head // wk, wv
                                + c.q_width() * c.d_model  // wo
                                + 3 * c.d_model * c.d_ff;  // gate, up, down
  return c.n_layers * per_layer + c.d_model;
}

inline std::size_t count_params(const ModelConfig& c) {
  return c.vocab_size * c.d_model + count_non_embedding_params(c);
}

template <class T>
struct LayerParams {
  Tensor<T> norm_gain;  // [d_model]
  Tensor<T> wq;         // [d_model, n_heads * d_head]
  Tensor<T> wk;         // [d_model, d_head]
  Tensor<T> wv;         // [d_model, d_head]
  Tensor<T> wo;         // [n_heads * d_head, d_model]
  Tensor<T> w_gate;     // [d_model, d_ff]
  Tensor<T> w_up;       // [d_model, d_ff]
  Tensor<T> w_down;     // [d_ff, d_model]
};

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

// Named parameter set. The token embedding doubles as the output projection.
template <class T>
struct Params {
  Tensor<T> token_embedding;  // [vocab, d_model]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm_gain;  // [d_model]

  // Canonical order; handles share storage with this Params.
  std::vector<NamedTensor<T>> named() const {
    std::vector<NamedTensor<T>> out;
    out.emplace_back("token_embedding", token_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto p = "layers." + std::to_string(i) + ".";
      const auto& l = layers[i];
      out.emplace_back(p + "norm_gain", l.norm_gain);
      out.emplace_back(p + "wq", l.wq);
      out.emplace_back(p + "wk", l.wk);
      out.emplace_back(p + "wv", l.wv);
      out.emplace_back(p + "wo", l.wo);
      out.emplace_back(p + "w_gate", l.w_gate);
      out.emplace_back(p + "w_up", l.w_up);
      out.emplace_back(p + "w_down", l.w_down);
    }
    out.emplace_back("final_norm_gain", final_norm_gain);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) t.zero_grad();
  }

  template <class Fn>
  Params map(Fn&& fn) const {
    Params out;
    out.token_embedding = fn(token_embedding);
    for (const auto& l : layers) {
      out.layers.push_back({fn(l.norm_gain), fn(l.wq), fn(l.wk), fn(l.wv), fn(l.wo), fn(l.w_gate),
                            fn(l.w_up), fn(l.w_down)});
    }
    out.final_norm_gain = fn(final_norm_gain);
    return out;
  }

  Params clone() const {
    return map([](const Tensor<T>& t) { return t.clone(); });
  }

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.token_embedding = token_embedding.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.norm_gain.template cast<U>(), l.wq.template cast<U>(),
                            l.wk.template cast<U>(), l.wv.template cast<U>(), l.wo.template cast<U>(),
                            l.w_gate.template cast<U>(), l.w_up.template cast<U>(),
                            l.w_down.template cast<U>()});
    }
    out.final_norm_gain = final_norm_gain.template cast<U>();
    return out;
  }
};

// Name and shape of every parameter, in Params::named() order.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("token_embedding", Shape{c.vocab_size, c.d_model});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "norm_gain", Shape{c.d_model});
    out.emplace_back(p + "wq", Shape{c.d_model, c.q_width()});
    out.emplace_back(p + "wk", Shape{c.d_model, c.d_head});
    out.emplace_back(p + "wv", Shape{c.d_model, c.d_head});
    out.emplace_back(p + "wo", Shape{c.q_width(), c.d_model});
    out.emplace_back(p + "w_gate", Shape{c.d_model, c.d_ff});
    out.emplace_back(p + "w_up", Shape{c.d_model, c.d_ff});
    out.emplace_back(p + "w_down", Shape{c.d_ff, c.d_model});
  }
  out.emplace_back("final_norm_gain", Shape{c.d_model});
  return out;
}

// Weight matrices ~ N(0, 1/fan_in), embedding ~ N(0, 1), gains = 1.
template <class T = float, class R>
Params<T> init_params(const ModelConfig& cfg, R& rng) {
  cfg.validate();
  auto normal = [&rng](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto t = Tensor<T>::zeros(std::move(shape), true);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto fan_in = [&normal](std::size_t in, std::size_t out) {
    return normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  Params<T> p;
  p.token_embedding = normal({cfg.vocab_size, cfg.d_model}, 1.0);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerParams<T> l;
    l.norm_gain = Tensor<T>::full({cfg.d_model}, T(1), true);
    l.wq = fan_in(cfg.d_model, cfg.q_width());
    l.wk = fan_in(cfg.d_model, cfg.d_head);
    l.wv = fan_in(cfg.d_model, cfg.d_head);
    l.wo = fan_in(cfg.q_width(), cfg.d_model);
    l.w_gate = fan_in(cfg.d_model, cfg.d_ff);
    l.w_up = fan_in(cfg.d_model, cfg.d_ff);
    l.w_down = fan_in(cfg.d_ff, cfg.d_model);
    p.layers.push_back(std::move(l));
  }
  p.final_norm_gain = Tensor<T>::full({cfg.d_model}, T(1), true);
  return p;
}

struct ForwardOptions {
  double dropout_rate = 0.0;
  Rng* dropout_rng = nullptr;
  std::int32_t mask_token_id = vocab::kMask;  // token variant substitute
};

namespace detail {

inline std::vector<std::int32_t> iota_positions(std::size_t s) {
  std::vector<std::int32_t> pos(s);
  std::iota(pos.begin(), pos.end(), 0);
  return pos;
}

template <class T>
Tensor<T> bias_tensor(const AttentionBias& bias) {
  std::vector<T> v(bias.values.begin(), bias.values.end());
  return Tensor<T>::from({bias.size, bias.size}, std::move(v));
}

template <class T>
Tensor<T> maybe_dropout(Graph<T>& g, const Tensor<T>& x, const ForwardOptions& opt) {
  if (opt.dropout_rate <= 0.0) return x;
  if (!opt.dropout_rng) throw ConfigError("dropout requested without a dropout generator");
  return g.dropout(x, opt.dropout_rate, *opt.dropout_rng);
}

}  // namespace detail

// h: [b, s, d_model]; bias: [s, s] or [b, 1, s, s]. One shared key/value
// head serves every query head; rotary embeddings are applied to q and k.
template <class T>
Tensor<T> multi_query_attention(Graph<T>& g, const Tensor<T>& h, const LayerParams<T>& lp,
                                const ModelConfig& cfg, const Tensor<T>& bias) {
  if (h.ndim() != 3) throw ShapeError("attention input must be [batch, seq, d_model], got " + shape_str(h.shape()));
  const std::size_t b = h.dim(0), s = h.dim(1), H = cfg.n_heads, dh = cfg.d_head;
  const bool bias_ok = (bias.ndim() == 2 && bias.dim(0) == s && bias.dim(1) == s) ||
                       (bias.ndim() == 4 && bias.dim(0) == b && bias.dim(1) == 1 && bias.dim(2) == s &&
                        bias.dim(3) == s);
  if (!bias_ok) {
    throw ShapeError("attention bias shape " + shape_str(bias.shape()) + " does not match sequence length " +
                     std::to_string(s));
  }
  const auto pos = detail::iota_positions(s);

  auto q = g.matmul(h, lp.wq);
  q = g.permute(g.reshape(q, {b, s, H, dh}), {0, 2, 1, 3});
  q = g.rope(q, pos);
  auto k = g.rope(g.reshape(g.matmul(h, lp.wk), {b, 1, s, dh}), pos);
  auto v = g.reshape(g.matmul(h, lp.wv), {b, 1, s, dh});

  auto scores = g.scale(g.matmul(q, g.transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  scores = g.add_broadcast(scores, bias);
  auto weights = g.softmax_lastdim(scores);
  auto ctx = g.matmul(weights, v);  // [b, H, s, dh]
  ctx = g.reshape(g.permute(ctx, {0, 2, 1, 3}), {b, s, H * dh});
  return g.matmul(ctx, lp.wo);
}

template <class T>
Tensor<T> swiglu(Graph<T>& g, const Tensor<T>& u, const LayerParams<T>& lp) {
  auto gate = g.swish(g.matmul(u, lp.w_gate));
  auto up = g.matmul(u, lp.w_up);
  return g.matmul(g.mul(gate, up), lp.w_down);
}

// out = h + attn(norm(h)) + ffn(norm(h)), one shared normalization.
template <class T>
Tensor<T> parallel_block(Graph<T>& g, const Tensor<T>& h, const LayerParams<T>& lp, const ModelConfig& cfg,
                         const Tensor<T>& bias, const ForwardOptions& opt = {}) {
  auto u = g.rms_norm(h, lp.norm_gain);
  auto attn = detail::maybe_dropout(g, multi_query_attention(g, u, lp, cfg, bias), opt);
  auto ffn = detail::maybe_dropout(g, swiglu(g, u, lp), opt);
  return g.add(g.add(h, attn), ffn);
}

// ids: [b, s]. plans: empty (plain causal) or one per sequence, all of the
// same variant. Returns logits [b, s, vocab].
template <class T>
Tensor<T> forward_logits(Graph<T>& g, const Params<T>& params, const ModelConfig& cfg, const IdTensor& ids,
                         std::span<const MaskPlan> plans = {}, const ForwardOptions& opt = {}) {
  if (ids.shape.size() != 2) throw ShapeError("ids must be [batch, seq], got " + shape_str(ids.shape));
  const std::size_t b = ids.shape[0], s = ids.shape[1];
  if (s > cfg.seq_len) {
    throw ContextOverflowError("sequence length " + std::to_string(s) + " exceeds model context " +
                               std::to_string(cfg.seq_len));
  }
  MaskVariant variant = MaskVariant::none;
  if (!plans.empty()) {
    if (plans.size() != b) throw ShapeError("need one mask plan per sequence");
    variant = plans[0].variant;
    for (const auto& p : plans) {
      if (p.variant != variant) throw ConfigError("mask plans within a batch must share a variant");
      if (p.size() != s) throw ShapeError("mask plan length differs from sequence length");
    }
  }

  Tensor<T> bias;
  IdTensor input = ids;
  if (variant == MaskVariant::attention) {
    std::vector<T> values;
    values.reserve(b * s * s);
    for (const auto& p : plans) {
      const auto bb = build_attention_bias(p);
      values.insert(values.end(), bb.values.begin(), bb.values.end());
    }
    bias = Tensor<T>::from({b, 1, s, s}, std::move(values));
  } else {
    if (variant == MaskVariant::token) {
      for (std::size_t r = 0; r < b; ++r) {
        const auto row = apply_token_mask(ids.row(r), plans[r], opt.mask_token_id);
        std::copy(row.begin(), row.end(), input.data.begin() + static_cast<std::ptrdiff_t>(r * s));
      }
    }
    bias = detail::bias_tensor<T>(causal_bias(s));
  }

  auto h = g.embedding(params.token_embedding, input);
  for (const auto& lp : params.layers) h = parallel_block(g, h, lp, cfg, bias, opt);
  h = g.rms_norm(h, params.final_norm_gain);
  h = g.scale(h, static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_model))));
  return g.matmul(h, g.transpose(params.token_embedding));
}

namespace detail {

// Position t predicts ids[t + 1]; the final position carries no loss.
template <class T>
std::pair<IdTensor, std::vector<T>> shifted_targets(const Batch& batch) {
  const std::size_t b = batch.size(), s = batch.seq_len();
  if (batch.loss_weights.size() != b * (s - 1)) throw ShapeError("loss_weights must be [batch, seq - 1]");
  IdTensor targets({b, s}, std::vector<std::int32_t>(b * s, 0));
  std::vector<T> weights(b * s, T(0));
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t t = 0; t + 1 < s; ++t) {
      targets.at(r, t) = batch.ids.at(r, t + 1);
      weights[r * s + t] = static_cast<T>(batch.loss_weights[r * (s - 1) + t]);
    }
  }
  return {std::move(targets), std::move(weights)};
}

}  // namespace detail

template <class T>
Tensor<T> causal_lm_loss(Graph<T>& g, const Params<T>& params, const ModelConfig& cfg, const Batch& batch,
                         const ForwardOptions& opt = {}) {
  auto logits = forward_logits(g, params, cfg, batch.ids, {}, opt);
  auto [targets, weights] = detail::shifted_targets<T>(batch);
  return g.cross_entropy(logits, targets, weights);
}

// Samples one mask plan per sequence and returns the mean next-token loss.
// Targets always come from the original ids.
template <class T, class R>
Tensor<T> fcm_loss(Graph<T>& g, const Params<T>& params, const ModelConfig& cfg, const Batch& batch,
                   const MaskConfig& mask, R& mask_rng, const ForwardOptions& opt = {},
                   std::vector<MaskPlan>* plans_out = nullptr) {
  mask.validate();
  std::vector<MaskPlan> plans;
  if (mask.variant != MaskVariant::none) {
    for (std::size_t r = 0; r < batch.size(); ++r) plans.push_back(sample_mask_plan(batch.seq_len(), mask, mask_rng));
  }
  ForwardOptions fopt = opt;
  fopt.mask_token_id = mask.mask_token_id;
  auto logits = forward_logits(g, params, cfg, batch.ids, plans, fopt);
  auto [targets, weights] = detail::shifted_targets<T>(batch);
  if (plans_out) *plans_out = std::move(plans);
  return g.cross_entropy(logits, targets, weights);
}

}  // namespace fcm
