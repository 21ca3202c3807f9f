#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <type_traits>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "raffm/error.hpp"
#include "raffm/rng.hpp"
#include "raffm/tensor.hpp"

namespace raffm {

// Shape of the miniature classifier. d_k, d_v and d_ff are the widest values a
// sub-model may take; sub-models keep the config of the model they came from.
struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t d_k = 4;
  std::size_t d_v = 4;
  std::size_t d_ff = 16;
  std::size_t vocab_size = 11;
  std::size_t n_classes = 3;
  std::size_t max_seq = 8;

  void validate() const {
    const std::pair<const char*, std::size_t> fields[] = {
        {"n_layers", n_layers}, {"d_model", d_model},       {"n_heads", n_heads},
        {"d_k", d_k},           {"d_v", d_v},               {"d_ff", d_ff},
        {"vocab_size", vocab_size}, {"n_classes", n_classes}, {"max_seq", max_seq}};
    for (const auto& [name, value] : fields) {
      if (value < 1) throw ConfigError(detail::concat("ModelConfig: ", name, " must be >= 1"));
    }
  }

  // The attention temperature is fixed by the full query/key width so that a
  // sliced head drops terms from Q K^T instead of rescaling the rest.
  double attention_scale() const { return 1.0 / std::sqrt(static_cast<double>(d_k)); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadWeights {
  Tensor2 wq, bq;  // d_model x q, 1 x q
  Tensor2 wk, bk;  // d_model x q, 1 x q
  Tensor2 wv, bv;  // d_model x v, 1 x v
};

struct LayerWeights {
  Tensor2 ln1_gamma, ln1_beta;
  std::vector<HeadWeights> heads;
  Tensor2 wo, bo;  // (sum of head v widths) x d_model, rows grouped by head
  Tensor2 ln2_gamma, ln2_beta;
  Tensor2 w1, b1;  // d_model x ffn, 1 x ffn
  Tensor2 w2, b2;  // ffn x d_model, 1 x d_model
};

struct ModelWeights {
  ModelConfig config;
  Tensor2 token_embedding;     // vocab x d_model
  Tensor2 position_embedding;  // max_seq x d_model
  std::vector<LayerWeights> layers;
  Tensor2 classifier_w, classifier_b;

  friend bool operator==(const ModelWeights& a, const ModelWeights& b);
};

// Visits every trainable tensor in a fixed canonical order with a stable name.
// Works for both const and mutable weights.
template <typename W, typename F>
  requires std::same_as<std::remove_const_t<W>, ModelWeights>
void visit_tensors(W& w, F&& f) {
  f(std::string("embed.token"), w.token_embedding);
  f(std::string("embed.position"), w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    f(p + "ln1.gamma", layer.ln1_gamma);
    f(p + "ln1.beta", layer.ln1_beta);
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      auto& head = layer.heads[h];
      const std::string hp = p + "head" + std::to_string(h) + ".";
      f(hp + "wq", head.wq);
      f(hp + "bq", head.bq);
      f(hp + "wk", head.wk);
      f(hp + "bk", head.bk);
      f(hp + "wv", head.wv);
      f(hp + "bv", head.bv);
    }
    f(p + "attn.wo", layer.wo);
    f(p + "attn.bo", layer.bo);
    f(p + "ln2.gamma", layer.ln2_gamma);
    f(p + "ln2.beta", layer.ln2_beta);
    f(p + "ffn.w1", layer.w1);
    f(p + "ffn.b1", layer.b1);
    f(p + "ffn.w2", layer.w2);
    f(p + "ffn.b2", layer.b2);
  }
  f(std::string("classifier.w"), w.classifier_w);
  f(std::string("classifier.b"), w.classifier_b);
}

template <typename W>
auto tensor_list(W& w) {
  using Ptr = std::conditional_t<std::is_const_v<W>, const Tensor2*, Tensor2*>;
  std::vector<Ptr> out;
  visit_tensors(w, [&](const std::string&, auto& t) { out.push_back(&t); });
  return out;
}

inline bool operator==(const ModelWeights& a, const ModelWeights& b) {
  if (!(a.config == b.config)) return false;
  auto ta = tensor_list(a);
  auto tb = tensor_list(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!(*ta[i] == *tb[i])) return false;
  }
  return true;
}

inline std::size_t total_params(const ModelWeights& w) {
  std::size_t n = 0;
  visit_tensors(w, [&](const std::string&, const Tensor2& t) { n += t.size(); });
  return n;
}

inline std::uint64_t fingerprint(const ModelWeights& w) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  visit_tensors(w, [&](const std::string&, const Tensor2& t) {
    h = combine_ids(h, t.rows());
    h = combine_ids(h, t.cols());
    for (double v : t.values()) h = combine_ids(h, std::bit_cast<std::uint64_t>(v));
  });
  return h;
}

// Checks internal consistency: every shape agrees with the config, and each
// prunable width lies in [1, max].
inline void validate_weights(const ModelWeights& w) {
  const auto& c = w.config;
  c.validate();
  auto expect = [](const Tensor2& t, std::size_t r, std::size_t cc, const std::string& what) {
    if (t.rows() != r || t.cols() != cc) {
      throw ShapeError(detail::concat(what, ": expected (", r, "x", cc, "), got ",
                                      t.shape_string()));
    }
  };
  auto width_ok = [](std::size_t v, std::size_t max, const std::string& what) {
    if (v < 1 || v > max) {
      throw ShapeError(detail::concat(what, ": width ", v, " outside [1, ", max, "]"));
    }
  };
  expect(w.token_embedding, c.vocab_size, c.d_model, "embed.token");
  expect(w.position_embedding, c.max_seq, c.d_model, "embed.position");
  if (w.layers.size() != c.n_layers) {
    throw ShapeError(detail::concat("model has ", w.layers.size(), " layers, config says ",
                                    c.n_layers));
  }
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const std::string p = "layer" + std::to_string(l);
    expect(layer.ln1_gamma, 1, c.d_model, p + ".ln1.gamma");
    expect(layer.ln1_beta, 1, c.d_model, p + ".ln1.beta");
    expect(layer.ln2_gamma, 1, c.d_model, p + ".ln2.gamma");
    expect(layer.ln2_beta, 1, c.d_model, p + ".ln2.beta");
    if (layer.heads.size() != c.n_heads) {
      throw ShapeError(detail::concat(p, " has ", layer.heads.size(), " heads, config says ",
                                      c.n_heads));
    }
    std::size_t v_total = 0;
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const auto& head = layer.heads[h];
      const std::string hp = p + ".head" + std::to_string(h);
      const std::size_t q = head.wq.cols();
      const std::size_t v = head.wv.cols();
      width_ok(q, c.d_k, hp + ".wq");
      width_ok(v, c.d_v, hp + ".wv");
      expect(head.wq, c.d_model, q, hp + ".wq");
      expect(head.bq, 1, q, hp + ".bq");
      expect(head.wk, c.d_model, q, hp + ".wk");
      expect(head.bk, 1, q, hp + ".bk");
      expect(head.wv, c.d_model, v, hp + ".wv");
      expect(head.bv, 1, v, hp + ".bv");
      v_total += v;
    }
    expect(layer.wo, v_total, c.d_model, p + ".attn.wo");
    expect(layer.bo, 1, c.d_model, p + ".attn.bo");
    const std::size_t f = layer.w1.cols();
    width_ok(f, c.d_ff, p + ".ffn.w1");
    expect(layer.w1, c.d_model, f, p + ".ffn.w1");
    expect(layer.b1, 1, f, p + ".ffn.b1");
    expect(layer.w2, f, c.d_model, p + ".ffn.w2");
    expect(layer.b2, 1, c.d_model, p + ".ffn.b2");
  }
  expect(w.classifier_w, c.d_model, c.n_classes, "classifier.w");
  expect(w.classifier_b, 1, c.n_classes, "classifier.b");
  visit_tensors(w, [](const std::string& name, const Tensor2& t) {
    for (double v : t.values()) {
      if (!std::isfinite(v)) throw NumericError(name + ": non-finite entry");
    }
  });
}

// All-zero weights of the full architecture (layer norms included).
inline ModelWeights zero_weights(const ModelConfig& c) {
  c.validate();
  ModelWeights w;
  w.config = c;
  w.token_embedding = Tensor2(c.vocab_size, c.d_model);
  w.position_embedding = Tensor2(c.max_seq, c.d_model);
  w.layers.resize(c.n_layers);
  for (auto& layer : w.layers) {
    layer.ln1_gamma = Tensor2(1, c.d_model);
    layer.ln1_beta = Tensor2(1, c.d_model);
    layer.heads.resize(c.n_heads);
    for (auto& head : layer.heads) {
      head.wq = Tensor2(c.d_model, c.d_k);
      head.bq = Tensor2(1, c.d_k);
      head.wk = Tensor2(c.d_model, c.d_k);
      head.bk = Tensor2(1, c.d_k);
      head.wv = Tensor2(c.d_model, c.d_v);
      head.bv = Tensor2(1, c.d_v);
    }
    layer.wo = Tensor2(c.n_heads * c.d_v, c.d_model);
    layer.bo = Tensor2(1, c.d_model);
    layer.ln2_gamma = Tensor2(1, c.d_model);
    layer.ln2_beta = Tensor2(1, c.d_model);
    layer.w1 = Tensor2(c.d_model, c.d_ff);
    layer.b1 = Tensor2(1, c.d_ff);
    layer.w2 = Tensor2(c.d_ff, c.d_model);
    layer.b2 = Tensor2(1, c.d_model);
  }
  w.classifier_w = Tensor2(c.d_model, c.n_classes);
  w.classifier_b = Tensor2(1, c.n_classes);
  return w;
}

// Zeros shaped like w, including any narrowed widths.
inline ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights out = w;
  visit_tensors(out, [](const std::string&, Tensor2& t) { t = Tensor2(t.rows(), t.cols()); });
  return out;
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for projections and their biases,
// uniform(-1, 1) for embeddings, unit scale and zero shift for layer norms.
// Tensor i draws from rng.derive(i), so adding a tensor never reshuffles others.
inline ModelWeights init_weights(const ModelConfig& c, const RngStream& rng) {
  ModelWeights w = zero_weights(c);
  std::uint64_t ordinal = 0;
  auto fill = [&](Tensor2& t, double bound) {
    RngStream s = rng.derive(ordinal++);
    for (double& v : t.values()) v = s.uniform(-bound, bound);
  };
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  fill(w.token_embedding, 1.0);
  fill(w.position_embedding, 1.0);
  for (auto& layer : w.layers) {
    layer.ln1_gamma = Tensor2(1, c.d_model, 1.0);
    layer.ln2_gamma = Tensor2(1, c.d_model, 1.0);
    ordinal += 4;
    for (auto& head : layer.heads) {
      fill(head.wq, fan(c.d_model));
      fill(head.bq, fan(c.d_model));
      fill(head.wk, fan(c.d_model));
      fill(head.bk, fan(c.d_model));
      fill(head.wv, fan(c.d_model));
      fill(head.bv, fan(c.d_model));
    }
    fill(layer.wo, fan(c.n_heads * c.d_v));
    fill(layer.bo, fan(c.n_heads * c.d_v));
    fill(layer.w1, fan(c.d_model));
    fill(layer.b1, fan(c.d_model));
    fill(layer.w2, fan(c.d_ff));
    fill(layer.b2, fan(c.d_ff));
  }
  fill(w.classifier_w, fan(c.d_model));
  fill(w.classifier_b, fan(c.d_model));
  return w;
}

struct Batch {
  std::vector<std::vector<std::size_t>> sequences;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return sequences.size(); }

  void validate(const ModelConfig& c) const {
    if (sequences.empty()) throw ValidationError("Batch: no sequences");
    if (labels.size() != sequences.size()) {
      throw ValidationError(detail::concat("Batch: ", sequences.size(), " sequences but ",
                                           labels.size(), " labels"));
    }
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      const auto& s = sequences[i];
      if (s.empty() || s.size() > c.max_seq) {
        throw ValidationError(detail::concat("Batch: sequence ", i, " has length ", s.size(),
                                             ", allowed [1, ", c.max_seq, "]"));
      }
      for (std::size_t tok : s) {
        if (tok >= c.vocab_size) {
          throw ValidationError(detail::concat("Batch: token id ", tok, " in sequence ", i,
                                               " exceeds vocab_size ", c.vocab_size));
        }
      }
      if (labels[i] >= c.n_classes) {
        throw ValidationError(detail::concat("Batch: label ", labels[i], " exceeds n_classes ",
                                             c.n_classes));
      }
    }
  }
};

// Unscaled-input attention probabilities softmax(x Wq (x Wk)^T * scale).
// scale defaults to 1/sqrt(wq.cols()).
inline Tensor2 attention_scores(const Tensor2& wq, const Tensor2& wk, const Tensor2& x,
                                double scale_factor = 0.0) {
  if (wq.rows() != x.cols() || wk.rows() != x.cols() || wq.cols() != wk.cols()) {
    throw ShapeError(detail::concat("attention_scores: x ", x.shape_string(), ", wq ",
                                    wq.shape_string(), ", wk ", wk.shape_string()));
  }
  if (scale_factor == 0.0) scale_factor = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  const Tensor2 q = matmul(x, wq);
  const Tensor2 k = matmul(x, wk);
  return softmax_rows(scale(matmul(q, transpose(k)), scale_factor));
}

namespace detail {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

struct NormCache {
  Tensor2 xhat;
  std::vector<double> inv_std;
};

inline Tensor2 layer_norm(const Tensor2& x, const Tensor2& gamma, const Tensor2& beta,
                          NormCache& cache) {
  const std::size_t n = x.cols();
  cache.xhat = Tensor2(x.rows(), n);
  cache.inv_std.assign(x.rows(), 0.0);
  Tensor2 y(x.rows(), n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    cache.inv_std[r] = inv;
    for (std::size_t c = 0; c < n; ++c) {
      const double xh = (row[c] - mean) * inv;
      cache.xhat(r, c) = xh;
      y(r, c) = gamma(0, c) * xh + beta(0, c);
    }
  }
  return y;
}

inline Tensor2 layer_norm_backward(const Tensor2& dy, const Tensor2& gamma,
                                   const NormCache& cache, Tensor2& dgamma, Tensor2& dbeta) {
  const std::size_t n = dy.cols();
  const double nn = static_cast<double>(n);
  Tensor2 dx(dy.rows(), n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    double sum_dxh = 0.0;
    double sum_dxh_xh = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double g = dy(r, c);
      dgamma(0, c) += g * cache.xhat(r, c);
      dbeta(0, c) += g;
      const double dxh = g * gamma(0, c);
      sum_dxh += dxh;
      sum_dxh_xh += dxh * cache.xhat(r, c);
    }
    const double inv = cache.inv_std[r];
    for (std::size_t c = 0; c < n; ++c) {
      const double dxh = dy(r, c) * gamma(0, c);
      dx(r, c) = inv / nn * (nn * dxh - sum_dxh - cache.xhat(r, c) * sum_dxh_xh);
    }
  }
  return dx;
}

inline double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

inline void accumulate(Tensor2& dst, const Tensor2& src) {
  require_same_shape(dst, src, "accumulate");
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct HeadCache {
  Tensor2 q, k, v, probs;
};

struct LayerCache {
  Tensor2 x_in;
  NormCache ln1;
  Tensor2 h1;
  std::vector<HeadCache> heads;
  Tensor2 concat;
  Tensor2 x_mid;
  NormCache ln2;
  Tensor2 h2;
  Tensor2 pre_act, act;
};

struct SequenceCache {
  std::vector<std::size_t> tokens;
  std::vector<LayerCache> layers;
  Tensor2 final_x;
  Tensor2 pooled;
};

}  // namespace detail

// Activations retained by forward() for a matching backward().
struct ForwardCache {
  std::uint64_t weights_fingerprint = 0;
  std::vector<detail::SequenceCache> sequences;
  Tensor2 logits;
};

struct ForwardResult {
  Tensor2 logits;  // batch_size x n_classes
  ForwardCache cache;
};

// Pre-norm residual transformer: x += Attn(LN1(x)); x += FFN(LN2(x)); then
// mean-pool over positions and apply the linear classifier.
inline ForwardResult forward(const ModelWeights& w, const Batch& batch) {
  const auto& c = w.config;
  batch.validate(c);
  ForwardResult result;
  result.logits = Tensor2(batch.size(), c.n_classes);
  result.cache.weights_fingerprint = fingerprint(w);
  result.cache.sequences.resize(batch.size());
  const double attn_scale = c.attention_scale();

  for (std::size_t s = 0; s < batch.size(); ++s) {
    auto& sc = result.cache.sequences[s];
    sc.tokens = batch.sequences[s];
    const std::size_t len = sc.tokens.size();
    Tensor2 x(len, c.d_model);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < c.d_model; ++j)
        x(i, j) = w.token_embedding(sc.tokens[i], j) + w.position_embedding(i, j);

    sc.layers.resize(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      const auto& layer = w.layers[l];
      auto& lc = sc.layers[l];
      lc.x_in = x;
      lc.h1 = detail::layer_norm(x, layer.ln1_gamma, layer.ln1_beta, lc.ln1);
      lc.heads.resize(layer.heads.size());
      std::vector<Tensor2> outs;
      outs.reserve(layer.heads.size());
      for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const auto& head = layer.heads[h];
        auto& hc = lc.heads[h];
        hc.q = add_row(matmul(lc.h1, head.wq), head.bq);
        hc.k = add_row(matmul(lc.h1, head.wk), head.bk);
        hc.v = add_row(matmul(lc.h1, head.wv), head.bv);
        hc.probs = softmax_rows(scale(matmul(hc.q, transpose(hc.k)), attn_scale));
        outs.push_back(matmul(hc.probs, hc.v));
      }
      lc.concat = concat_cols(outs);
      lc.x_mid = add(x, add_row(matmul(lc.concat, layer.wo), layer.bo));
      lc.h2 = detail::layer_norm(lc.x_mid, layer.ln2_gamma, layer.ln2_beta, lc.ln2);
      lc.pre_act = add_row(matmul(lc.h2, layer.w1), layer.b1);
      lc.act = lc.pre_act;
      for (double& v : lc.act.values()) v = detail::gelu(v);
      x = add(lc.x_mid, add_row(matmul(lc.act, layer.w2), layer.b2));
    }
    sc.final_x = x;
    sc.pooled = scale(sum_rows(x), 1.0 / static_cast<double>(len));
    const Tensor2 z = add_row(matmul(sc.pooled, w.classifier_w), w.classifier_b);
    std::copy(z.row(0).begin(), z.row(0).end(), result.logits.row(s).begin());
  }
  detail::require_finite(result.logits, "forward");
  result.cache.logits = result.logits;
  return result;
}

// Per-sample softmax cross-entropy losses.
inline std::vector<double> cross_entropy(const Tensor2& logits,
                                         const std::vector<std::size_t>& labels) {
  if (labels.size() != logits.rows()) {
    throw ValidationError(detail::concat("cross_entropy: ", logits.rows(), " rows but ",
                                         labels.size(), " labels"));
  }
  std::vector<double> out(labels.size());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    if (labels[r] >= z.size()) throw ValidationError("cross_entropy: label out of range");
    const double m = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp(v - m);
    out[r] = std::log(total) + m - z[labels[r]];
  }
  return out;
}

inline double mean_loss(const Tensor2& logits, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (double v : cross_entropy(logits, labels)) total += v;
  return total / static_cast<double>(labels.size());
}

// Gradient of the mean cross-entropy; one tensor per ModelWeights tensor.
struct GradientSet {
  ModelWeights tensors;
};

inline GradientSet backward(const ModelWeights& w, const ForwardCache& cache,
                            const std::vector<std::size_t>& labels) {
  if (cache.sequences.empty() || cache.weights_fingerprint != fingerprint(w)) {
    throw ValidationError("backward: cache does not come from a forward pass over these weights");
  }
  if (labels.size() != cache.sequences.size() || cache.logits.rows() != labels.size()) {
    throw ValidationError(detail::concat("backward: ", labels.size(), " labels for a cache of ",
                                         cache.sequences.size(), " sequences"));
  }
  const auto& c = w.config;
  for (std::size_t y : labels) {
    if (y >= c.n_classes) throw ValidationError("backward: label out of range");
  }
  GradientSet grad{zeros_like(w)};
  ModelWeights& g = grad.tensors;
  const double inv_batch = 1.0 / static_cast<double>(labels.size());
  const double attn_scale = c.attention_scale();

  for (std::size_t s = 0; s < cache.sequences.size(); ++s) {
    const auto& sc = cache.sequences[s];
    const std::size_t len = sc.tokens.size();

    Tensor2 dz(1, c.n_classes);
    {
      auto z = cache.logits.row(s);
      const double m = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) total += std::exp(z[k] - m);
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double p = std::exp(z[k] - m) / total;
        dz(0, k) = (p - (k == labels[s] ? 1.0 : 0.0)) * inv_batch;
      }
    }
    detail::accumulate(g.classifier_w, matmul(transpose(sc.pooled), dz));
    detail::accumulate(g.classifier_b, dz);
    const Tensor2 dpooled = matmul(dz, transpose(w.classifier_w));
    Tensor2 dx(len, c.d_model);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < c.d_model; ++j)
        dx(i, j) = dpooled(0, j) / static_cast<double>(len);

    for (std::size_t l = w.layers.size(); l-- > 0;) {
      const auto& layer = w.layers[l];
      const auto& lc = sc.layers[l];
      auto& gl = g.layers[l];

      // Feed-forward branch.
      detail::accumulate(gl.w2, matmul(transpose(lc.act), dx));
      detail::accumulate(gl.b2, sum_rows(dx));
      Tensor2 du = matmul(dx, transpose(layer.w2));
      for (std::size_t i = 0; i < du.size(); ++i)
        du.values()[i] *= detail::gelu_grad(lc.pre_act.values()[i]);
      detail::accumulate(gl.w1, matmul(transpose(lc.h2), du));
      detail::accumulate(gl.b1, sum_rows(du));
      const Tensor2 dh2 = matmul(du, transpose(layer.w1));
      Tensor2 dx_mid =
          add(dx, detail::layer_norm_backward(dh2, layer.ln2_gamma, lc.ln2, gl.ln2_gamma,
                                              gl.ln2_beta));

      // Attention branch.
      detail::accumulate(gl.wo, matmul(transpose(lc.concat), dx_mid));
      detail::accumulate(gl.bo, sum_rows(dx_mid));
      const Tensor2 dconcat = matmul(dx_mid, transpose(layer.wo));
      Tensor2 dh1(len, c.d_model);
      std::size_t offset = 0;
      for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const auto& head = layer.heads[h];
        const auto& hc = lc.heads[h];
        auto& gh = gl.heads[h];
        const Tensor2 dout = col_block(dconcat, offset, head.wv.cols());
        offset += head.wv.cols();

        const Tensor2 dv = matmul(transpose(hc.probs), dout);
        const Tensor2 dprobs = matmul(dout, transpose(hc.v));
        Tensor2 dscores(len, len);
        for (std::size_t i = 0; i < len; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += dprobs(i, j) * hc.probs(i, j);
          for (std::size_t j = 0; j < len; ++j)
            dscores(i, j) = hc.probs(i, j) * (dprobs(i, j) - dot) * attn_scale;
        }
        const Tensor2 dq = matmul(dscores, hc.k);
        const Tensor2 dk = matmul(transpose(dscores), hc.q);

        const Tensor2 h1t = transpose(lc.h1);
        detail::accumulate(gh.wq, matmul(h1t, dq));
        detail::accumulate(gh.bq, sum_rows(dq));
        detail::accumulate(gh.wk, matmul(h1t, dk));
        detail::accumulate(gh.bk, sum_rows(dk));
        detail::accumulate(gh.wv, matmul(h1t, dv));
        detail::accumulate(gh.bv, sum_rows(dv));
        detail::accumulate(dh1, matmul(dq, transpose(head.wq)));
        detail::accumulate(dh1, matmul(dk, transpose(head.wk)));
        detail::accumulate(dh1, matmul(dv, transpose(head.wv)));
      }
      dx = add(dx_mid, detail::layer_norm_backward(dh1, layer.ln1_gamma, lc.ln1, gl.ln1_gamma,
                                                   gl.ln1_beta));
    }

    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < c.d_model; ++j) {
        g.token_embedding(sc.tokens[i], j) += dx(i, j);
        g.position_embedding(i, j) += dx(i, j);
      }
    }
  }
  return grad;
}

struct LossAndGradient {
  double loss;
  GradientSet gradient;
};

inline LossAndGradient loss_and_gradient(const ModelWeights& w, const Batch& batch) {
  auto fwd = forward(w, batch);
  const double loss = mean_loss(fwd.logits, batch.labels);
  return {loss, backward(w, fwd.cache, batch.labels)};
}

// w - lr * g. A non-finite gradient refuses the step.
inline ModelWeights sgd_step(const ModelWeights& w, const GradientSet& g, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ValidationError(detail::concat("sgd_step: learning rate must be >= 0, got ", lr));
  }
  auto src = tensor_list(w);
  auto grads = tensor_list(g.tensors);
  if (src.size() != grads.size()) throw ShapeError("sgd_step: gradient layout differs");
  for (const Tensor2* t : grads) {
    for (double v : t->values()) {
      if (!std::isfinite(v)) throw NumericError("sgd_step: non-finite gradient, step refused");
    }
  }
  ModelWeights out = w;
  auto dst = tensor_list(out);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    detail::require_same_shape(*src[i], *grads[i], "sgd_step");
    auto d = dst[i]->values();
    auto gv = grads[i]->values();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] -= lr * gv[j];
  }
  return out;
}

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

// Accuracy uses argmax with ties going to the lower class index.
inline Evaluation evaluate(const ModelWeights& w, const std::vector<Batch>& batches) {
  Evaluation e;
  std::size_t correct = 0;
  double loss_total = 0.0;
  for (const auto& b : batches) {
    const Tensor2 logits = forward(w, b).logits;
    for (double l : cross_entropy(logits, b.labels)) loss_total += l;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      auto z = logits.row(r);
      const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
      if (best == b.labels[r]) ++correct;
    }
    e.samples += b.size();
  }
  if (e.samples == 0) throw ValidationError("evaluate: empty evaluation set");
  e.accuracy = static_cast<double>(correct) / static_cast<double>(e.samples);
  e.mean_loss = loss_total / static_cast<double>(e.samples);
  return e;
}

}  // namespace raffm
