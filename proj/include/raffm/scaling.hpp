#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "raffm/error.hpp"
#include "raffm/nn.hpp"
#include "raffm/rng.hpp"
#include "raffm/tensor.hpp"

namespace raffm {

// One nonnegative score per channel.
class SalienceScores {
 public:
  SalienceScores() = default;
  explicit SalienceScores(std::vector<double> values) : values_(std::move(values)) {
    for (double v : values_) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ValidationError(detail::concat("SalienceScores: invalid score ", v));
      }
    }
  }

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }

  friend bool operator==(const SalienceScores&, const SalienceScores&) = default;

 private:
  std::vector<double> values_;
};

enum class ChannelAxis { rows, cols };

// Sum of |w| over each channel. Column channels are summed top to bottom.
inline SalienceScores salience_l1(const Tensor2& w, ChannelAxis axis = ChannelAxis::cols) {
  if (w.empty()) throw ShapeError("salience_l1: empty tensor " + w.shape_string());
  const bool by_col = axis == ChannelAxis::cols;
  std::vector<double> s(by_col ? w.cols() : w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) s[by_col ? c : r] += std::abs(w(r, c));
  return SalienceScores(std::move(s));
}

// Descending order of salience; equal scores keep their original order.
inline Permutation rank_channels(const SalienceScores& s) {
  if (s.size() == 0) throw ShapeError("rank_channels: no channels");
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return Permutation(std::move(order));
}

// Per query/key channel, the mean of the two column saliences.
inline SalienceScores joint_qk_salience(const Tensor2& wq_head, const Tensor2& wk_head) {
  if (wq_head.cols() != wk_head.cols()) {
    throw ShapeError(detail::concat("joint_qk_salience: wq ", wq_head.shape_string(), " and wk ",
                                    wk_head.shape_string(), " disagree on d_k"));
  }
  const auto sq = salience_l1(wq_head);
  const auto sk = salience_l1(wk_head);
  std::vector<double> s(sq.size());
  for (std::size_t c = 0; c < s.size(); ++c) s[c] = (sq[c] + sk[c]) / 2.0;
  return SalienceScores(std::move(s));
}

struct PrioritizationOptions {
  bool permute_qk = true;
  bool permute_vo = true;
  bool permute_ffn = true;

  friend bool operator==(const PrioritizationOptions&, const PrioritizationOptions&) = default;
};

// Permutations that were (or are to be) applied to a model. Entries for
// families that were not permuted are identities.
struct PrioritizationRecord {
  struct Layer {
    std::vector<Permutation> qk;  // per head, over the head's query/key columns
    std::vector<Permutation> vo;  // per head, over W^v columns and the matching W^o rows
    Permutation ffn;              // over W1 columns and W2 rows
  };
  std::vector<Layer> layers;
  PrioritizationOptions options;
};

inline PrioritizationRecord identity_record(const ModelWeights& w) {
  PrioritizationRecord rec;
  rec.options = {false, false, false};
  for (const auto& layer : w.layers) {
    PrioritizationRecord::Layer lr;
    for (const auto& head : layer.heads) {
      lr.qk.push_back(Permutation::identity(head.wq.cols()));
      lr.vo.push_back(Permutation::identity(head.wv.cols()));
    }
    lr.ffn = Permutation::identity(layer.w1.cols());
    rec.layers.push_back(std::move(lr));
  }
  return rec;
}

// Applies a record's permutations with their mirrored consumer permutations,
// which leaves the network function unchanged.
inline ModelWeights apply_permutations(const ModelWeights& w, const PrioritizationRecord& rec) {
  if (rec.layers.size() != w.layers.size()) {
    throw ShapeError("apply_permutations: record layer count differs from model");
  }
  ModelWeights out = w;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto& layer = out.layers[l];
    const auto& lr = rec.layers[l];
    if (lr.qk.size() != layer.heads.size() || lr.vo.size() != layer.heads.size()) {
      throw ShapeError("apply_permutations: record head count differs from model");
    }
    std::vector<Tensor2> wo_blocks;
    std::size_t offset = 0;
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      auto& head = layer.heads[h];
      head.wq = permute_cols(head.wq, lr.qk[h]);
      head.bq = permute_cols(head.bq, lr.qk[h]);
      head.wk = permute_cols(head.wk, lr.qk[h]);
      head.bk = permute_cols(head.bk, lr.qk[h]);
      const std::size_t v = head.wv.cols();
      head.wv = permute_cols(head.wv, lr.vo[h]);
      head.bv = permute_cols(head.bv, lr.vo[h]);
      wo_blocks.push_back(permute_rows(row_block(layer.wo, offset, v), lr.vo[h]));
      offset += v;
    }
    layer.wo = concat_rows(wo_blocks);
    layer.w1 = permute_cols(layer.w1, lr.ffn);
    layer.b1 = permute_cols(layer.b1, lr.ffn);
    layer.w2 = permute_rows(layer.w2, lr.ffn);
  }
  return out;
}

struct PrioritizedModel {
  ModelWeights weights;
  PrioritizationRecord record;
};

// Moves the most salient channels of each enabled family to the front. Query
// and key columns of a head share one permutation ranked by their joint
// salience; value columns and FFN hidden units are ranked by their own column
// salience and mirrored on the rows of W^o and W2.
inline PrioritizedModel prioritize_model(const ModelWeights& w, const PrioritizationOptions& opts) {
  validate_weights(w);
  PrioritizationRecord rec = identity_record(w);
  rec.options = opts;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    auto& lr = rec.layers[l];
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const auto& head = layer.heads[h];
      if (opts.permute_qk) lr.qk[h] = rank_channels(joint_qk_salience(head.wq, head.wk));
      if (opts.permute_vo) lr.vo[h] = rank_channels(salience_l1(head.wv));
    }
    if (opts.permute_ffn) lr.ffn = rank_channels(salience_l1(layer.w1));
  }
  ModelWeights permuted = apply_permutations(w, rec);
  return {std::move(permuted), std::move(rec)};
}

enum class PermuteTarget { query_and_key, query_only };

// Max relative change in attention scores when the columns of W^q (and W^k,
// unless only the query side is requested) are permuted by p. The query-only
// variant is a negative control: it should change the scores.
inline double verify_qk_invariance(const Tensor2& wq, const Tensor2& wk, const Tensor2& x,
                              const Permutation& p,
                              PermuteTarget target = PermuteTarget::query_and_key) {
  if (wq.rows() != x.cols() || wk.rows() != x.cols() || wq.cols() != wk.cols()) {
    throw ShapeError(detail::concat("verify_qk_invariance: x ", x.shape_string(), ", wq ",
                                    wq.shape_string(), ", wk ", wk.shape_string()));
  }
  if (p.size() != wq.cols()) {
    throw ShapeError(detail::concat("verify_qk_invariance: permutation of length ", p.size(),
                                    " for d_k=", wq.cols()));
  }
  const Tensor2 before = attention_scores(wq, wk, x);
  const Tensor2 wq2 = permute_cols(wq, p);
  const Tensor2 wk2 = target == PermuteTarget::query_and_key ? permute_cols(wk, p) : wk;
  return max_relative_diff(before, attention_scores(wq2, wk2, x));
}

// Per-layer widths of a sub-model.
struct HeadWidths {
  std::size_t qk_width = 1;
  std::size_t v_width = 1;
  friend bool operator==(const HeadWidths&, const HeadWidths&) = default;
};

struct LayerWidths {
  std::size_t ffn_width = 1;
  std::vector<HeadWidths> heads;
  friend bool operator==(const LayerWidths&, const LayerWidths&) = default;
};

struct SubmodelSpec {
  std::vector<LayerWidths> layers;

  static SubmodelSpec full(const ModelConfig& c) {
    SubmodelSpec s;
    s.layers.assign(c.n_layers, LayerWidths{c.d_ff, std::vector<HeadWidths>(
                                                        c.n_heads, HeadWidths{c.d_k, c.d_v})});
    return s;
  }

  // The widths a set of (possibly sliced) weights currently has.
  static SubmodelSpec of(const ModelWeights& w) {
    SubmodelSpec s;
    for (const auto& layer : w.layers) {
      LayerWidths lw{layer.w1.cols(), {}};
      for (const auto& head : layer.heads) lw.heads.push_back({head.wq.cols(), head.wv.cols()});
      s.layers.push_back(std::move(lw));
    }
    return s;
  }

  // Every width with the same ratio applied.
  static SubmodelSpec uniform(const ModelConfig& c, double ratio);

  void validate(const ModelConfig& c) const {
    if (layers.size() != c.n_layers) {
      throw ShapeError(detail::concat("SubmodelSpec: ", layers.size(), " layers, model has ",
                                      c.n_layers));
    }
    auto check = [](std::size_t v, std::size_t max, const char* what, std::size_t l) {
      if (v < 1 || v > max) {
        throw ShapeError(detail::concat("SubmodelSpec: layer ", l, " ", what, "=", v,
                                        " outside [1, ", max, "]"));
      }
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      check(layers[l].ffn_width, c.d_ff, "ffn_width", l);
      if (layers[l].heads.size() != c.n_heads) {
        throw ShapeError(detail::concat("SubmodelSpec: layer ", l, " has ",
                                        layers[l].heads.size(), " heads, model has ", c.n_heads));
      }
      for (const auto& h : layers[l].heads) {
        check(h.qk_width, c.d_k, "qk_width", l);
        check(h.v_width, c.d_v, "v_width", l);
      }
    }
  }

  friend bool operator==(const SubmodelSpec&, const SubmodelSpec&) = default;
};

struct ResourceBudget {
  std::size_t max_params = 0;
};

// ceil(ratio * max), at least 1. The small slack absorbs products such as
// 0.7 * 10 landing one ulp above an integer.
inline std::size_t width_for_ratio(double ratio, std::size_t max) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError(detail::concat("width ratio must lie in (0, 1], got ", ratio));
  }
  const double raw = std::ceil(ratio * static_cast<double>(max) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(raw), 1, max);
}

inline SubmodelSpec SubmodelSpec::uniform(const ModelConfig& c, double ratio) {
  SubmodelSpec s = full(c);
  for (auto& l : s.layers) {
    l.ffn_width = width_for_ratio(ratio, c.d_ff);
    for (auto& h : l.heads) h = {width_for_ratio(ratio, c.d_k), width_for_ratio(ratio, c.d_v)};
  }
  return s;
}

// Exact trainable-parameter count of the sub-model the spec selects.
inline std::size_t param_count(const SubmodelSpec& spec, const ModelConfig& c) {
  spec.validate(c);
  const std::size_t d = c.d_model;
  std::size_t n = c.vocab_size * d + c.max_seq * d;
  for (const auto& l : spec.layers) {
    n += 4 * d;  // two layer norms
    std::size_t v_total = 0;
    for (const auto& h : l.heads) {
      n += 2 * (d + 1) * h.qk_width + (d + 1) * h.v_width;
      v_total += h.v_width;
    }
    n += v_total * d + d;                       // W^o, b^o
    n += (d + 1) * l.ffn_width + l.ffn_width * d + d;  // W1, b1, W2, b2
  }
  n += d * c.n_classes + c.n_classes;
  return n;
}

inline void validate_ratio_set(const std::vector<double>& ratio_set) {
  if (ratio_set.empty()) throw ConfigError("ratio_set is empty");
  for (double r : ratio_set) {
    if (!(r > 0.0 && r <= 1.0)) {
      throw ConfigError(detail::concat("ratio_set entry ", r, " outside (0, 1]"));
    }
  }
}

inline SubmodelSpec minimum_spec(const ModelConfig& c, const std::vector<double>& ratio_set) {
  validate_ratio_set(ratio_set);
  return SubmodelSpec::uniform(c, *std::min_element(ratio_set.begin(), ratio_set.end()));
}

// Throws ConfigError when even the smallest reachable sub-model exceeds the budget.
inline void require_feasible(const ModelConfig& c, const ResourceBudget& budget,
                             const std::vector<double>& ratio_set) {
  const std::size_t floor = param_count(minimum_spec(c, ratio_set), c);
  if (budget.max_params < floor) {
    throw ConfigError(detail::concat("budget of ", budget.max_params,
                                     " parameters is below the smallest sub-model (", floor, ")"));
  }
}

inline constexpr int kMaxSpecAttempts = 100;

// Draws every prunable width independently as ceil(ratio * max) with ratio
// uniform over ratio_set, resampling until the budget holds. After
// kMaxSpecAttempts misses the all-minimum spec is returned.
inline SubmodelSpec sample_submodel_spec(const ModelConfig& c, const ResourceBudget& budget,
                                         const std::vector<double>& ratio_set, RngStream& rng) {
  require_feasible(c, budget, ratio_set);
  auto draw = [&](std::size_t max) {
    return width_for_ratio(ratio_set[rng.uniform_index(ratio_set.size())], max);
  };
  for (int attempt = 0; attempt < kMaxSpecAttempts; ++attempt) {
    SubmodelSpec s = SubmodelSpec::full(c);
    for (auto& l : s.layers) {
      for (auto& h : l.heads) {
        h.qk_width = draw(c.d_k);
        h.v_width = draw(c.d_v);
      }
      l.ffn_width = draw(c.d_ff);
    }
    if (param_count(s, c) <= budget.max_params) return s;
  }
  return minimum_spec(c, ratio_set);
}

// Keeps the leading channels of every prunable family. Applied to prioritized
// weights, the kept channels are the most salient ones.
inline ModelWeights extract_submodel(const ModelWeights& w, const SubmodelSpec& spec) {
  validate_weights(w);
  spec.validate(w.config);
  const SubmodelSpec have = SubmodelSpec::of(w);
  ModelWeights out = w;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto& layer = out.layers[l];
    const auto& want = spec.layers[l];
    if (want.ffn_width > have.layers[l].ffn_width) {
      throw ShapeError(detail::concat("extract_submodel: layer ", l, " ffn_width ",
                                      want.ffn_width, " exceeds current width ",
                                      have.layers[l].ffn_width));
    }
    std::vector<Tensor2> wo_blocks;
    std::size_t offset = 0;
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      auto& head = layer.heads[h];
      const auto& hw = want.heads[h];
      const std::size_t v_have = head.wv.cols();
      if (hw.qk_width > head.wq.cols() || hw.v_width > v_have) {
        throw ShapeError(detail::concat("extract_submodel: layer ", l, " head ", h,
                                        " widths exceed the source model"));
      }
      head.wq = slice_cols(head.wq, hw.qk_width);
      head.bq = slice_cols(head.bq, hw.qk_width);
      head.wk = slice_cols(head.wk, hw.qk_width);
      head.bk = slice_cols(head.bk, hw.qk_width);
      head.wv = slice_cols(head.wv, hw.v_width);
      head.bv = slice_cols(head.bv, hw.v_width);
      wo_blocks.push_back(slice_rows(row_block(layer.wo, offset, v_have), hw.v_width));
      offset += v_have;
    }
    layer.wo = concat_rows(wo_blocks);
    layer.w1 = slice_cols(layer.w1, want.ffn_width);
    layer.b1 = slice_cols(layer.b1, want.ffn_width);
    layer.w2 = slice_rows(layer.w2, want.ffn_width);
  }
  return out;
}

}  // namespace raffm
