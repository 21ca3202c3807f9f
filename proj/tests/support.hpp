#pragma once

// Generators and reference implementations shared by the unit, property and
// acceptance tests. The references are written independently of the library
// code they check: plain loops, no shared helpers beyond the data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "raffm/raffm.hpp"

namespace raffm::testing {

inline Tensor2 random_tensor(std::size_t rows, std::size_t cols, RngStream& rng, double bound = 1.0) {
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

inline Permutation random_permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.uniform_index(i)]);
  return Permutation(std::move(p));
}

inline std::size_t draw_between(RngStream& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.uniform_index(hi - lo + 1);
}

// Small model shapes; every dimension at most 4 unless widened by the caller.
inline ModelConfig random_config(RngStream& rng, std::size_t max_dim = 4) {
  ModelConfig c;
  c.n_layers = draw_between(rng, 1, 2);
  c.d_model = draw_between(rng, 1, max_dim);
  c.n_heads = draw_between(rng, 1, 3);
  c.d_k = draw_between(rng, 1, max_dim);
  c.d_v = draw_between(rng, 1, max_dim);
  c.d_ff = draw_between(rng, 1, max_dim);
  c.vocab_size = draw_between(rng, 1, max_dim);
  c.n_classes = draw_between(rng, 2, max_dim);
  c.max_seq = draw_between(rng, 1, max_dim);
  return c;
}

inline SubmodelSpec random_spec(const ModelConfig& c, RngStream& rng) {
  SubmodelSpec s;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWidths lw;
    lw.ffn_width = draw_between(rng, 1, c.d_ff);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      lw.heads.push_back({draw_between(rng, 1, c.d_k), draw_between(rng, 1, c.d_v)});
    }
    s.layers.push_back(std::move(lw));
  }
  return s;
}

inline ModelWeights random_weights(const ModelConfig& c, RngStream& rng) {
  ModelWeights w = zero_weights(c);
  visit_tensors(w, [&](const std::string&, Tensor2& t) {
    for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  });
  return w;
}

inline Batch random_batch(const ModelConfig& c, std::size_t n, RngStream& rng) {
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> seq(draw_between(rng, 1, c.max_seq));
    for (auto& t : seq) t = rng.uniform_index(c.vocab_size);
    b.sequences.push_back(std::move(seq));
    b.labels.push_back(rng.uniform_index(c.n_classes));
  }
  return b;
}

// Central finite differences of the mean loss, compared per tensor as
// max |analytic - numeric| / max(max |numeric|, floor). The floor matters for
// tensors whose true gradient is exactly zero, such as the key bias (a shift
// shared by a whole row of scores cancels in the softmax).
inline std::map<std::string, double> gradient_check(const ModelWeights& w, const Batch& batch,
                                                    double eps = 1e-5, double floor = 1e-4) {
  const GradientSet g = loss_and_gradient(w, batch).gradient;
  std::map<std::string, Tensor2> analytic;
  visit_tensors(g.tensors, [&](const std::string& name, const Tensor2& t) { analytic.emplace(name, t); });
  std::map<std::string, double> errors;
  ModelWeights probe = w;
  visit_tensors(probe, [&](const std::string& name, Tensor2& t) {
    const Tensor2& a = analytic.at(name);
    double worst = 0.0;
    double scale = floor;
    std::vector<double> numeric(t.size());
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + eps;
      const double up = mean_loss(forward(probe, batch).logits, batch.labels);
      v[i] = keep - eps;
      const double down = mean_loss(forward(probe, batch).logits, batch.labels);
      v[i] = keep;
      numeric[i] = (up - down) / (2.0 * eps);
      scale = std::max(scale, std::abs(numeric[i]));
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      worst = std::max(worst, std::abs(a.values()[i] - numeric[i]) / scale);
    }
    errors[name] = worst;
  });
  return errors;
}

// Per-coordinate coverage average written as a direct loop over global
// coordinates: for each coordinate, ask every update whether its spec keeps
// it and where it sits in the sliced tensor.
inline ModelWeights brute_force_aggregate(const ModelWeights& global,
                                          const std::vector<ClientUpdate>& updates) {
  const ModelConfig& c = global.config;
  std::vector<std::map<std::string, const Tensor2*>> sub(updates.size());
  for (std::size_t u = 0; u < updates.size(); ++u) {
    visit_tensors(updates[u].weights,
                  [&](const std::string& name, const Tensor2& t) { sub[u][name] = &t; });
  }
  ModelWeights out = global;
  visit_tensors(out, [&](const std::string& name, Tensor2& t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t col = 0; col < t.cols(); ++col) {
        double sum = 0.0;
        int n = 0;
        for (std::size_t u = 0; u < updates.size(); ++u) {
          const SubmodelSpec& s = updates[u].spec;
          std::size_t rr = r;
          std::size_t cc = col;
          bool kept = true;
          if (name.rfind("layer", 0) == 0) {
            const std::size_t l = std::stoul(name.substr(5, name.find('.') - 5));
            const LayerWidths& lw = s.layers[l];
            const auto head_at = name.find(".head");
            if (head_at != std::string::npos) {
              const std::size_t h = std::stoul(name.substr(head_at + 5, name.rfind('.') - head_at - 5));
              const std::string leaf = name.substr(name.rfind('.') + 1);
              const std::size_t width =
                  (leaf == "wv" || leaf == "bv") ? lw.heads[h].v_width : lw.heads[h].qk_width;
              kept = col < width;
            } else if (name.ends_with("attn.wo")) {
              const std::size_t h = r / c.d_v;
              const std::size_t j = r % c.d_v;
              kept = j < lw.heads[h].v_width;
              rr = j;
              for (std::size_t k = 0; k < h; ++k) rr += lw.heads[k].v_width;
            } else if (name.ends_with("ffn.w1") || name.ends_with("ffn.b1")) {
              kept = col < lw.ffn_width;
            } else if (name.ends_with("ffn.w2")) {
              kept = r < lw.ffn_width;
            }
          }
          if (!kept) continue;
          sum += (*sub[u].at(name))(rr, cc);
          ++n;
        }
        if (n > 0) t(r, col) = sum / n;
      }
    }
  });
  return out;
}

// Plain FedAvg written from scratch: same seeds, full-width models, no
// permutation, per-coordinate mean of the participants' local models.
inline ModelWeights reference_fedavg(const FederationConfig& cfg, const ModelConfig& mc,
                                     const std::vector<std::vector<Batch>>& shards) {
  ModelWeights global = init_weights(mc, streams::init_stream(cfg.master_seed));
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    RngStream rng = streams::participation_stream(cfg.master_seed, t);
    const auto ids = select_participants(cfg.n_clients, cfg.participation_rate, rng);
    std::vector<ModelWeights> locals;
    for (std::size_t id : ids) {
      ModelWeights w = global;
      for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        for (const Batch& b : shards[id]) {
          const GradientSet g = loss_and_gradient(w, b).gradient;
          auto wl = tensor_list(w);
          auto gl = tensor_list(g.tensors);
          for (std::size_t i = 0; i < wl.size(); ++i) {
            auto wv = wl[i]->values();
            auto gv = gl[i]->values();
            for (std::size_t j = 0; j < wv.size(); ++j) wv[j] -= cfg.lr * gv[j];
          }
        }
      }
      locals.push_back(std::move(w));
    }
    ModelWeights sum = zeros_like(global);
    auto sl = tensor_list(sum);
    for (auto& w : locals) {
      auto wl = tensor_list(w);
      for (std::size_t i = 0; i < sl.size(); ++i) {
        auto sv = sl[i]->values();
        auto wv = wl[i]->values();
        for (std::size_t j = 0; j < sv.size(); ++j) sv[j] += wv[j];
      }
    }
    auto gl = tensor_list(global);
    for (std::size_t i = 0; i < gl.size(); ++i) {
      auto gv = gl[i]->values();
      auto sv = sl[i]->values();
      for (std::size_t j = 0; j < gv.size(); ++j) gv[j] = sv[j] / static_cast<double>(locals.size());
    }
  }
  return global;
}

// Largest L1 mass any k columns can hold, by enumerating all subsets.
// Column masses are added largest first so equal subsets sum identically.
inline double best_subset_mass(const std::vector<double>& col_mass, std::size_t k) {
  const std::size_t n = col_mass.size();
  double best = -1.0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    std::vector<double> picked;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) picked.push_back(col_mass[i]);
    std::sort(picked.begin(), picked.end(), std::greater<>());
    double s = 0.0;
    for (double v : picked) s += v;
    best = std::max(best, s);
  }
  return best;
}

inline std::vector<double> column_l1(const Tensor2& t) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[c] += std::abs(t(r, c));
  return m;
}

// Mass of the leading k columns, summed largest first.
inline double leading_mass(const std::vector<double>& col_mass, std::size_t k) {
  std::vector<double> picked(col_mass.begin(), col_mass.begin() + k);
  std::sort(picked.begin(), picked.end(), std::greater<>());
  double s = 0.0;
  for (double v : picked) s += v;
  return s;
}

// Majority-token shards for small federation runs.
inline FederatedData small_federated_data(std::size_t n_clients, std::uint64_t seed,
                                          std::size_t samples = 200, std::size_t batch = 8) {
  TaskSpec task{.kind = TaskKind::majority_token, .vocab_size = 4, .seq_len = 5, .n_classes = 4,
                .n_samples = samples, .seed = seed};
  const Dataset train = generate(task);
  task.n_samples = 64;
  task.seed = seed + 1;
  const Dataset test = generate(task);
  FederatedData fd;
  for (const auto& idx : dirichlet_partition(train.labels, {n_clients, 1.0, seed}))
    fd.shards.push_back(make_batches(train, idx, batch));
  fd.eval_set = make_batches(test, 32);
  return fd;
}

inline ModelConfig small_model_config() {
  return ModelConfig{.n_layers = 1, .d_model = 8, .n_heads = 2, .d_k = 4, .d_v = 4,
                     .d_ff = 16, .vocab_size = 4, .n_classes = 4, .max_seq = 5};
}

}  // namespace raffm::testing
