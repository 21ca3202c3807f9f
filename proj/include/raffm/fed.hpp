#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "raffm/error.hpp"
#include "raffm/nn.hpp"
#include "raffm/rng.hpp"
#include "raffm/scaling.hpp"

namespace raffm {

// Named RNG streams of a federation run. Each round and each client derive
// their own child stream, so execution order never changes a draw.
namespace streams {
inline constexpr std::uint64_t init = 0x1;
inline constexpr std::uint64_t participation = 0x2;
inline constexpr std::uint64_t spec_sampling = 0x3;

inline RngStream init_stream(std::uint64_t master_seed) { return RngStream(master_seed, init); }

inline RngStream participation_stream(std::uint64_t master_seed, std::size_t round) {
  return RngStream(master_seed, participation).derive(round);
}

inline RngStream spec_stream(std::uint64_t master_seed, std::size_t round, std::size_t client) {
  return RngStream(master_seed, spec_sampling).derive(round).derive(client);
}
}  // namespace streams

inline constexpr std::size_t kBytesPerParam = 8;

enum class Aggregation { coverage_average };

struct ClientProfile {
  std::size_t client_id = 0;
  ResourceBudget budget;
  std::vector<Batch> shard;
  std::size_t local_epochs = 1;
  double lr = 0.05;
};

struct FederationConfig {
  std::size_t n_clients = 10;
  double participation_rate = 0.1;
  std::size_t rounds = 1;
  std::vector<double> ratio_set{1.0};
  // Client i gets budget_fractions[i % size] of the full parameter count.
  std::vector<double> budget_fractions{1.0};
  std::uint64_t master_seed = 0;
  Aggregation aggregation = Aggregation::coverage_average;
  std::size_t eval_every = 1;  // 0 disables periodic evaluation
  std::size_t local_epochs = 1;
  double lr = 0.05;
  PrioritizationOptions spp;
  std::size_t threads = 0;  // 0 or 1 trains clients serially

  void validate() const {
    if (n_clients == 0) throw ConfigError("federation: n_clients must be >= 1");
    if (!(participation_rate > 0.0 && participation_rate <= 1.0)) {
      throw ConfigError(detail::concat("federation: participation_rate ", participation_rate,
                                       " outside (0, 1]"));
    }
    validate_ratio_set(ratio_set);
    if (budget_fractions.empty()) throw ConfigError("federation: budget_fractions is empty");
    for (double f : budget_fractions) {
      if (!(f > 0.0 && f <= 1.0)) {
        throw ConfigError(detail::concat("federation: budget fraction ", f, " outside (0, 1]"));
      }
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("federation: lr must be >= 0");
  }
};

struct ClientRoundInfo {
  std::size_t client_id = 0;
  SubmodelSpec spec;
  std::size_t param_count = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t bytes_up = 0;  // zero when the client diverged and sent nothing back
  bool diverged = false;

  friend bool operator==(const ClientRoundInfo&, const ClientRoundInfo&) = default;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ClientRoundInfo> clients;
  std::uint64_t bytes_down = 0;
  std::uint64_t bytes_up = 0;
  std::optional<Evaluation> eval;
  double wall_ms = 0.0;

  std::vector<std::size_t> participant_ids() const {
    std::vector<std::size_t> ids;
    for (const auto& c : clients) ids.push_back(c.client_id);
    return ids;
  }
};

// Equality of everything but wall time.
inline bool same_outcome(const RoundRecord& a, const RoundRecord& b) {
  auto eval_eq = [](const std::optional<Evaluation>& x, const std::optional<Evaluation>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || (x->accuracy == y->accuracy && x->mean_loss == y->mean_loss &&
                  x->samples == y->samples);
  };
  return a.round == b.round && a.clients == b.clients && a.bytes_down == b.bytes_down &&
         a.bytes_up == b.bytes_up && eval_eq(a.eval, b.eval);
}

struct FederationState {
  ModelWeights global;
  std::size_t round = 0;
  std::vector<ClientProfile> clients;
  std::vector<Batch> eval_set;
  std::vector<RoundRecord> log;
};

// ceil(rate * n) distinct ids drawn uniformly without replacement, ascending.
inline std::vector<std::size_t> select_participants(std::size_t n_clients, double rate,
                                                    RngStream& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) {
    throw ValidationError(detail::concat("select_participants: rate ", rate, " outside (0, 1]"));
  }
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n_clients) - 1e-9)), 1,
      n_clients);
  std::vector<std::size_t> ids(n_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(ids[i], ids[i + rng.uniform_index(n_clients - i)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// local_epochs passes of plain SGD over the shard, one step per batch.
// A non-finite loss raises NumericError.
inline ModelWeights local_train(const ModelWeights& sub, const ClientProfile& profile) {
  if (profile.shard.empty()) {
    throw ValidationError(detail::concat("client ", profile.client_id, " has an empty shard"));
  }
  ModelWeights w = sub;
  if (profile.lr == 0.0) return w;
  for (std::size_t epoch = 0; epoch < profile.local_epochs; ++epoch) {
    for (const auto& batch : profile.shard) {
      auto [loss, grad] = loss_and_gradient(w, batch);
      if (!std::isfinite(loss)) {
        throw NumericError(detail::concat("client ", profile.client_id, ": non-finite loss"));
      }
      w = sgd_step(w, grad, profile.lr);
    }
  }
  return w;
}

struct ClientUpdate {
  std::size_t client_id = 0;
  SubmodelSpec spec;
  ModelWeights weights;
};

namespace detail {

inline std::vector<std::size_t> leading_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Global W^o rows held by a sub-model: the leading v_width rows of each head's block.
inline std::vector<std::size_t> wo_row_indices(const LayerWidths& lw, std::size_t d_v) {
  std::vector<std::size_t> rows;
  for (std::size_t h = 0; h < lw.heads.size(); ++h)
    for (std::size_t j = 0; j < lw.heads[h].v_width; ++j) rows.push_back(h * d_v + j);
  return rows;
}

}  // namespace detail

// Coverage averaging: each global coordinate becomes the mean of the values
// reported by the updates whose spec covers it, summed in update order.
// Coordinates no update covers keep their global value.
inline ModelWeights aggregate(const ModelWeights& global, const std::vector<ClientUpdate>& updates) {
  validate_weights(global);
  const auto& cfg = global.config;
  if (!(SubmodelSpec::of(global) == SubmodelSpec::full(cfg))) {
    throw AggregationError("aggregate: global model must be full width");
  }
  ModelWeights sums = zeros_like(global);
  ModelWeights counts = zeros_like(global);
  auto sum_list = tensor_list(sums);
  auto count_list = tensor_list(counts);

  for (const auto& u : updates) {
    try {
      if (!(u.weights.config == cfg)) throw ShapeError("model config differs from global");
      u.spec.validate(cfg);
      validate_weights(u.weights);
      if (!(SubmodelSpec::of(u.weights) == u.spec)) {
        throw ShapeError("weights do not have the widths of the reported spec");
      }
    } catch (const Error& e) {
      throw AggregationError(detail::concat("aggregate: update from client ", u.client_id,
                                            " rejected: ", e.what()));
    }
    std::size_t layer = 0;
    std::size_t i = 0;
    visit_tensors(u.weights, [&](const std::string& name, const Tensor2& t) {
      const bool is_wo = name.ends_with(".attn.wo");
      const auto rows = is_wo ? detail::wo_row_indices(u.spec.layers[layer++], cfg.d_v)
                              : detail::leading_indices(t.rows());
      Tensor2& sum = *sum_list[i];
      Tensor2& count = *count_list[i];
      for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t c = 0; c < t.cols(); ++c) {
          sum(rows[r], c) += t(r, c);
          count(rows[r], c) += 1.0;
        }
      }
      ++i;
    });
  }

  ModelWeights out = global;
  auto out_list = tensor_list(out);
  for (std::size_t i = 0; i < out_list.size(); ++i) {
    auto o = out_list[i]->values();
    auto s = sum_list[i]->values();
    auto n = count_list[i]->values();
    for (std::size_t j = 0; j < o.size(); ++j) {
      if (n[j] > 0.0) o[j] = s[j] / n[j];
    }
  }
  return out;
}

// Builds client profiles, assigning budgets round-robin from budget_fractions.
inline std::vector<ClientProfile> make_profiles(const FederationConfig& cfg,
                                                const ModelConfig& model_cfg,
                                                std::vector<std::vector<Batch>> shards) {
  cfg.validate();
  if (shards.size() != cfg.n_clients) {
    throw ConfigError(detail::concat("federation: ", shards.size(), " shards for ",
                                     cfg.n_clients, " clients"));
  }
  const std::size_t full = param_count(SubmodelSpec::full(model_cfg), model_cfg);
  std::vector<ClientProfile> out;
  for (std::size_t i = 0; i < cfg.n_clients; ++i) {
    ClientProfile p;
    p.client_id = i;
    const double frac = cfg.budget_fractions[i % cfg.budget_fractions.size()];
    p.budget.max_params = static_cast<std::size_t>(std::floor(frac * static_cast<double>(full)));
    require_feasible(model_cfg, p.budget, cfg.ratio_set);
    if (shards[i].empty()) throw ConfigError(detail::concat("client ", i, " has no data"));
    for (const auto& b : shards[i]) b.validate(model_cfg);
    p.shard = std::move(shards[i]);
    p.local_epochs = cfg.local_epochs;
    p.lr = cfg.lr;
    out.push_back(std::move(p));
  }
  return out;
}

struct RoundOutcome {
  FederationState state;
  RoundRecord record;
};

// One communication round: prioritize the global model, select participants,
// sample a budget-compliant spec per participant, extract and dispatch
// sub-models, train locally, and aggregate the survivors.
inline RoundOutcome run_round(FederationState state, const FederationConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  const auto& model_cfg = state.global.config;
  const std::size_t t = state.round;
  RoundRecord rec;
  rec.round = t + 1;

  const auto& spp = cfg.spp;
  if (spp.permute_qk || spp.permute_vo || spp.permute_ffn) {
    state.global = prioritize_model(state.global, spp).weights;
  }

  RngStream part_rng = streams::participation_stream(cfg.master_seed, t);
  const auto ids = select_participants(state.clients.size(), cfg.participation_rate, part_rng);

  std::vector<ClientUpdate> dispatched;
  for (std::size_t id : ids) {
    const auto& profile = state.clients.at(id);
    RngStream spec_rng = streams::spec_stream(cfg.master_seed, t, id);
    SubmodelSpec spec = sample_submodel_spec(model_cfg, profile.budget, cfg.ratio_set, spec_rng);
    const std::size_t params = param_count(spec, model_cfg);
    if (params > profile.budget.max_params) {
      throw ConfigError(detail::concat("client ", id, " spec exceeds its budget"));
    }
    ClientRoundInfo info;
    info.client_id = id;
    info.spec = spec;
    info.param_count = params;
    info.bytes_down = params * kBytesPerParam;
    rec.clients.push_back(std::move(info));
    dispatched.push_back({id, std::move(spec), extract_submodel(state.global, rec.clients.back().spec)});
  }

  // Local training writes only to its own slot; the pool size never affects results.
  std::vector<std::optional<ModelWeights>> trained(dispatched.size());
  std::vector<std::exception_ptr> failures(dispatched.size());
  auto train_one = [&](std::size_t i) {
    try {
      trained[i] = local_train(dispatched[i].weights, state.clients.at(dispatched[i].client_id));
    } catch (const NumericError&) {
      trained[i].reset();
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(cfg.threads, dispatched.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < dispatched.size(); ++i) train_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < workers; ++k) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < dispatched.size(); i = next++) train_one(i);
      });
    }
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  std::vector<ClientUpdate> updates;
  for (std::size_t i = 0; i < dispatched.size(); ++i) {
    auto& info = rec.clients[i];
    if (!trained[i]) {
      info.diverged = true;
      continue;
    }
    info.bytes_up = info.param_count * kBytesPerParam;
    updates.push_back({dispatched[i].client_id, dispatched[i].spec, std::move(*trained[i])});
  }
  for (const auto& info : rec.clients) {
    rec.bytes_down += info.bytes_down;
    rec.bytes_up += info.bytes_up;
  }
  if (!updates.empty()) state.global = aggregate(state.global, updates);

  state.round = t + 1;
  const bool last = cfg.rounds > 0 && state.round == cfg.rounds;
  if (!state.eval_set.empty() && cfg.eval_every > 0 && (state.round % cfg.eval_every == 0 || last)) {
    rec.eval = evaluate(state.global, state.eval_set);
  }
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
                    .count();
  state.log.push_back(rec);
  return {std::move(state), std::move(rec)};
}

struct FederatedData {
  std::vector<std::vector<Batch>> shards;  // one per client
  std::vector<Batch> eval_set;
};

struct FederationResult {
  ModelWeights weights;
  std::vector<RoundRecord> log;
};

// Initial weights come from the master seed's init stream.
inline FederationState make_initial_state(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                          FederatedData data) {
  model_cfg.validate();
  FederationState state;
  state.clients = make_profiles(cfg, model_cfg, std::move(data.shards));
  for (const auto& b : data.eval_set) b.validate(model_cfg);
  state.eval_set = std::move(data.eval_set);
  state.global = init_weights(model_cfg, streams::init_stream(cfg.master_seed));
  return state;
}

inline FederationResult run_federation(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                       FederatedData data) {
  FederationState state = make_initial_state(cfg, model_cfg, std::move(data));
  for (std::size_t t = 0; t < cfg.rounds; ++t) state = run_round(std::move(state), cfg).state;
  return {std::move(state.global), std::move(state.log)};
}

struct TrafficSummary {
  double mean_bytes_per_client_round = 0.0;  // up + down, averaged over participations
  std::uint64_t total_bytes = 0;
  std::size_t client_rounds = 0;
};

inline TrafficSummary measure_traffic(const std::vector<RoundRecord>& log) {
  if (log.empty()) throw ValidationError("measure_traffic: empty log");
  TrafficSummary s;
  for (const auto& r : log) {
    for (const auto& c : r.clients) {
      s.total_bytes += c.bytes_down + c.bytes_up;
      ++s.client_rounds;
    }
  }
  if (s.client_rounds > 0) {
    s.mean_bytes_per_client_round =
        static_cast<double>(s.total_bytes) / static_cast<double>(s.client_rounds);
  }
  return s;
}

}  // namespace raffm
