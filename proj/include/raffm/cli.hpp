#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "raffm/checkpoint.hpp"
#include "raffm/data.hpp"
#include "raffm/error.hpp"
#include "raffm/fed.hpp"
#include "raffm/nn.hpp"
#include "raffm/scaling.hpp"

namespace raffm::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kIo = 3 };

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return kIo;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const BoundsError*>(&e) || dynamic_cast<const FormatError*>(&e)) {
    return kValidation;
  }
  return kRuntime;
}

// Everything a `run` needs. Model vocab, classes and sequence length follow the task.
struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  std::size_t n_test = 500;
  PartitionSpec partition;
  FederationConfig federation;
  std::size_t batch_size = 16;
  std::string output_dir;
};

namespace detail {

inline std::size_t line_at(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + byte, '\n'));
}

// Line of the last key in path, found by scanning for each quoted key in turn.
inline std::size_t line_of(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& key : path) {
    const auto found = text.find("\"" + key + "\"", pos);
    if (found == std::string::npos) break;
    pos = found;
  }
  return line_at(text, pos);
}

class ConfigReader {
 public:
  ConfigReader(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {
    try {
      root_ = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(raffm::detail::concat(source_, ":", line_at(text_, e.byte), ": ",
                                              "malformed JSON: ", e.what()));
    }
    if (!root_.is_object()) fail({}, "top level must be an object");
  }

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
    throw ConfigError(raffm::detail::concat(source_, ":", line_of(text_, path), ": ", msg));
  }

  const json& root() const { return root_; }

  const json& section(const std::string& name, bool required) const {
    static const json empty = json::object();
    if (!root_.contains(name)) {
      if (required) fail({}, "missing section \"" + name + "\"");
      return empty;
    }
    const json& s = root_.at(name);
    if (!s.is_object()) fail({name}, "\"" + name + "\" must be an object");
    return s;
  }

  void allow_only(const json& obj, const std::vector<std::string>& prefix,
                  const std::set<std::string>& allowed) const {
    for (const auto& [key, _] : obj.items()) {
      if (!allowed.contains(key)) {
        auto path = prefix;
        path.push_back(key);
        fail(path, "unknown key \"" + key + "\"");
      }
    }
  }

  template <typename T>
  T get(const json& obj, const std::string& sec, const std::string& key,
        std::optional<T> fallback = std::nullopt) const {
    std::vector<std::string> path;
    if (!sec.empty()) path.push_back(sec);
    path.push_back(key);
    if (!obj.contains(key)) {
      if (!fallback) fail(path, "missing key \"" + key + "\"");
      return *fallback;
    }
    const json& v = obj.at(key);
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_unsigned()) fail(path, "\"" + key + "\" must be a nonnegative integer");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) fail(path, "\"" + key + "\" must be a number");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail(path, "\"" + key + "\" must be true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(path, "\"" + key + "\" must be a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      fail(path, "\"" + key + "\": " + e.what());
    }
  }

 private:
  const std::string& text_;
  std::string source_;
  json root_;
};

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  detail::ConfigReader r(text, source);
  r.allow_only(r.root(), {}, {"model", "task", "partition", "federation", "spp", "output_dir"});
  RunConfig rc;

  const json& m = r.section("model", true);
  r.allow_only(m, {"model"}, {"n_layers", "d_model", "n_heads", "d_k", "d_v", "d_ff"});
  rc.model.n_layers = r.get<std::size_t>(m, "model", "n_layers");
  rc.model.d_model = r.get<std::size_t>(m, "model", "d_model");
  rc.model.n_heads = r.get<std::size_t>(m, "model", "n_heads");
  rc.model.d_k = r.get<std::size_t>(m, "model", "d_k");
  rc.model.d_v = r.get<std::size_t>(m, "model", "d_v");
  rc.model.d_ff = r.get<std::size_t>(m, "model", "d_ff");

  const json& t = r.section("task", true);
  r.allow_only(t, {"task"}, {"kind", "vocab_size", "seq_len", "n_classes", "n_samples", "n_test", "seed"});
  try {
    rc.task.kind = parse_task_kind(r.get<std::string>(t, "task", "kind"));
  } catch (const ConfigError& e) {
    if (std::string(e.what()).starts_with(source)) throw;
    r.fail({"task", "kind"}, e.what());
  }
  rc.task.vocab_size = r.get<std::size_t>(t, "task", "vocab_size");
  rc.task.seq_len = r.get<std::size_t>(t, "task", "seq_len");
  rc.task.n_classes = r.get<std::size_t>(t, "task", "n_classes");
  rc.task.n_samples = r.get<std::size_t>(t, "task", "n_samples");
  rc.n_test = r.get<std::size_t>(t, "task", "n_test", 500);
  rc.task.seed = r.get<std::uint64_t>(t, "task", "seed", 0);
  rc.model.vocab_size = rc.task.vocab_size;
  rc.model.n_classes = rc.task.n_classes;
  rc.model.max_seq = rc.task.seq_len;

  const json& p = r.section("partition", false);
  r.allow_only(p, {"partition"}, {"dirichlet_alpha", "seed"});
  rc.partition.dirichlet_alpha = r.get<double>(p, "partition", "dirichlet_alpha", 1.0);
  rc.partition.seed = r.get<std::uint64_t>(p, "partition", "seed", 0);

  const json& f = r.section("federation", true);
  r.allow_only(f, {"federation"},
               {"n_clients", "participation_rate", "rounds", "ratio_set", "budget_fractions",
                "master_seed", "aggregation", "eval_every", "local_epochs", "lr", "batch_size"});
  auto& fc = rc.federation;
  fc.n_clients = r.get<std::size_t>(f, "federation", "n_clients");
  fc.participation_rate = r.get<double>(f, "federation", "participation_rate");
  fc.rounds = r.get<std::size_t>(f, "federation", "rounds");
  fc.ratio_set = r.get<std::vector<double>>(f, "federation", "ratio_set", std::vector<double>{1.0});
  fc.budget_fractions =
      r.get<std::vector<double>>(f, "federation", "budget_fractions", std::vector<double>{1.0});
  fc.master_seed = r.get<std::uint64_t>(f, "federation", "master_seed", 0);
  if (r.get<std::string>(f, "federation", "aggregation", std::string("coverage-average")) !=
      "coverage-average") {
    r.fail({"federation", "aggregation"}, "aggregation must be \"coverage-average\"");
  }
  fc.eval_every = r.get<std::size_t>(f, "federation", "eval_every", 1);
  fc.local_epochs = r.get<std::size_t>(f, "federation", "local_epochs", 1);
  fc.lr = r.get<double>(f, "federation", "lr", 0.05);
  rc.batch_size = r.get<std::size_t>(f, "federation", "batch_size", 16);
  rc.partition.n_clients = fc.n_clients;

  const json& s = r.section("spp", false);
  r.allow_only(s, {"spp"}, {"permute_qk", "permute_vo", "permute_ffn"});
  fc.spp.permute_qk = r.get<bool>(s, "spp", "permute_qk", true);
  fc.spp.permute_vo = r.get<bool>(s, "spp", "permute_vo", true);
  fc.spp.permute_ffn = r.get<bool>(s, "spp", "permute_ffn", true);

  if (r.root().contains("output_dir")) rc.output_dir = r.get<std::string>(r.root(), "", "output_dir");

  auto check = [&](const std::vector<std::string>& path, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      r.fail(path, e.what());
    }
  };
  check({"model"}, [&] { rc.model.validate(); });
  check({"task"}, [&] { rc.task.validate(); });
  check({"task", "n_test"}, [&] {
    if (rc.n_test == 0) throw ConfigError("n_test must be >= 1");
  });
  check({"partition"}, [&] {
    if (!(rc.partition.dirichlet_alpha > 0.0)) throw ConfigError("dirichlet_alpha must be > 0");
    if (rc.partition.n_clients > rc.task.n_samples) {
      throw ConfigError("more clients than training samples");
    }
  });
  check({"federation"}, [&] {
    fc.validate();
    if (rc.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    const std::size_t full = param_count(SubmodelSpec::full(rc.model), rc.model);
    for (double frac : fc.budget_fractions) {
      require_feasible(rc.model, ResourceBudget{static_cast<std::size_t>(frac * full)},
                       fc.ratio_set);
    }
  });
  return rc;
}

// Training shards per client (Dirichlet split) plus a held-out test set
// generated from a seed derived from the task seed.
inline FederatedData build_federated_data(const RunConfig& rc, Dataset* train_out = nullptr) {
  Dataset train = generate(rc.task);
  TaskSpec test_task = rc.task;
  test_task.n_samples = rc.n_test;
  test_task.seed = combine_ids(rc.task.seed, 0x7E57);
  const Dataset test = generate(test_task);
  FederatedData fd;
  for (const auto& idx : dirichlet_partition(train.labels, rc.partition))
    fd.shards.push_back(make_batches(train, idx, rc.batch_size));
  fd.eval_set = make_batches(test, rc.batch_size);
  if (train_out) *train_out = std::move(train);
  return fd;
}

inline json spec_to_json(const SubmodelSpec& s) {
  json ffn = json::array(), qk = json::array(), v = json::array();
  for (const auto& l : s.layers) {
    ffn.push_back(l.ffn_width);
    json lq = json::array(), lv = json::array();
    for (const auto& h : l.heads) {
      lq.push_back(h.qk_width);
      lv.push_back(h.v_width);
    }
    qk.push_back(lq);
    v.push_back(lv);
  }
  return {{"ffn", ffn}, {"qk", qk}, {"v", v}};
}

inline json round_to_json(const RoundRecord& r) {
  json clients = json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"id", c.client_id},
                       {"param_count", c.param_count},
                       {"bytes_down", c.bytes_down},
                       {"bytes_up", c.bytes_up},
                       {"diverged", c.diverged},
                       {"spec", spec_to_json(c.spec)}});
  }
  json j = {{"round", r.round},
            {"participants", r.participant_ids()},
            {"clients", clients},
            {"bytes_down", r.bytes_down},
            {"bytes_up", r.bytes_up},
            {"accuracy", nullptr},
            {"loss", nullptr},
            {"wall_ms", r.wall_ms}};
  if (r.eval) {
    j["accuracy"] = r.eval->accuracy;
    j["loss"] = r.eval->mean_loss;
  }
  return j;
}

struct RunSummary {
  Evaluation final_eval;
  std::optional<double> mean_client_params;
  std::size_t full_params = 0;
  std::uint64_t total_bytes = 0;
  double mean_bytes_per_client_round = 0.0;
  std::size_t rounds = 0;
};

inline RunSummary summarize(const FederationResult& result, const std::vector<Batch>& eval_set) {
  RunSummary s;
  s.final_eval = evaluate(result.weights, eval_set);
  s.full_params = param_count(SubmodelSpec::full(result.weights.config), result.weights.config);
  s.rounds = result.log.size();
  std::size_t n = 0;
  double total = 0.0;
  for (const auto& r : result.log) {
    for (const auto& c : r.clients) {
      total += static_cast<double>(c.param_count);
      ++n;
    }
  }
  if (n > 0) s.mean_client_params = total / static_cast<double>(n);
  if (!result.log.empty()) {
    const auto traffic = measure_traffic(result.log);
    s.total_bytes = traffic.total_bytes;
    s.mean_bytes_per_client_round = traffic.mean_bytes_per_client_round;
  }
  return s;
}

inline json summary_to_json(const RunSummary& s, std::uint64_t master_seed) {
  json j = {{"final_accuracy", s.final_eval.accuracy},
            {"final_loss", s.final_eval.mean_loss},
            {"mean_client_params", nullptr},
            {"mean_client_param_fraction", nullptr},
            {"full_params", s.full_params},
            {"total_bytes", s.total_bytes},
            {"mean_bytes_per_client_round", s.mean_bytes_per_client_round},
            {"rounds", s.rounds},
            {"master_seed", master_seed}};
  if (s.mean_client_params) {
    j["mean_client_params"] = *s.mean_client_params;
    j["mean_client_param_fraction"] = *s.mean_client_params / static_cast<double>(s.full_params);
  }
  return j;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

// RAFFM_THREADS caps client-training parallelism; unset or 0 means serial.
inline std::size_t threads_from_env() {
  const char* v = std::getenv("RAFFM_THREADS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("RAFFM_THREADS must be an integer, got ") + v);
  return n;
}

struct RunOptions {
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> export_data;
};

inline int cmd_run(const RunOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    RunConfig rc = parse_run_config(read_text(opts.config_path), opts.config_path.string());
    if (opts.seed) rc.federation.master_seed = *opts.seed;
    rc.federation.threads = threads_from_env();
    std::filesystem::path dir = opts.out_dir ? *opts.out_dir : std::filesystem::path(rc.output_dir);
    if (dir.empty()) throw ConfigError("no output directory: set output_dir or pass --out");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    Dataset train;
    FederatedData data = build_federated_data(rc, &train);
    if (opts.export_data) write_checkpoint(*opts.export_data, dataset_to_tensors(train));
    const std::vector<Batch> eval_set = data.eval_set;
    const FederationResult result = run_federation(rc.federation, rc.model, std::move(data));

    std::ostringstream metrics;
    for (const auto& r : result.log) metrics << round_to_json(r).dump() << "\n";
    write_text(dir / "metrics.jsonl", metrics.str());
    const RunSummary summary = summarize(result, eval_set);
    write_text(dir / "summary.json", summary_to_json(summary, rc.federation.master_seed).dump(2) + "\n");
    write_checkpoint(dir / "weights.rffm", weights_to_tensors(result.weights));

    out << "rounds: " << summary.rounds << "\n"
        << "final accuracy: " << summary.final_eval.accuracy << "\n"
        << "total bytes: " << summary.total_bytes << "\n"
        << "wrote " << (dir / "summary.json").string() << "\n";
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

struct VerifyOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  bool negative_control = false;  // permute only W^q; expected to fail
};

inline constexpr double kInvarianceTolerance = 1e-12;
inline constexpr double kPreservationTolerance = 1e-9;

inline ModelConfig verify_model_config() {
  return ModelConfig{.n_layers = 2, .d_model = 16, .n_heads = 4, .d_k = 4, .d_v = 4,
                     .d_ff = 32, .vocab_size = 11, .n_classes = 3, .max_seq = 8};
}

inline Tensor2 random_tensor(std::size_t rows, std::size_t cols, RngStream& rng, double bound = 1.0) {
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

inline Permutation random_permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.uniform_index(i)]);
  return Permutation(std::move(p));
}

// A random instance of size (l=5, d=16, d_k=8) for the attention check.
inline double invariance_trial(std::uint64_t seed, std::size_t trial, PermuteTarget target) {
  RngStream rng = RngStream(seed, 0x7E0).derive(trial);
  const Tensor2 x = random_tensor(5, 16, rng);
  const Tensor2 wq = random_tensor(16, 8, rng);
  const Tensor2 wk = random_tensor(16, 8, rng);
  Permutation p = random_permutation(8, rng);
  while (p.is_identity()) p = random_permutation(8, rng);
  return verify_qk_invariance(wq, wk, x, p, target);
}

// Random 2-layer model (layer norms perturbed too) and a random batch;
// logits before and after full prioritization.
inline double preservation_trial(std::uint64_t seed, std::size_t trial) {
  RngStream rng = RngStream(seed, 0xF00).derive(trial);
  const ModelConfig cfg = verify_model_config();
  ModelWeights w = init_weights(cfg, rng.derive(1));
  for (auto& layer : w.layers) {
    for (Tensor2* t : {&layer.ln1_gamma, &layer.ln1_beta, &layer.ln2_gamma, &layer.ln2_beta}) {
      for (double& v : t->values()) v = rng.uniform(0.5, 1.5);
    }
  }
  Batch b;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<std::size_t> seq(1 + rng.uniform_index(cfg.max_seq));
    for (auto& tok : seq) tok = rng.uniform_index(cfg.vocab_size);
    b.sequences.push_back(std::move(seq));
    b.labels.push_back(rng.uniform_index(cfg.n_classes));
  }
  const Tensor2 before = forward(w, b).logits;
  const auto prioritized = prioritize_model(w, PrioritizationOptions{true, true, true});
  return max_scaled_diff(before, forward(prioritized.weights, b).logits);
}

inline int cmd_verify(const VerifyOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    if (opts.trials < 1) throw ValidationError("--trials must be >= 1");
    const auto target =
        opts.negative_control ? PermuteTarget::query_only : PermuteTarget::query_and_key;
    double worst_attn = 0.0;
    double worst_logits = 0.0;
    std::optional<std::size_t> bad_trial;
    for (std::size_t i = 0; i < opts.trials; ++i) {
      const double a = invariance_trial(opts.seed, i, target);
      const double l = preservation_trial(opts.seed, i);
      worst_attn = std::max(worst_attn, a);
      worst_logits = std::max(worst_logits, l);
      if (!bad_trial && (a > kInvarianceTolerance || l > kPreservationTolerance)) bad_trial = i;
    }
    out << std::scientific << std::setprecision(3);
    out << "trials: " << opts.trials << (opts.negative_control ? " (query-only permutation)" : "")
        << "\n"
        << "attention scores max relative diff: " << worst_attn << " (tolerance "
        << kInvarianceTolerance << ")\n"
        << "prioritized logits max relative diff: " << worst_logits << " (tolerance "
        << kPreservationTolerance << ")\n";
    if (bad_trial) {
      err << "tolerance violated: seed " << opts.seed << ", trial " << *bad_trial << "\n";
      return kRuntime;
    }
    out << "ok\n";
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Either {"ratio": r} for a uniform width ratio, or
// {"layers": [{"ffn_width": f, "heads": [{"qk_width": q, "v_width": v}, ...]}, ...]}.
// An optional "spp" object selects which families are prioritized first.
struct ExtractRequest {
  SubmodelSpec spec;
  PrioritizationOptions spp;
};

inline ExtractRequest parse_extract_request(const std::string& text, const ModelConfig& cfg,
                                            const std::string& source = "spec") {
  detail::ConfigReader r(text, source);
  r.allow_only(r.root(), {}, {"ratio", "layers", "spp"});
  ExtractRequest req;
  const json& s = r.section("spp", false);
  r.allow_only(s, {"spp"}, {"permute_qk", "permute_vo", "permute_ffn"});
  req.spp.permute_qk = r.get<bool>(s, "spp", "permute_qk", true);
  req.spp.permute_vo = r.get<bool>(s, "spp", "permute_vo", true);
  req.spp.permute_ffn = r.get<bool>(s, "spp", "permute_ffn", true);
  const json& root = r.root();
  if (root.contains("ratio") == root.contains("layers")) {
    r.fail({}, "give exactly one of \"ratio\" or \"layers\"");
  }
  if (root.contains("ratio")) {
    const double ratio = r.get<double>(root, "", "ratio");
    try {
      req.spec = SubmodelSpec::uniform(cfg, ratio);
    } catch (const Error& e) {
      r.fail({"ratio"}, e.what());
    }
    return req;
  }
  const json& layers = root.at("layers");
  if (!layers.is_array()) r.fail({"layers"}, "\"layers\" must be an array");
  for (const json& l : layers) {
    if (!l.is_object()) r.fail({"layers"}, "each layer must be an object");
    r.allow_only(l, {"layers"}, {"ffn_width", "heads"});
    LayerWidths lw;
    lw.ffn_width = r.get<std::size_t>(l, "layers", "ffn_width");
    if (!l.contains("heads") || !l.at("heads").is_array()) r.fail({"layers", "heads"}, "missing heads array");
    for (const json& h : l.at("heads")) {
      if (!h.is_object()) r.fail({"layers", "heads"}, "each head must be an object");
      r.allow_only(h, {"layers", "heads"}, {"qk_width", "v_width"});
      lw.heads.push_back({r.get<std::size_t>(h, "heads", "qk_width"),
                          r.get<std::size_t>(h, "heads", "v_width")});
    }
    req.spec.layers.push_back(std::move(lw));
  }
  return req;
}

inline int cmd_extract(const std::filesystem::path& in, const std::filesystem::path& spec_path,
                       const std::filesystem::path& out_path, std::ostream& out, std::ostream& err) {
  try {
    const ModelWeights w = weights_from_tensors(read_checkpoint(in));
    const ExtractRequest req = parse_extract_request(read_text(spec_path), w.config, spec_path.string());
    req.spec.validate(w.config);
    const ModelWeights prioritized = prioritize_model(w, req.spp).weights;
    const ModelWeights sub = extract_submodel(prioritized, req.spec);
    write_checkpoint(out_path, weights_to_tensors(sub));
    out << "params before: " << total_params(w) << "\n"
        << "params after: " << total_params(sub) << "\n";
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

inline int cmd_inspect(const std::filesystem::path& in, std::ostream& out, std::ostream& err) {
  try {
    const TensorMap m = read_checkpoint(in);
    std::size_t total = 0;
    out << "tensors: " << m.size() << "\n";
    for (const auto& [name, t] : m) {
      out << "  " << name << " " << t.rows() << "x" << t.cols() << "\n";
      total += t.size();
    }
    out << "values: " << total << "\n";
    if (m.contains(kConfigTensor)) {
      const ModelWeights w = weights_from_tensors(m);
      const auto& c = w.config;
      out << "model: layers=" << c.n_layers << " d_model=" << c.d_model << " heads=" << c.n_heads
          << " d_k=" << c.d_k << " d_v=" << c.d_v << " d_ff=" << c.d_ff
          << " vocab=" << c.vocab_size << " classes=" << c.n_classes << " max_seq=" << c.max_seq
          << "\n"
          << "parameters: " << total_params(w) << "\n";
    }
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace raffm::cli
