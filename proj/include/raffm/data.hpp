#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "raffm/error.hpp"
#include "raffm/nn.hpp"
#include "raffm/rng.hpp"
#include "raffm/tensor.hpp"

namespace raffm {

enum class TaskKind { majority_token, parity_of_sum, keyed_lookup };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::majority_token: return "majority-token";
    case TaskKind::parity_of_sum: return "parity-of-sum";
    case TaskKind::keyed_lookup: return "keyed-lookup";
  }
  return "unknown";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "majority-token") return TaskKind::majority_token;
  if (s == "parity-of-sum") return TaskKind::parity_of_sum;
  if (s == "keyed-lookup") return TaskKind::keyed_lookup;
  throw ConfigError("unknown task kind '" + s +
                    "' (expected majority-token, parity-of-sum or keyed-lookup)");
}

// Sequence-classification tasks whose label is a pure function of the tokens:
//   majority-token  most frequent token (ties to the smaller id) mod n_classes
//   parity-of-sum   sum of tokens mod 2
//   keyed-lookup    the first token k picks position 1 + k mod (seq_len - 1);
//                   label is that token mod n_classes
struct TaskSpec {
  TaskKind kind = TaskKind::majority_token;
  std::size_t vocab_size = 8;
  std::size_t seq_len = 8;
  std::size_t n_classes = 4;
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (seq_len == 0) throw ValidationError("TaskSpec: seq_len must be >= 1");
    if (vocab_size == 0) throw ValidationError("TaskSpec: vocab_size must be >= 1");
    if (n_samples == 0) throw ValidationError("TaskSpec: n_samples must be >= 1");
    switch (kind) {
      case TaskKind::majority_token:
        if (n_classes < 2 || n_classes > vocab_size) {
          throw ValidationError("TaskSpec: majority-token needs 2 <= n_classes <= vocab_size");
        }
        break;
      case TaskKind::parity_of_sum:
        if (n_classes != 2) throw ValidationError("TaskSpec: parity-of-sum needs n_classes = 2");
        if (vocab_size < 2) throw ValidationError("TaskSpec: parity-of-sum needs vocab_size >= 2");
        break;
      case TaskKind::keyed_lookup:
        if (seq_len < 2) throw ValidationError("TaskSpec: keyed-lookup needs seq_len >= 2");
        if (n_classes < 2 || n_classes > vocab_size) {
          throw ValidationError("TaskSpec: keyed-lookup needs 2 <= n_classes <= vocab_size");
        }
        break;
    }
  }
};

inline std::size_t task_label(TaskKind kind, const std::vector<std::size_t>& tokens,
                              std::size_t vocab_size, std::size_t n_classes) {
  if (tokens.empty()) throw ValidationError("task_label: empty sequence");
  switch (kind) {
    case TaskKind::majority_token: {
      std::vector<std::size_t> counts(vocab_size, 0);
      for (std::size_t t : tokens) ++counts.at(t);
      const auto best = std::max_element(counts.begin(), counts.end()) - counts.begin();
      return static_cast<std::size_t>(best) % n_classes;
    }
    case TaskKind::parity_of_sum: {
      std::size_t sum = 0;
      for (std::size_t t : tokens) sum += t;
      return sum % 2;
    }
    case TaskKind::keyed_lookup: {
      if (tokens.size() < 2) throw ValidationError("task_label: keyed-lookup needs length >= 2");
      const std::size_t pos = 1 + tokens[0] % (tokens.size() - 1);
      return tokens[pos] % n_classes;
    }
  }
  return 0;
}

struct Dataset {
  std::vector<std::vector<std::size_t>> sequences;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

inline Dataset generate(const TaskSpec& task) {
  task.validate();
  RngStream rng(task.seed, 0x7A5C);
  Dataset d;
  d.sequences.reserve(task.n_samples);
  d.labels.reserve(task.n_samples);
  for (std::size_t i = 0; i < task.n_samples; ++i) {
    std::vector<std::size_t> seq(task.seq_len);
    for (auto& t : seq) t = rng.uniform_index(task.vocab_size);
    d.labels.push_back(task_label(task.kind, seq, task.vocab_size, task.n_classes));
    d.sequences.push_back(std::move(seq));
  }
  return d;
}

struct PartitionSpec {
  std::size_t n_clients = 1;
  double dirichlet_alpha = 1.0;
  std::uint64_t seed = 0;
};

// Non-IID split: for each class, client shares are drawn from
// Dirichlet(alpha) and the shuffled class members are cut accordingly. Empty
// shards are then filled by moving one sample from the largest shard.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(
    const std::vector<std::size_t>& labels, const PartitionSpec& part) {
  if (labels.empty()) throw ValidationError("dirichlet_partition: no samples");
  if (part.n_clients == 0) throw ValidationError("dirichlet_partition: n_clients must be >= 1");
  if (part.n_clients > labels.size()) {
    throw ValidationError(detail::concat("dirichlet_partition: ", part.n_clients,
                                         " clients for only ", labels.size(), " samples"));
  }
  if (!(part.dirichlet_alpha > 0.0) || !std::isfinite(part.dirichlet_alpha)) {
    throw ValidationError("dirichlet_partition: alpha must be positive");
  }
  const std::size_t n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  RngStream rng(part.seed, 0xD1C1);
  std::vector<std::vector<std::size_t>> shards(part.n_clients);
  for (auto& members : by_class) {
    if (members.empty()) continue;
    for (std::size_t i = members.size(); i > 1; --i) {
      std::swap(members[i - 1], members[rng.uniform_index(i)]);
    }
    const auto shares = rng.dirichlet(part.n_clients, part.dirichlet_alpha);
    double cumulative = 0.0;
    std::size_t begin = 0;
    for (std::size_t k = 0; k < part.n_clients; ++k) {
      cumulative += shares[k];
      std::size_t end = k + 1 == part.n_clients
                            ? members.size()
                            : static_cast<std::size_t>(cumulative * members.size() + 0.5);
      end = std::clamp(end, begin, members.size());
      shards[k].insert(shards[k].end(), members.begin() + begin, members.begin() + end);
      begin = end;
    }
  }

  for (auto& shard : shards) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(shards.begin(), shards.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    shard.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& shard : shards) std::sort(shard.begin(), shard.end());
  return shards;
}

// Chops the selected samples, in order, into batches of at most batch_size.
inline std::vector<Batch> make_batches(const Dataset& data, const std::vector<std::size_t>& indices,
                                       std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("make_batches: batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    Batch b;
    for (std::size_t j = i; j < std::min(indices.size(), i + batch_size); ++j) {
      b.sequences.push_back(data.sequences.at(indices[j]));
      b.labels.push_back(data.labels.at(indices[j]));
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batches(data, all, batch_size);
}

// Integer-valued tensors for the checkpoint container: "data.tokens" holds one
// sequence per row, "data.labels" one label per row. Sequences must share a length.
inline TensorMap dataset_to_tensors(const Dataset& d) {
  if (d.size() == 0) throw ValidationError("dataset_to_tensors: empty dataset");
  const std::size_t len = d.sequences.front().size();
  Tensor2 tokens(d.size(), len);
  Tensor2 labels(d.size(), 1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.sequences[i].size() != len) {
      throw ValidationError("dataset_to_tensors: sequences differ in length");
    }
    for (std::size_t j = 0; j < len; ++j) tokens(i, j) = static_cast<double>(d.sequences[i][j]);
    labels(i, 0) = static_cast<double>(d.labels[i]);
  }
  return {{"data.tokens", std::move(tokens)}, {"data.labels", std::move(labels)}};
}

inline Dataset dataset_from_tensors(const TensorMap& m) {
  const auto tok = m.find("data.tokens");
  const auto lab = m.find("data.labels");
  if (tok == m.end() || lab == m.end()) {
    throw ValidationError("dataset_from_tensors: data.tokens / data.labels missing");
  }
  const Tensor2& tokens = tok->second;
  const Tensor2& labels = lab->second;
  if (labels.cols() != 1 || labels.rows() != tokens.rows()) {
    throw ShapeError("dataset_from_tensors: labels must be a column matching the token rows");
  }
  auto as_index = [](double v) {
    if (v < 0.0 || v != std::floor(v)) {
      throw ValidationError(detail::concat("dataset_from_tensors: ", v, " is not an index"));
    }
    return static_cast<std::size_t>(v);
  };
  Dataset d;
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    std::vector<std::size_t> seq;
    for (double v : tokens.row(i)) seq.push_back(as_index(v));
    d.sequences.push_back(std::move(seq));
    d.labels.push_back(as_index(labels(i, 0)));
  }
  return d;
}

}  // namespace raffm
