#include <map>
#include <set>

#include <gtest/gtest.h>

#include "raffm/data.hpp"

using namespace raffm;

TEST(Task, Labels) {
  EXPECT_EQ(task_label(TaskKind::majority_token, {3, 3, 1}, 4, 4), 3u);
  EXPECT_EQ(task_label(TaskKind::majority_token, {2, 1}, 4, 4), 1u);  // tie to smaller id
  EXPECT_EQ(task_label(TaskKind::parity_of_sum, {1, 2, 3}, 4, 2), 0u);
  EXPECT_EQ(task_label(TaskKind::keyed_lookup, {1, 5, 6, 7}, 8, 4), 6u % 4);
  EXPECT_THROW(parse_task_kind("sorting"), ConfigError);
  EXPECT_EQ(parse_task_kind(to_string(TaskKind::keyed_lookup)), TaskKind::keyed_lookup);
}

TEST(Task, ParityBalanced) {
  const auto d = generate({TaskKind::parity_of_sum, 10, 6, 2, 10000, 3});
  std::size_t ones = 0;
  for (auto l : d.labels) ones += l;
  EXPECT_NEAR(static_cast<double>(ones) / 10000.0, 0.5, 0.02);
}

TEST(Task, GenerationDeterministic) {
  const TaskSpec t{TaskKind::keyed_lookup, 6, 5, 3, 50, 9};
  const auto a = generate(t);
  const auto b = generate(t);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Task, InvalidSpecs) {
  EXPECT_THROW(generate({TaskKind::parity_of_sum, 4, 4, 3, 10, 0}), ValidationError);
  EXPECT_THROW(generate({TaskKind::keyed_lookup, 4, 1, 2, 10, 0}), ValidationError);
  EXPECT_THROW(generate({TaskKind::majority_token, 3, 4, 4, 10, 0}), ValidationError);
}

TEST(Partition, ExactDisjointNonEmpty) {
  const auto d = generate({TaskKind::majority_token, 5, 6, 5, 300, 1});
  for (double alpha : {0.01, 0.3, 1.0, 100.0}) {
    const auto shards = dirichlet_partition(d.labels, {12, alpha, 4});
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& s : shards) {
      EXPECT_FALSE(s.empty());
      total += s.size();
      seen.insert(s.begin(), s.end());
    }
    EXPECT_EQ(total, 300u);
    EXPECT_EQ(seen.size(), 300u);
  }
}

TEST(Partition, LargeAlphaMatchesGlobalHistogram) {
  const auto d = generate({TaskKind::majority_token, 4, 5, 4, 10000, 2});
  std::vector<double> global(4, 0);
  for (auto l : d.labels) global[l] += 1.0 / 10000.0;
  const auto shards = dirichlet_partition(d.labels, {5, 1e6, 7});
  for (const auto& s : shards) {
    std::vector<double> h(4, 0);
    for (auto i : s) h[d.labels[i]] += 1.0 / static_cast<double>(s.size());
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(h[c], global[c], 0.05);
  }
}

TEST(Partition, SmallAlphaConcentrates) {
  const auto d = generate({TaskKind::parity_of_sum, 10, 5, 2, 400, 3});
  int concentrated = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto shards = dirichlet_partition(d.labels, {2, 0.01, seed});
    bool any = false;
    for (const auto& s : shards) {
      std::size_t ones = 0;
      for (auto i : s) ones += d.labels[i];
      const double frac = static_cast<double>(ones) / static_cast<double>(s.size());
      any = any || frac >= 0.9 || frac <= 0.1;
    }
    concentrated += any;
  }
  EXPECT_GE(concentrated, 80);
}

TEST(Partition, Rejections) {
  EXPECT_THROW(dirichlet_partition({}, {1, 1.0, 0}), ValidationError);
  EXPECT_THROW(dirichlet_partition({0, 1}, {3, 1.0, 0}), ValidationError);
  EXPECT_THROW(dirichlet_partition({0, 1}, {1, 0.0, 0}), ValidationError);
}

TEST(Batches, ChopInOrder) {
  const auto d = generate({TaskKind::majority_token, 4, 3, 2, 10, 1});
  const auto b = make_batches(d, {9, 2, 4, 5, 7}, 2);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].sequences[0], d.sequences[9]);
  EXPECT_EQ(b[2].size(), 1u);
  EXPECT_THROW(make_batches(d, 0), ValidationError);
}

TEST(Batches, TensorRoundTrip) {
  const auto d = generate({TaskKind::keyed_lookup, 6, 4, 3, 20, 5});
  const auto back = dataset_from_tensors(dataset_to_tensors(d));
  EXPECT_EQ(back.sequences, d.sequences);
  EXPECT_EQ(back.labels, d.labels);
}
