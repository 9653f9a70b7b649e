#include <gtest/gtest.h>

#include <sstream>

#include "cgd/retrieval.hpp"
#include "support.hpp"

using namespace cgd;
using cgd::test::Rng;

namespace {

EmbeddingSet random_set(std::size_t n, std::size_t d, std::size_t classes, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
  EmbeddingSet s;
  s.count = n;
  s.dim = d;
  for (std::size_t i = 0; i < n * d; ++i) s.matrix.push_back(static_cast<float>(g(rng)));
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(cls(rng));
    s.ids.push_back(i);
  }
  return s;
}

std::vector<std::vector<double>> rows_of(const EmbeddingSet& s) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < s.count; ++i) out.emplace_back(s.row(i).begin(), s.row(i).end());
  return out;
}

EmbeddingSet from_rows(const std::vector<std::vector<float>>& rows, std::vector<Label> labels) {
  EmbeddingSet s;
  s.count = rows.size();
  s.dim = rows[0].size();
  for (const auto& r : rows) s.matrix.insert(s.matrix.end(), r.begin(), r.end());
  s.labels = std::move(labels);
  for (std::size_t i = 0; i < s.count; ++i) s.ids.push_back(i);
  return s;
}

}  // namespace

TEST(Knn, ExactCopyRanksFirst) {
  auto g = from_rows({{1, 0}, {0.6f, 0.8f}, {0, 1}}, {0, 1, 2});
  auto q = from_rows({{0.6f, 0.8f}}, {1});
  q.ids = {99};
  EXPECT_EQ(knn_search(q, g, 1, false).rankings[0][0], 1u);
}

TEST(Knn, OrthogonalTiesByAscendingId) {
  auto g = from_rows({{0, 1, 0}, {0, 0, 1}, {0, 1, 0}}, {0, 1, 2});
  g.ids = {7, 3, 5};
  auto q = from_rows({{1, 0, 0}}, {0});
  q.ids = {100};
  EXPECT_EQ(knn_search(q, g, 3, false).rankings[0], (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Knn, MatchesFullSortOracle) {
  Rng rng(1);
  auto s = random_set(200, 8, 10, rng);
  for (bool ex : {false, true}) {
    auto got = knn_search(s, s, 200, ex);
    auto ref = test::knn_oracle(rows_of(s), rows_of(s), s.ids, s.ids, ex);
    EXPECT_EQ(got.rankings, ref);
    EXPECT_EQ(got.clamped, ex);
  }
}

TEST(Knn, InvariantUnderRotation) {
  Rng rng(2);
  auto s = random_set(60, 4, 5, rng);
  // a random orthogonal matrix from Gram-Schmidt
  std::normal_distribution<double> g(0, 1);
  std::vector<std::vector<double>> q(4, std::vector<double>(4));
  for (auto& r : q)
    for (auto& v : r) v = g(rng);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0;
      for (std::size_t t = 0; t < 4; ++t) d += q[i][t] * q[j][t];
      for (std::size_t t = 0; t < 4; ++t) q[i][t] -= d * q[j][t];
    }
    double n = 0;
    for (double v : q[i]) n += v * v;
    for (auto& v : q[i]) v /= std::sqrt(n);
  }
  auto rotated = s;
  for (std::size_t r = 0; r < s.count; ++r)
    for (std::size_t i = 0; i < 4; ++i) {
      double acc = 0;
      for (std::size_t t = 0; t < 4; ++t) acc += q[i][t] * s.matrix[r * 4 + t];
      rotated.matrix[r * 4 + i] = static_cast<float>(acc);
    }
  EXPECT_EQ(knn_search(s, s, 59, true).rankings, knn_search(rotated, rotated, 59, true).rankings);
}

TEST(Knn, ClampsOversizedK) {
  Rng rng(3);
  auto s = random_set(5, 3, 2, rng);
  auto r = knn_search(s, s, 50, true);
  EXPECT_TRUE(r.clamped);
  EXPECT_EQ(r.k, 4u);
  EXPECT_EQ(r.rankings[0].size(), 4u);
}

TEST(Recall, DuplicatesGivePerfectRecall) {
  Rng rng(4);
  auto s = random_set(30, 6, 30, rng);
  auto report = evaluate_recall(s, s, {1}, false);
  EXPECT_EQ(report.at(1), 1.0);
}

TEST(Recall, MonotoneAndMatchesScanOracle) {
  Rng rng(5);
  auto s = random_set(100, 5, 7, rng);
  std::vector<std::size_t> ks{1, 2, 4, 8};
  auto knn = knn_search(s, s, 99, true);
  auto report = recall_at_k(knn.rankings, s.labels, s.labels, ks);
  auto ref = test::recall_oracle(knn.rankings, s.labels, s.labels, ks);
  for (auto k : ks) EXPECT_EQ(report.at(k), ref.at(k));
  for (std::size_t i = 1; i < ks.size(); ++i) EXPECT_GE(report.at(ks[i]), report.at(ks[i - 1]));
  EXPECT_EQ(evaluate_recall(s, s, {99}, true).at(99), 1.0);
}

TEST(Recall, ExcludeSelfEqualsRowRemoval) {
  Rng rng(6);
  auto s = random_set(25, 4, 4, rng);
  auto with_ex = knn_search(s, s, 24, true).rankings;
  for (std::size_t q = 0; q < s.count; ++q) {
    EmbeddingSet g;
    g.dim = s.dim;
    std::vector<std::size_t> map;
    for (std::size_t i = 0; i < s.count; ++i) {
      if (i == q) continue;
      g.matrix.insert(g.matrix.end(), s.row(i).begin(), s.row(i).end());
      g.labels.push_back(s.labels[i]);
      g.ids.push_back(s.ids[i]);
      map.push_back(i);
      ++g.count;
    }
    EmbeddingSet one = from_rows({{s.row(q).begin(), s.row(q).end()}}, {s.labels[q]});
    one.ids = {1000};
    auto r = knn_search(one, g, 24, false).rankings[0];
    for (auto& i : r) i = map[i];
    EXPECT_EQ(r, with_ex[q]) << q;
  }
}

TEST(Recall, QueryWithoutRelevantItemIsExcluded) {
  auto g = from_rows({{1, 0}, {0, 1}, {1, 1}}, {0, 0, 1});
  auto q = from_rows({{1, 0}, {0, 1}}, {0, 5});
  q.ids = {10, 11};
  auto r = evaluate_recall(q, g, {1, 2}, false);
  EXPECT_EQ(r.excluded_queries, 1u);
  EXPECT_EQ(r.first_relevant_rank[1], 0u);
  EXPECT_EQ(r.at(1), 1.0);
  auto j = to_json(r);
  EXPECT_EQ(j["excluded_queries"], 1);
  EXPECT_EQ(j["recall_at_k"]["1"], 1.0);
}

TEST(Emb1, RoundTrip) {
  Rng rng(7);
  auto s = random_set(9, 3, 3, rng);
  std::stringstream ss;
  write_embeddings(ss, s);
  EXPECT_EQ(ss.str().substr(0, 4), "EMB1");
  EXPECT_EQ(ss.str().size(), 12u + 9 * 3 * 4 + 9 * 4);
  auto back = read_embeddings(ss);
  EXPECT_EQ(back, s);
  std::stringstream cut(ss.str().substr(0, 20));
  EXPECT_THROW(read_embeddings(cut), DataError);
}

TEST(EmbedDataset, DeterministicUnitRowsAndDuplicates) {
  ModelConfig mc{DescriptorConfig::parse("SG", 6), BackboneConfig{{4, 8}, {2, 2}, true, 16}, Architecture::cgd,
                 CombineMethod::concat, 2};
  CgdModel model(mc, 1);
  Rng rng(8);
  LabeledImages data;
  auto img = test::uniform({3, 20, 20}, rng, 0, 1, false);
  data.images = {img, test::uniform({3, 20, 20}, rng, 0, 1, false), img};
  data.labels = {0, 1, 0};
  data.ids = {0, 1, 2};
  auto a = embed_dataset(model, data);
  auto b = embed_dataset(model, data);
  EXPECT_EQ(a, b);
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0;
    for (float v : a.row(r)) n += double(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-4);
  }
  EXPECT_TRUE(std::equal(a.row(0).begin(), a.row(0).end(), a.row(2).begin()));
  LabeledImages single{{img}, {0}, {0}};
  EXPECT_EQ(embed_dataset(model, single).count, 1u);
}
