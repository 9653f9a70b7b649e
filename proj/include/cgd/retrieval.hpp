#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cgd/dataio.hpp"
#include "cgd/descriptor.hpp"
#include "cgd/errors.hpp"
#include "cgd/io.hpp"
#include "json.hpp"

namespace cgd {

/// Row-major count x dim float32 matrix of embeddings with labels and stable ids.
struct EmbeddingSet {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<float> matrix;
  std::vector<Label> labels;
  std::vector<std::size_t> ids;

  std::span<const float> row(std::size_t i) const { return {matrix.data() + i * dim, dim}; }

  bool operator==(const EmbeddingSet&) const = default;
};

inline constexpr std::array<char, 4> kEmbeddingMagic{'E', 'M', 'B', '1'};

/// EMB1: "EMB1" | u32 count | u32 dim | count*dim float32 | count x u32 label
inline void write_embeddings(std::ostream& os, const EmbeddingSet& set) {
  os.write(kEmbeddingMagic.data(), 4);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.count));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.dim));
  for (float v : set.matrix) io::write_f32(os, v);
  for (auto l : set.labels) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l));
}

/// Ids are not stored; rows read back get ids 0..count-1.
inline EmbeddingSet read_embeddings(std::istream& is) {
  io::expect_magic(is, kEmbeddingMagic, "EMB1");
  EmbeddingSet set;
  set.count = io::read_le<std::uint32_t>(is, "EMB1 count");
  set.dim = io::read_le<std::uint32_t>(is, "EMB1 dim");
  if (set.dim == 0) throw DataError("EMB1 dimension of zero");
  set.matrix.resize(set.count * set.dim);
  for (auto& v : set.matrix) v = io::read_f32(is, "EMB1 payload");
  set.labels.resize(set.count);
  for (auto& l : set.labels) l = static_cast<Label>(io::read_le<std::uint32_t>(is, "EMB1 labels"));
  set.ids.resize(set.count);
  std::iota(set.ids.begin(), set.ids.end(), std::size_t{0});
  return set;
}

inline void save_embeddings(const std::string& path, const EmbeddingSet& set) {
  auto os = io::open_out(path);
  write_embeddings(os, set);
}

inline EmbeddingSet load_embeddings(const std::string& path) {
  auto is = io::open_in(path);
  return read_embeddings(is);
}

/// Embeds every image (test-mode resize only), preserving input order.
inline EmbeddingSet embed_dataset(const CgdModel& model, const LabeledImages& data, std::size_t batch_size = 32) {
  const std::size_t size = model.config().backbone.input_size;
  EmbeddingSet set;
  set.count = data.size();
  set.dim = model.config().descriptor.total_dim;
  set.labels = data.labels;
  set.ids = data.ids;
  if (set.ids.empty()) {
    set.ids.resize(set.count);
    std::iota(set.ids.begin(), set.ids.end(), std::size_t{0});
  }
  set.matrix.reserve(set.count * set.dim);
  std::mt19937_64 unused_rng(0);
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    std::size_t end = std::min(data.size(), begin + batch_size);
    std::vector<Tensor> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(augment(data.images[i], unused_rng, false, size));
    Tensor emb = model.embed(stack_images(batch));
    if (emb.dim(1) != set.dim) throw ConfigError("model produced " + std::to_string(emb.dim(1)) + "-dim embeddings, expected " + std::to_string(set.dim));
    for (double v : emb.data()) set.matrix.push_back(static_cast<float>(v));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Exhaustive search

struct KnnResult {
  std::vector<std::vector<std::size_t>> rankings;  // gallery row positions, best first
  std::size_t k = 0;
  bool clamped = false;
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

/**
 * For each query, gallery rows by descending cosine similarity, ties by ascending
 * gallery id. With exclude_self, the gallery row sharing the query's id is dropped.
 * K larger than the effective gallery is clamped (a warning goes to stderr).
 */
inline KnnResult knn_search(const EmbeddingSet& queries, const EmbeddingSet& gallery, std::size_t k, bool exclude_self) {
  if (queries.dim != gallery.dim) {
    throw std::invalid_argument("knn_search: query dim " + std::to_string(queries.dim) + " != gallery dim " +
                                std::to_string(gallery.dim));
  }
  KnnResult result;
  std::size_t effective = gallery.count - (exclude_self && gallery.count > 0 ? 1 : 0);
  result.k = k;
  if (k > effective) {
    result.k = effective;
    result.clamped = true;
    std::cerr << "warning: K=" << k << " exceeds the effective gallery size " << effective << ", clamped\n";
  }
  result.rankings.resize(queries.count);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t q = 0; q < queries.count; ++q) {
    scored.clear();
    for (std::size_t g = 0; g < gallery.count; ++g) {
      if (exclude_self && gallery.ids[g] == queries.ids[q]) continue;
      scored.emplace_back(cosine(queries.row(q), gallery.row(g)), g);
    }
    auto better = [&gallery](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return gallery.ids[a.second] < gallery.ids[b.second];
    };
    std::size_t keep = std::min(result.k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
    auto& out = result.rankings[q];
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].second);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Recall@K

struct RecallReport {
  std::vector<std::size_t> k_list;
  std::map<std::size_t, double> recall_at_k;
  std::vector<std::size_t> first_relevant_rank;  // 1-based; 0 when the query was excluded
  std::size_t excluded_queries = 0;

  double at(std::size_t k) const { return recall_at_k.at(k); }
};

/**
 * Fraction of queries with a same-class item among their first K results. Rankings
 * must cover the whole (effective) gallery; a query whose ranking holds no item of its
 * class has no relevant gallery item and is excluded from the denominator.
 */
inline RecallReport recall_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const Label> query_labels,
                                std::span<const Label> gallery_labels, const std::vector<std::size_t>& k_list) {
  if (rankings.size() != query_labels.size()) throw std::invalid_argument("recall_at_k: rankings/labels size mismatch");
  if (k_list.empty()) throw std::invalid_argument("recall_at_k: empty K list");
  for (auto k : k_list)
    if (k == 0) throw std::invalid_argument("recall_at_k: K must be positive");
  RecallReport rep;
  rep.k_list = k_list;
  rep.first_relevant_rank.assign(rankings.size(), 0);
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (gallery_labels[r[i]] == query_labels[q]) {
        rep.first_relevant_rank[q] = i + 1;
        break;
      }
    }
    if (rep.first_relevant_rank[q] == 0) ++rep.excluded_queries;
  }
  const std::size_t valid = rankings.size() - rep.excluded_queries;
  for (auto k : k_list) {
    std::size_t hits = 0;
    for (auto rank : rep.first_relevant_rank) hits += (rank != 0 && rank <= k) ? 1 : 0;
    rep.recall_at_k[k] = valid == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(valid);
  }
  return rep;
}

/// Full-gallery search followed by Recall@K.
inline RecallReport evaluate_recall(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                    const std::vector<std::size_t>& k_list, bool exclude_self) {
  NoGradGuard guard;
  std::size_t effective = gallery.count - (exclude_self && gallery.count > 0 ? 1 : 0);
  auto knn = knn_search(queries, gallery, effective, exclude_self);
  return recall_at_k(knn.rankings, queries.labels, gallery.labels, k_list);
}

inline nlohmann::json to_json(const RecallReport& r) {
  nlohmann::json j;
  j["k_list"] = r.k_list;
  nlohmann::json rec = nlohmann::json::object();
  for (const auto& [k, v] : r.recall_at_k) rec[std::to_string(k)] = v;
  j["recall_at_k"] = rec;
  j["per_query_first_relevant_rank"] = r.first_relevant_rank;
  j["excluded_queries"] = r.excluded_queries;
  return j;
}

}  // namespace cgd
