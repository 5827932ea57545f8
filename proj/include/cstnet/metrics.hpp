#pragma once

// Cross-camera ranking metrics. For each query, gallery entries sharing both
// its identity and its camera are removed; the remaining gallery is ranked by
// ascending distance with ties broken by gallery index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cstnet/errors.hpp"

namespace cstnet {

struct DistanceMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct RankingLabels {
  std::vector<int> query_ids, gallery_ids;
  std::vector<int> query_cams, gallery_cams;
};

struct CmcResult {
  std::vector<double> cmc;  // cmc[k-1] = rank-k accuracy
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;  // no cross-camera match in the gallery
};

struct MapResult {
  double map = 0.0;
  std::vector<double> per_query;  // AP of each valid query, in query order
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;
};

struct RankingMetrics {
  std::vector<double> cmc;
  double map = 0.0;
  std::vector<double> per_query_ap;
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;

  double rank(std::size_t k) const {
    if (cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

namespace detail {

inline void check_ranking_inputs(const DistanceMatrix& d, const RankingLabels& l) {
  if (d.values.size() != d.rows * d.cols || l.query_ids.size() != d.rows || l.query_cams.size() != d.rows ||
      l.gallery_ids.size() != d.cols || l.gallery_cams.size() != d.cols)
    throw DimensionError("ranking: distance matrix " + std::to_string(d.rows) + "x" + std::to_string(d.cols) +
                         " does not match label vectors");
}

// Ranked, filtered gallery for query q and the relevance flag of each entry.
inline std::vector<char> ranked_relevance(const DistanceMatrix& d, const RankingLabels& l, std::size_t q) {
  std::vector<std::size_t> order;
  order.reserve(d.cols);
  for (std::size_t g = 0; g < d.cols; ++g)
    if (!(l.gallery_ids[g] == l.query_ids[q] && l.gallery_cams[g] == l.query_cams[q])) order.push_back(g);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d(q, a) < d(q, b); });
  std::vector<char> rel(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) rel[i] = l.gallery_ids[order[i]] == l.query_ids[q];
  return rel;
}

}  // namespace detail

inline CmcResult compute_cmc(const DistanceMatrix& d, const RankingLabels& l, std::size_t max_rank) {
  detail::check_ranking_inputs(d, l);
  if (max_rank == 0) throw ContractError("compute_cmc: max_rank must be positive");
  CmcResult res;
  res.cmc.assign(max_rank, 0.0);
  for (std::size_t q = 0; q < d.rows; ++q) {
    const auto rel = detail::ranked_relevance(d, l, q);
    const auto first = std::find(rel.begin(), rel.end(), 1);
    if (first == rel.end()) {
      ++res.skipped_queries;
      continue;
    }
    ++res.valid_queries;
    const auto pos = static_cast<std::size_t>(first - rel.begin());
    for (std::size_t k = pos; k < max_rank; ++k) res.cmc[k] += 1.0;
  }
  if (res.valid_queries)
    for (auto& v : res.cmc) v /= static_cast<double>(res.valid_queries);
  return res;
}

inline MapResult compute_map(const DistanceMatrix& d, const RankingLabels& l) {
  detail::check_ranking_inputs(d, l);
  MapResult res;
  for (std::size_t q = 0; q < d.rows; ++q) {
    const auto rel = detail::ranked_relevance(d, l, q);
    std::size_t hits = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < rel.size(); ++i) {
      if (!rel[i]) continue;
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    if (!hits) {
      ++res.skipped_queries;
      continue;
    }
    ++res.valid_queries;
    res.per_query.push_back(acc / static_cast<double>(hits));
  }
  if (res.valid_queries)
    res.map = std::accumulate(res.per_query.begin(), res.per_query.end(), 0.0) /
              static_cast<double>(res.valid_queries);
  return res;
}

inline RankingMetrics compute_ranking(const DistanceMatrix& d, const RankingLabels& l, std::size_t max_rank) {
  auto cmc = compute_cmc(d, l, max_rank);
  auto map = compute_map(d, l);
  RankingMetrics m;
  m.cmc = std::move(cmc.cmc);
  m.map = map.map;
  m.per_query_ap = std::move(map.per_query);
  m.valid_queries = cmc.valid_queries;
  m.skipped_queries = cmc.skipped_queries;
  return m;
}

// Euclidean distances between rows of a (n×dim) and rows of b (m×dim).
inline DistanceMatrix euclidean_distances(std::span<const double> a, std::size_t n, std::span<const double> b,
                                          std::size_t m, std::size_t dim) {
  if (a.size() != n * dim || b.size() != m * dim) throw DimensionError("euclidean_distances: size mismatch");
  DistanceMatrix d{n, m, std::vector<double>(n * m)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = a[i * dim + k] - b[j * dim + k];
        acc += diff * diff;
      }
      d.values[i * m + j] = std::sqrt(acc);
    }
  return d;
}

}  // namespace cstnet
