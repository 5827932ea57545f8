#pragma once

#include <cstddef>
#include <vector>

#include "cstnet/data.hpp"
#include "cstnet/metrics.hpp"
#include "cstnet/model.hpp"
#include "cstnet/tensor.hpp"
#include "cstnet/training.hpp"

namespace cstnet {

struct Embeddings {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // count×dim
  std::vector<int> ids;
  std::vector<int> cams;
};

// One clip per sequence: T evenly spaced frames, looped when too short.
template <typename T>
Embeddings embed_sequences(const Cstnet<T>& model, const VideoDataset& ds, const std::vector<std::size_t>& seqs,
                           std::size_t batch = 16) {
  NoGradGuard guard;
  Embeddings e;
  e.count = seqs.size();
  e.dim = model.config().embedding_dim;
  const std::size_t t = model.config().clip_len;
  for (std::size_t start = 0; start < seqs.size(); start += batch) {
    std::vector<ClipRef> clips;
    for (std::size_t i = start; i < std::min(seqs.size(), start + batch); ++i)
      clips.push_back({seqs[i], evenly_spaced_frames(ds.sequences.at(seqs[i]).length(), t)});
    auto out = model.forward(assemble_clips<T>(ds, clips), false);
    for (auto v : out.feature.data()) e.values.push_back(static_cast<double>(v));
  }
  for (auto s : seqs) {
    e.ids.push_back(ds.sequences[s].identity);
    e.cams.push_back(ds.sequences[s].camera);
  }
  return e;
}

inline RankingMetrics evaluate_embeddings(const Embeddings& query, const Embeddings& gallery, std::size_t max_rank) {
  if (query.dim != gallery.dim) throw DimensionError("evaluate_embeddings: query/gallery dimension mismatch");
  auto d = euclidean_distances(query.values, query.count, gallery.values, gallery.count, query.dim);
  RankingLabels l{query.ids, gallery.ids, query.cams, gallery.cams};
  return compute_ranking(d, l, max_rank);
}

template <typename T>
RankingMetrics evaluate(const Cstnet<T>& model, const VideoDataset& ds, std::size_t max_rank = 20) {
  const auto q = ds.indices(Split::query);
  const auto g = ds.indices(Split::gallery);
  if (q.empty() || g.empty()) throw ContractError("evaluate: dataset has no query or gallery sequences");
  return evaluate_embeddings(embed_sequences(model, ds, q), embed_sequences(model, ds, g), max_rank);
}

}  // namespace cstnet
