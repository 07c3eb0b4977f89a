#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hat/tensor.hpp"

namespace hat::metrics {

struct SampleMeta {
  int64_t identity;  // -1 marks a distractor
  int64_t camera;
};

struct EvalResult {
  double mAP = 0;
  std::vector<double> cmc;           // cmc[k-1] = Rank-k accuracy
  std::vector<double> per_query_ap;  // NaN for queries without a valid match
  int64_t num_valid_queries = 0;

  double rank(int k) const { return cmc.at(static_cast<size_t>(k - 1)); }
};

/// Pairwise Euclidean distances (Q x G); rows optionally L2-normalized first.
Tensor<float> distance_matrix(const Tensor<float>& query, const Tensor<float>& gallery, bool l2_normalize = false);

/// Market-1501 protocol. Per query, gallery entries sharing both identity and
/// camera with it, and distractor entries, are ignored. Ranking is a stable
/// sort by (distance, gallery index). Queries with no remaining true match are
/// left out of the averages. Throws InputError when no query is valid.
EvalResult evaluate(const Tensor<float>& dist, const std::vector<SampleMeta>& query,
                    const std::vector<SampleMeta>& gallery, int max_rank = 50);

/// Average precision of a ranked relevance list (1 = true match).
double average_precision(const std::vector<int>& relevance);

std::string to_json(const EvalResult& r, const std::string& config_hash);

}  // namespace hat::metrics
