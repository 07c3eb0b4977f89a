#include "hat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "hat/kernels.hpp"

namespace hat::metrics {

namespace {
Tensor<float> l2_rows(const Tensor<float>& x) {
  Tensor<float> out = x;
  const int64_t n = x.dim(0), d = x.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += static_cast<double>(x[i * d + j]) * x[i * d + j];
    const double norm = std::max(std::sqrt(s), 1e-12);
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>(x[i * d + j] / norm);
  }
  return out;
}
}  // namespace

Tensor<float> distance_matrix(const Tensor<float>& query, const Tensor<float>& gallery, bool l2_normalize) {
  if (query.rank() != 2 || gallery.rank() != 2 || query.dim(1) != gallery.dim(1))
    throw InputError("distance_matrix: feature widths differ " + shape_str(query.shape()) + " vs " +
                     shape_str(gallery.shape()));
  const Tensor<float> q = l2_normalize ? l2_rows(query) : query;
  const Tensor<float> g = l2_normalize ? l2_rows(gallery) : gallery;
  Tensor<float> dist({q.dim(0), g.dim(0)});
  kernels::pairwise_sq_dist(q.data(), g.data(), q.dim(0), g.dim(0), q.dim(1), dist.data());
  for (auto& v : dist.vec()) v = std::sqrt(v);
  return dist;
}

double average_precision(const std::vector<int>& relevance) {
  double hits = 0, sum = 0;
  for (size_t i = 0; i < relevance.size(); ++i)
    if (relevance[i]) {
      hits += 1;
      sum += hits / static_cast<double>(i + 1);
    }
  return hits > 0 ? sum / hits : 0.0;
}

EvalResult evaluate(const Tensor<float>& dist, const std::vector<SampleMeta>& query,
                    const std::vector<SampleMeta>& gallery, int max_rank) {
  const auto Q = static_cast<int64_t>(query.size()), G = static_cast<int64_t>(gallery.size());
  if (dist.rank() != 2 || dist.dim(0) != Q || dist.dim(1) != G)
    throw InputError("evaluate: distance matrix " + shape_str(dist.shape()) + " does not match " +
                     std::to_string(Q) + " queries x " + std::to_string(G) + " gallery entries");
  EvalResult r;
  r.cmc.assign(static_cast<size_t>(max_rank), 0.0);
  r.per_query_ap.assign(static_cast<size_t>(Q), std::numeric_limits<double>::quiet_NaN());
  std::vector<int64_t> order(static_cast<size_t>(G));
  double ap_sum = 0;
  for (int64_t qi = 0; qi < Q; ++qi) {
    const float* row = dist.data() + qi * G;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [row](int64_t a, int64_t b) { return row[a] < row[b]; });
    const auto& qm = query[static_cast<size_t>(qi)];
    std::vector<int> relevance;
    relevance.reserve(order.size());
    for (int64_t g : order) {
      const auto& gm = gallery[static_cast<size_t>(g)];
      if (gm.identity < 0) continue;
      if (gm.identity == qm.identity && gm.camera == qm.camera) continue;
      relevance.push_back(gm.identity == qm.identity ? 1 : 0);
    }
    const auto first = std::find(relevance.begin(), relevance.end(), 1);
    if (qm.identity < 0 || first == relevance.end()) continue;
    const auto first_rank = first - relevance.begin();
    for (auto k = first_rank; k < max_rank; ++k) r.cmc[static_cast<size_t>(k)] += 1.0;
    const double ap = average_precision(relevance);
    r.per_query_ap[static_cast<size_t>(qi)] = ap;
    ap_sum += ap;
    ++r.num_valid_queries;
  }
  if (r.num_valid_queries == 0) throw InputError("evaluate: no query has a valid true match in the gallery");
  const auto n = static_cast<double>(r.num_valid_queries);
  r.mAP = ap_sum / n;
  for (auto& c : r.cmc) c /= n;
  return r;
}

std::string to_json(const EvalResult& r, const std::string& config_hash) {
  nlohmann::json j;
  j["map"] = r.mAP;
  j["cmc"] = r.cmc;
  j["num_valid_queries"] = r.num_valid_queries;
  j["config_hash"] = config_hash;
  return j.dump(2);
}

}  // namespace hat::metrics
