#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hat/ops.hpp"

namespace hat {

struct LossConfig {
  double epsilon = 0.1;  // label smoothing
  double margin = 0.3;
  double lambda = 0.5;   // weight of the auxiliary terms
  bool normalize_triplet = false;

  std::vector<std::string> validate() const {
    std::vector<std::string> errors;
    if (!(epsilon >= 0.0 && epsilon < 1.0)) errors.push_back("loss.epsilon must lie in [0, 1)");
    if (!(margin >= 0.0)) errors.push_back("loss.margin must be non-negative");
    if (!(lambda >= 0.0)) errors.push_back("loss.lambda must be non-negative");
    return errors;
  }
};

/// Smoothed cross-entropy: targets are 1-eps+eps/N on the true class and eps/N
/// elsewhere; per-sample sums over classes, mean over the batch.
template <typename T>
Var<T> id_loss(const Var<T>& logits, const std::vector<int64_t>& labels, double epsilon) {
  if (logits.value().rank() != 2) throw InputError("id_loss: logits must be (B x N_cls)");
  const int64_t B = logits.dim(0), N = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) throw InputError("id_loss: label count does not match batch");
  for (auto l : labels)
    if (l < 0 || l >= N)
      throw InputError("id_loss: label " + std::to_string(l) + " outside [0, " + std::to_string(N) + ")");
  const T eps = static_cast<T>(epsilon);
  const T off = eps / static_cast<T>(N);
  const T on = T(1) - eps + off;
  Tensor<T> probs({B, N});
  T total = 0;
  for (int64_t i = 0; i < B; ++i) {
    const T* z = logits.value().data() + i * N;
    T mx = z[0];
    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, z[j]);
    T sum = 0;
    for (int64_t j = 0; j < N; ++j) sum += std::exp(z[j] - mx);
    const T lse = mx + std::log(sum);
    T li = 0;
    for (int64_t j = 0; j < N; ++j) {
      const T logp = z[j] - lse;
      probs[i * N + j] = std::exp(logp);
      li -= (j == labels[static_cast<size_t>(i)] ? on : off) * logp;
    }
    total += li;
  }
  return make_result<T>(Tensor<T>({1}, total / static_cast<T>(B)), {logits},
                        [probs = std::move(probs), labels, B, N, on, off](Node<T>& n) {
                          auto* g = grad_of(n, 0);
                          if (!g) return;
                          const T s = n.grad[0] / static_cast<T>(B);
                          for (int64_t i = 0; i < B; ++i)
                            for (int64_t j = 0; j < N; ++j) {
                              const T q = j == labels[static_cast<size_t>(i)] ? on : off;
                              (*g)[i * N + j] += s * (probs[i * N + j] - q);
                            }
                        });
}

inline double hinge(double d_pos, double d_neg, double margin) { return std::max(0.0, d_pos - d_neg + margin); }

/// Checks that every label appears at least twice and that at least two
/// identities are present.
inline void check_pk_structure(const std::vector<int64_t>& labels) {
  std::map<int64_t, int> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() < 2) throw SamplingError("triplet_loss: batch needs at least two identities");
  for (const auto& [l, c] : counts)
    if (c < 2) throw SamplingError("triplet_loss: identity " + std::to_string(l) + " has a single sample");
}

/// Euclidean distance matrix used by the triplet loss, sqrt clamped at 1e-12.
template <typename T>
Tensor<T> embedding_distances(const Tensor<T>& emb) {
  const int64_t B = emb.dim(0), D = emb.dim(1);
  Tensor<T> dist({B, B});
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < B; ++j) {
      T acc = 0;
      for (int64_t c = 0; c < D; ++c) {
        const T t = emb[i * D + c] - emb[j * D + c];
        acc += t * t;
      }
      dist[i * B + j] = std::sqrt(std::max(acc, T(1e-12)));
    }
  return dist;
}

struct MinedPair {
  int64_t positive;
  int64_t negative;
};

/// Batch-hard mining: farthest same-label sample and nearest other-label
/// sample per anchor; ties resolve to the lowest index.
template <typename T>
std::vector<MinedPair> mine_batch_hard(const Tensor<T>& dist, const std::vector<int64_t>& labels) {
  const int64_t B = dist.dim(0);
  std::vector<MinedPair> out(static_cast<size_t>(B), {-1, -1});
  for (int64_t a = 0; a < B; ++a) {
    for (int64_t j = 0; j < B; ++j) {
      auto& m = out[static_cast<size_t>(a)];
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(a)]) {
        if (j == a) continue;
        if (m.positive < 0 || dist[a * B + j] > dist[a * B + m.positive]) m.positive = j;
      } else if (m.negative < 0 || dist[a * B + j] < dist[a * B + m.negative]) {
        m.negative = j;
      }
    }
  }
  return out;
}

/// Batch-hard triplet loss averaged over anchors.
template <typename T>
Var<T> triplet_loss(const Var<T>& embeddings, const std::vector<int64_t>& labels, double margin,
                    bool normalize = false) {
  if (embeddings.value().rank() != 2) throw InputError("triplet_loss: embeddings must be (B x D)");
  if (static_cast<int64_t>(labels.size()) != embeddings.dim(0))
    throw InputError("triplet_loss: label count does not match batch");
  check_pk_structure(labels);
  Var<T> e = normalize ? ops::l2_normalize_rows(embeddings) : embeddings;
  const int64_t B = e.dim(0), D = e.dim(1);
  Tensor<T> dist = embedding_distances(e.value());
  auto mined = mine_batch_hard(dist, labels);
  const T m = static_cast<T>(margin);
  T total = 0;
  std::vector<char> active(static_cast<size_t>(B));
  for (int64_t a = 0; a < B; ++a) {
    const auto& p = mined[static_cast<size_t>(a)];
    const T v = dist[a * B + p.positive] - dist[a * B + p.negative] + m;
    active[static_cast<size_t>(a)] = v > T(0);
    total += std::max(v, T(0));
  }
  return make_result<T>(
      Tensor<T>({1}, total / static_cast<T>(B)), {e},
      [dist = std::move(dist), mined = std::move(mined), active = std::move(active), B, D](Node<T>& n) {
        auto* g = grad_of(n, 0);
        if (!g) return;
        const Tensor<T>& x = n.parents[0]->value;
        const T s = n.grad[0] / static_cast<T>(B);
        // d||x_a - x_j|| / dx_a = (x_a - x_j) / ||x_a - x_j||
        auto push = [&](int64_t a, int64_t j, T sign) {
          const T d = dist[a * B + j];
          for (int64_t c = 0; c < D; ++c) {
            const T u = (x[a * D + c] - x[j * D + c]) / d * sign * s;
            (*g)[a * D + c] += u;
            (*g)[j * D + c] -= u;
          }
        };
        for (int64_t a = 0; a < B; ++a) {
          if (!active[static_cast<size_t>(a)]) continue;
          push(a, mined[static_cast<size_t>(a)].positive, T(1));
          push(a, mined[static_cast<size_t>(a)].negative, T(-1));
        }
      });
}

/// Itemized loss values for logging.
struct LossReport {
  double id_loss = 0;
  double triplet_loss = 0;
  double mfe_id_loss = 0;
  double mfe_triplet_loss = 0;
  std::vector<double> aux_losses;  // id + triplet per active level
  double aux_total() const {
    double s = 0;
    for (double a : aux_losses) s += a;
    return s;
  }
  double total = 0;
};

template <typename T>
struct HeadLossInput {
  Var<T> logits;
  Var<T> embedding;
};

template <typename T>
struct TotalLoss {
  Var<T> value;
  LossReport report;
};

/// total = id + triplet (main head) + [mfe id + mfe triplet] + lambda * sum_l (id_l + triplet_l).
/// Pass an empty `aux` to drop the auxiliary terms and an undefined `mfe` to
/// drop backbone supervision.
template <typename T>
TotalLoss<T> total_loss(const HeadLossInput<T>& main, const std::vector<HeadLossInput<T>>& aux,
                        const std::optional<HeadLossInput<T>>& mfe, const std::vector<int64_t>& labels,
                        const LossConfig& cfg) {
  TotalLoss<T> out;
  Var<T> id = id_loss(main.logits, labels, cfg.epsilon);
  Var<T> tri = triplet_loss(main.embedding, labels, cfg.margin, cfg.normalize_triplet);
  out.report.id_loss = id.item();
  out.report.triplet_loss = tri.item();
  Var<T> total = ops::add(id, tri);
  if (mfe) {
    Var<T> mid = id_loss(mfe->logits, labels, cfg.epsilon);
    Var<T> mtri = triplet_loss(mfe->embedding, labels, cfg.margin, cfg.normalize_triplet);
    out.report.mfe_id_loss = mid.item();
    out.report.mfe_triplet_loss = mtri.item();
    total = ops::add(total, ops::add(mid, mtri));
  }
  if (!aux.empty()) {
    Var<T> aux_sum;
    for (const auto& h : aux) {
      Var<T> term = ops::add(id_loss(h.logits, labels, cfg.epsilon),
                             triplet_loss(h.embedding, labels, cfg.margin, cfg.normalize_triplet));
      out.report.aux_losses.push_back(term.item());
      aux_sum = aux_sum.defined() ? ops::add(aux_sum, term) : term;
    }
    total = ops::add(total, ops::scale(aux_sum, static_cast<T>(cfg.lambda)));
  }
  out.report.total = total.item();
  out.value = total;
  return out;
}

}  // namespace hat
