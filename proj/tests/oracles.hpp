#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hat/tensor.hpp"

namespace hat::oracle {

/// softmax(q k^T / sqrt(d)) v for one head, element by element in double.
inline Tensor<double> attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v) {
  const int64_t n = q.dim(0), d = q.dim(1);
  Tensor<double> out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> s(static_cast<size_t>(n));
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      for (int64_t c = 0; c < d; ++c) s[j] += q.at({i, c}) * k.at({j, c});
      s[j] /= std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (int64_t j = 0; j < n; ++j)
      for (int64_t c = 0; c < d; ++c) out.at({i, c}) += s[j] / z * v.at({j, c});
  }
  return out;
}

/// Rows [0, S) and channels [c0, c0+width) of batch entry b of a (B,S,C) tensor.
template <typename T>
Tensor<double> head_slice(const Tensor<T>& x, int64_t b, int64_t c0, int64_t width) {
  const int64_t S = x.dim(1), C = x.dim(2);
  Tensor<double> out({S, width});
  for (int64_t i = 0; i < S; ++i)
    for (int64_t c = 0; c < width; ++c) out.at({i, c}) = static_cast<double>(x[(b * S + i) * C + c0 + c]);
  return out;
}

/// AP straight from the definition: mean over hits of precision at that hit.
inline double average_precision(const std::vector<int>& rel) {
  double sum = 0;
  int hits = 0;
  for (size_t k = 0; k < rel.size(); ++k)
    if (rel[k]) sum += static_cast<double>(++hits) / static_cast<double>(k + 1);
  return hits ? sum / hits : std::numeric_limits<double>::quiet_NaN();
}

/// Batch-hard triplet loss by looking at every (anchor, positive, negative)
/// triple. Distances are computed here, not borrowed from the library.
template <typename T>
T triplet_exhaustive(const Tensor<T>& emb, const std::vector<int64_t>& labels, T margin) {
  const int64_t B = emb.dim(0), D = emb.dim(1);
  auto dist = [&](int64_t i, int64_t j) {
    T acc = 0;
    for (int64_t c = 0; c < D; ++c) {
      const T t = emb[i * D + c] - emb[j * D + c];
      acc += t * t;
    }
    return std::sqrt(std::max(acc, T(1e-12)));
  };
  T total = 0;
  for (int64_t a = 0; a < B; ++a) {
    T worst = 0;
    for (int64_t p = 0; p < B; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (int64_t n = 0; n < B; ++n) {
        if (labels[n] == labels[a]) continue;
        worst = std::max(worst, std::max(dist(a, p) - dist(a, n) + margin, T(0)));
      }
    }
    total += worst;
  }
  return total / static_cast<T>(B);
}

/// lr for every epoch 1..total of the default recipe, written out piecewise.
inline std::vector<double> lr_table(int64_t total = 150) {
  std::vector<double> t;
  for (int64_t e = 1; e <= total; ++e) {
    double lr;
    if (e <= 10) {
      lr = e == 10 ? 4e-4 : 4e-6 + (4e-4 - 4e-6) * static_cast<double>(e - 1) / 9.0;
    } else if (e < 50) {
      lr = 4e-4;
    } else {
      lr = 4e-4;
      for (int64_t b = 50; b <= e; b += 20) lr *= 0.4;
    }
    t.push_back(lr);
  }
  return t;
}

}  // namespace hat::oracle
