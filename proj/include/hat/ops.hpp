#pragma once

// Differentiable operations on Var<T>. Layout conventions:
//   feature maps   (B, C, H, W)
//   token batches  (B, S, C)
//   matrices       (rows, cols)

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "hat/autograd.hpp"
#include "hat/kernels.hpp"

namespace hat::ops {

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InputError(msg);
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (size_t k = 0; k < 2; ++k)
      if (auto* g = grad_of(n, k))
        for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += s * n.grad[i];
  });
}

/// sum_i w[i] * x[i]; used to project outputs onto a scalar for gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  detail::require(x.numel() == w.numel(), "weighted_sum: size mismatch");
  T acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.value()[i] * w[i];
  return make_result<T>(Tensor<T>({1}, acc), {x}, [w](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[0] * w[i];
  });
}

/// y = x W^T + b over the last axis. W is (out, in); b is (out) or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& W, const Var<T>& b) {
  const int64_t in = W.dim(1), out_f = W.dim(0);
  detail::require(x.shape().back() == in, "linear: input width " + std::to_string(x.shape().back()) +
                                              " does not match weight " + shape_str(W.shape()));
  const int64_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out_f;
  Tensor<T> out(os);
  kernels::gemm_nt(rows, out_f, in, x.value().data(), W.value().data(), out.data(), T(0));
  if (b.defined())
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < out_f; ++j) out[r * out_f + j] += b.value()[j];
  std::vector<Var<T>> inputs{x, W};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(out), std::move(inputs), [rows, in, out_f](Node<T>& n) {
    const Tensor<T>& xv = n.parents[0]->value;
    const Tensor<T>& wv = n.parents[1]->value;
    if (auto* gx = grad_of(n, 0)) kernels::gemm_nn(rows, in, out_f, n.grad.data(), wv.data(), gx->data(), T(1));
    if (auto* gw = grad_of(n, 1)) kernels::gemm_tn(out_f, in, rows, n.grad.data(), xv.data(), gw->data(), T(1));
    if (n.parents.size() > 2)
      if (auto* gb = grad_of(n, 2))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < out_f; ++j) (*gb)[j] += n.grad[r * out_f + j];
  });
}

/// 2-D convolution, square stride and zero padding. W is (O, I, kh, kw).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& W, const Var<T>& b, int64_t stride, int64_t pad) {
  detail::require(x.value().rank() == 4, "conv2d: expected (B,C,H,W) input, got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const int64_t O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  detail::require(W.dim(1) == C, "conv2d: input channels " + std::to_string(C) + " vs weight " +
                                     shape_str(W.shape()));
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (Wd + 2 * pad - kw) / stride + 1;
  detail::require(OH > 0 && OW > 0, "conv2d: empty output for input " + shape_str(x.shape()));
  const int64_t K = C * kh * kw, P = B * OH * OW, plane = OH * OW;

  Tensor<T> col({K, P});
  kernels::im2col(x.value().data(), B, C, H, Wd, kh, kw, stride, pad, OH, OW, col.data());
  Tensor<T> tmp({O, P});
  kernels::gemm_nn(O, P, K, W.value().data(), col.data(), tmp.data(), T(0));
  Tensor<T> out({B, O, OH, OW});
  for (int64_t o = 0; o < O; ++o) {
    const T bias = b.defined() ? b.value()[o] : T(0);
    for (int64_t bi = 0; bi < B; ++bi)
      for (int64_t p = 0; p < plane; ++p) out[(bi * O + o) * plane + p] = tmp[o * P + bi * plane + p] + bias;
  }
  std::vector<Var<T>> inputs{x, W};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [col = std::move(col), B, C, H, Wd, O, kh, kw, stride, pad, OH, OW, K, P, plane](Node<T>& n) {
        Tensor<T> dout({O, P});
        for (int64_t o = 0; o < O; ++o)
          for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t p = 0; p < plane; ++p) dout[o * P + bi * plane + p] = n.grad[(bi * O + o) * plane + p];
        if (auto* gw = grad_of(n, 1)) kernels::gemm_nt(O, K, P, dout.data(), col.data(), gw->data(), T(1));
        if (n.parents.size() > 2)
          if (auto* gb = grad_of(n, 2))
            for (int64_t o = 0; o < O; ++o) {
              T s = 0;
              for (int64_t p = 0; p < P; ++p) s += dout[o * P + p];
              (*gb)[o] += s;
            }
        if (auto* gx = grad_of(n, 0)) {
          Tensor<T> dcol({K, P});
          kernels::gemm_tn(K, P, O, n.parents[1]->value.data(), dout.data(), dcol.data(), T(0));
          kernels::col2im(dcol.data(), B, C, H, Wd, kh, kw, stride, pad, OH, OW, gx->data());
        }
      });
}

/// Running statistics for batch normalization, owned by the module.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

/// Batch normalization over every axis except 1, for (B,C) or (B,C,H,W).
/// Training mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                  bool training) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2 || s.size() == 4, "batch_norm: expected rank 2 or 4, got " + shape_str(s));
  const int64_t B = s[0], C = s[1], plane = s.size() == 4 ? s[2] * s[3] : 1;
  detail::require(gamma.numel() == C, "batch_norm: channel mismatch");
  const int64_t count = B * plane;
  const Tensor<T>& xv = x.value();

  Tensor<T> mean({C}), invstd({C});
  if (training) {
    detail::require(count > 1, "batch_norm: training mode needs more than one value per channel");
    for (int64_t c = 0; c < C; ++c) {
      double m = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < plane; ++p) m += xv[(b * C + c) * plane + p];
      m /= static_cast<double>(count);
      double v = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < plane; ++p) {
          const double d = xv[(b * C + c) * plane + p] - m;
          v += d * d;
        }
      const double biased = v / static_cast<double>(count);
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(biased + static_cast<double>(state.eps)));
      const T unbiased = static_cast<T>(v / static_cast<double>(count - 1));
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor<T> xhat(s), out(s);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < plane; ++p) {
        const int64_t i = (b * C + c) * plane + p;
        xhat[i] = (xv[i] - mean[c]) * invstd[c];
        out[i] = xhat[i] * gamma.value()[c] + beta.value()[c];
      }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), B, C, plane, count, training](Node<T>& n) {
        const Tensor<T>& gv = n.parents[1]->value;
        Tensor<T> sum_dy({C}), sum_dy_xhat({C});
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < plane; ++p) {
              const int64_t i = (b * C + c) * plane + p;
              sum_dy[c] += n.grad[i];
              sum_dy_xhat[c] += n.grad[i] * xhat[i];
            }
        if (auto* gg = grad_of(n, 1))
          for (int64_t c = 0; c < C; ++c) (*gg)[c] += sum_dy_xhat[c];
        if (auto* gb = grad_of(n, 2))
          for (int64_t c = 0; c < C; ++c) (*gb)[c] += sum_dy[c];
        if (auto* gx = grad_of(n, 0)) {
          const T inv_n = T(1) / static_cast<T>(count);
          for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
              for (int64_t p = 0; p < plane; ++p) {
                const int64_t i = (b * C + c) * plane + p;
                if (training)
                  (*gx)[i] += gv[c] * invstd[c] * inv_n *
                              (static_cast<T>(count) * n.grad[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                else
                  (*gx)[i] += gv[c] * invstd[c] * n.grad[i];
              }
        }
      });
}

/// Layer normalization over the last axis with elementwise affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int64_t C = x.shape().back();
  detail::require(gamma.numel() == C, "layer_norm: width mismatch");
  const int64_t rows = x.numel() / C;
  const Tensor<T>& xv = x.value();
  Tensor<T> xhat(x.shape()), out(x.shape()), invstd({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * C;
    T m = 0;
    for (int64_t c = 0; c < C; ++c) m += xr[c];
    m /= static_cast<T>(C);
    T v = 0;
    for (int64_t c = 0; c < C; ++c) v += (xr[c] - m) * (xr[c] - m);
    v /= static_cast<T>(C);
    invstd[r] = T(1) / std::sqrt(v + eps);
    for (int64_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (xr[c] - m) * invstd[r];
      out[r * C + c] = xhat[r * C + c] * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [xhat = std::move(xhat), invstd = std::move(invstd), rows, C](Node<T>& n) {
                          const Tensor<T>& gv = n.parents[1]->value;
                          auto* gx = grad_of(n, 0);
                          auto* gg = grad_of(n, 1);
                          auto* gb = grad_of(n, 2);
                          std::vector<T> dxhat(static_cast<size_t>(C));
                          for (int64_t r = 0; r < rows; ++r) {
                            T s1 = 0, s2 = 0;
                            for (int64_t c = 0; c < C; ++c) {
                              const int64_t i = r * C + c;
                              if (gg) (*gg)[c] += n.grad[i] * xhat[i];
                              if (gb) (*gb)[c] += n.grad[i];
                              dxhat[static_cast<size_t>(c)] = n.grad[i] * gv[c];
                              s1 += dxhat[static_cast<size_t>(c)];
                              s2 += dxhat[static_cast<size_t>(c)] * xhat[i];
                            }
                            if (!gx) continue;
                            const T k = invstd[r] / static_cast<T>(C);
                            for (int64_t c = 0; c < C; ++c) {
                              const int64_t i = r * C + c;
                              (*gx)[i] += k * (static_cast<T>(C) * dxhat[static_cast<size_t>(c)] - s1 - xhat[i] * s2);
                            }
                          }
                        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {x}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i)
        if (n.value[i] > T(0)) (*g)[i] += n.grad[i];
  });
}

template <typename T>
T gelu_value(T u) {
  return T(0.5) * u * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T u) {
  const T cdf = T(0.5) * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * u * u) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + u * pdf;
}

/// Exact (erf-based) Gaussian error linear unit.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = gelu_value(v);
  return make_result<T>(std::move(out), {x}, [](Node<T>& n) {
    const Tensor<T>& xv = n.parents[0]->value;
    if (auto* g = grad_of(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * gelu_derivative(xv[i]);
  });
}

/// Non-overlapping max pooling with window (kh, kw) and equal stride. Ties go
/// to the first element in row-major window order.
template <typename T>
Var<T> max_pool(const Var<T>& x, int64_t kh, int64_t kw) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % kh != 0 || W % kw != 0)
    throw ConfigError("max_pool: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " does not tile " + std::to_string(H) + "x" + std::to_string(W));
  const int64_t OH = H / kh, OW = W / kw;
  Tensor<T> out({B, C, OH, OW});
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  const Tensor<T>& xv = x.value();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t best = bc * H * W + (oy * kh) * W + ox * kw;
        for (int64_t i = 0; i < kh; ++i)
          for (int64_t j = 0; j < kw; ++j) {
            const int64_t idx = bc * H * W + (oy * kh + i) * W + ox * kw + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const int64_t o = (bc * OH + oy) * OW + ox;
        out[o] = xv[best];
        argmax[static_cast<size_t>(o)] = best;
      }
  return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += n.grad[static_cast<int64_t>(o)];
  });
}

namespace detail {
// Source coordinate for half-pixel (corner-aligned = false) resampling.
struct Tap {
  int64_t i0, i1;
  double w1;
};
inline Tap bilinear_tap(int64_t out_idx, int64_t in_size, int64_t out_size) {
  double src = (static_cast<double>(out_idx) + 0.5) * static_cast<double>(in_size) / static_cast<double>(out_size) - 0.5;
  if (src < 0) src = 0;
  int64_t i0 = static_cast<int64_t>(std::floor(src));
  if (i0 > in_size - 1) i0 = in_size - 1;
  const int64_t i1 = std::min(i0 + 1, in_size - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}
}  // namespace detail

/// Bilinear resize with half-pixel centers (corner alignment off).
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<detail::Tap> ty, tx;
  for (int64_t i = 0; i < out_h; ++i) ty.push_back(detail::bilinear_tap(i, H, out_h));
  for (int64_t j = 0; j < out_w; ++j) tx.push_back(detail::bilinear_tap(j, W, out_w));
  Tensor<T> out({B, C, out_h, out_w});
  const Tensor<T>& xv = x.value();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < out_h; ++i)
      for (int64_t j = 0; j < out_w; ++j) {
        const auto& a = ty[static_cast<size_t>(i)];
        const auto& b = tx[static_cast<size_t>(j)];
        const T* src = xv.data() + bc * H * W;
        const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
        const T top = src[a.i0 * W + b.i0] * (T(1) - wx) + src[a.i0 * W + b.i1] * wx;
        const T bot = src[a.i1 * W + b.i0] * (T(1) - wx) + src[a.i1 * W + b.i1] * wx;
        out[(bc * out_h + i) * out_w + j] = top * (T(1) - wy) + bot * wy;
      }
  return make_result<T>(std::move(out), {x}, [ty, tx, B, C, H, W, out_h, out_w](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t i = 0; i < out_h; ++i)
        for (int64_t j = 0; j < out_w; ++j) {
          const auto& a = ty[static_cast<size_t>(i)];
          const auto& b = tx[static_cast<size_t>(j)];
          const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
          const T d = n.grad[(bc * out_h + i) * out_w + j];
          T* dst = g->data() + bc * H * W;
          dst[a.i0 * W + b.i0] += d * (T(1) - wy) * (T(1) - wx);
          dst[a.i0 * W + b.i1] += d * (T(1) - wy) * wx;
          dst[a.i1 * W + b.i0] += d * wy * (T(1) - wx);
          dst[a.i1 * W + b.i1] += d * wy * wx;
        }
  });
}

/// Channel concatenation [a; b] of two (B,C,H,W) maps with equal B, H, W.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw AggregationError("concat_channels: incompatible maps " + shape_str(sa) + " and " + shape_str(sb));
  const int64_t B = sa[0], Ca = sa[1], Cb = sb[1], plane = sa[2] * sa[3];
  Tensor<T> out({B, Ca + Cb, sa[2], sa[3]});
  for (int64_t bi = 0; bi < B; ++bi) {
    std::copy_n(a.value().data() + bi * Ca * plane, Ca * plane, out.data() + bi * (Ca + Cb) * plane);
    std::copy_n(b.value().data() + bi * Cb * plane, Cb * plane, out.data() + (bi * (Ca + Cb) + Ca) * plane);
  }
  return make_result<T>(std::move(out), {a, b}, [B, Ca, Cb, plane](Node<T>& n) {
    if (auto* ga = grad_of(n, 0))
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t i = 0; i < Ca * plane; ++i) (*ga)[bi * Ca * plane + i] += n.grad[bi * (Ca + Cb) * plane + i];
    if (auto* gb = grad_of(n, 1))
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t i = 0; i < Cb * plane; ++i)
          (*gb)[bi * Cb * plane + i] += n.grad[(bi * (Ca + Cb) + Ca) * plane + i];
  });
}

/// Concatenation along the last axis of two (B, D) matrices.
template <typename T>
Var<T> concat_features(const Var<T>& a, const Var<T>& b) {
  detail::require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(0) == b.dim(0),
                  "concat_features: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t B = a.dim(0), Da = a.dim(1), Db = b.dim(1);
  Tensor<T> out({B, Da + Db});
  for (int64_t i = 0; i < B; ++i) {
    std::copy_n(a.value().data() + i * Da, Da, out.data() + i * (Da + Db));
    std::copy_n(b.value().data() + i * Db, Db, out.data() + i * (Da + Db) + Da);
  }
  return make_result<T>(std::move(out), {a, b}, [B, Da, Db](Node<T>& n) {
    if (auto* ga = grad_of(n, 0))
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < Da; ++j) (*ga)[i * Da + j] += n.grad[i * (Da + Db) + j];
    if (auto* gb = grad_of(n, 1))
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < Db; ++j) (*gb)[i * Db + j] += n.grad[i * (Da + Db) + Da + j];
  });
}

/// (B,C,h,w) map -> (B, 1+h*w, C) sequence: CLS first, then spatial positions
/// in row-major order, plus the position embedding on every slot.
template <typename T>
Var<T> tokens_with_cls(const Var<T>& map, const Var<T>& cls, const Var<T>& pos) {
  const int64_t B = map.dim(0), C = map.dim(1), N = map.dim(2) * map.dim(3);
  detail::require(cls.numel() == C, "tokenize: CLS width " + std::to_string(cls.numel()) + " != " + std::to_string(C));
  detail::require(pos.dim(0) == N + 1 && pos.dim(1) == C,
                  "tokenize: position embedding " + shape_str(pos.shape()) + " does not cover " +
                      std::to_string(N + 1) + " tokens of width " + std::to_string(C));
  const int64_t S = N + 1;
  Tensor<T> out({B, S, C});
  const Tensor<T>& mv = map.value();
  const Tensor<T>& pv = pos.value();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) out[(b * S) * C + c] = cls.value()[c] + pv[c];
    for (int64_t p = 0; p < N; ++p)
      for (int64_t c = 0; c < C; ++c) out[(b * S + 1 + p) * C + c] = mv[(b * C + c) * N + p] + pv[(1 + p) * C + c];
  }
  return make_result<T>(std::move(out), {map, cls, pos}, [B, C, N, S](Node<T>& n) {
    if (auto* gm = grad_of(n, 0))
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < N; ++p)
          for (int64_t c = 0; c < C; ++c) (*gm)[(b * C + c) * N + p] += n.grad[(b * S + 1 + p) * C + c];
    if (auto* gc = grad_of(n, 1))
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) (*gc)[c] += n.grad[(b * S) * C + c];
    if (auto* gp = grad_of(n, 2))
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < S * C; ++i) (*gp)[i] += n.grad[b * S * C + i];
  });
}

/// Inverse of the spatial part of tokens_with_cls: drops token 0 and reshapes
/// tokens 1..N back to (B, C, h, w).
template <typename T>
Var<T> spatial_tokens_to_map(const Var<T>& x, int64_t h, int64_t w) {
  const int64_t B = x.dim(0), S = x.dim(1), C = x.dim(2), N = S - 1;
  if (N != h * w)
    throw std::logic_error("spatial_tokens_to_map: " + std::to_string(N) + " tokens cannot fill " +
                           std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> out({B, C, h, w});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < N; ++p)
      for (int64_t c = 0; c < C; ++c) out[(b * C + c) * N + p] = x.value()[(b * S + 1 + p) * C + c];
  return make_result<T>(std::move(out), {x}, [B, C, N, S](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < N; ++p)
          for (int64_t c = 0; c < C; ++c) (*g)[(b * S + 1 + p) * C + c] += n.grad[(b * C + c) * N + p];
  });
}

/// Token `index` of every sequence: (B,S,C) -> (B,C).
template <typename T>
Var<T> select_token(const Var<T>& x, int64_t index) {
  const int64_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  Tensor<T> out({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) out[b * C + c] = x.value()[(b * S + index) * C + c];
  return make_result<T>(std::move(out), {x}, [B, S, C, index](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) (*g)[(b * S + index) * C + c] += n.grad[b * C + c];
  });
}

/// Multi-head scaled dot-product attention on (B,S,C) projections. When
/// `weights_out` is set it receives the (B, heads, S, S) softmax weights.
template <typename T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t heads,
                            Tensor<T>* weights_out = nullptr) {
  detail::require(q.shape() == k.shape() && q.shape() == v.shape() && q.value().rank() == 3,
                  "attention: Q/K/V shapes must match (B,S,C)");
  const int64_t B = q.dim(0), S = q.dim(1), C = q.dim(2);
  if (heads <= 0 || C % heads != 0)
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(C));
  const int64_t dh = C / heads;
  Tensor<T> out({B, S, C});
  Tensor<T> probs({B, heads, S, S});
  kernels::attention_forward(q.value().data(), k.value().data(), v.value().data(), B, S, heads, dh, out.data(),
                             probs.data());
  if (weights_out) *weights_out = probs;
  return make_result<T>(std::move(out), {q, k, v}, [probs = std::move(probs), B, S, heads, dh](Node<T>& n) {
    const int64_t count = B * S * heads * dh;
    Tensor<T> dq({count}), dk({count}), dv({count});
    kernels::attention_backward(n.parents[0]->value.data(), n.parents[1]->value.data(), n.parents[2]->value.data(),
                                probs.data(), n.grad.data(), B, S, heads, dh, dq.data(), dk.data(), dv.data());
    const Tensor<T>* parts[3] = {&dq, &dk, &dv};
    for (size_t p = 0; p < 3; ++p)
      if (auto* g = grad_of(n, p))
        for (int64_t i = 0; i < count; ++i) (*g)[i] += (*parts[p])[i];
  });
}

/// (B,C,H,W) -> (B,C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({B, C});
  for (int64_t i = 0; i < B * C; ++i) {
    T s = 0;
    for (int64_t p = 0; p < plane; ++p) s += x.value()[i * plane + p];
    out[i] = s / static_cast<T>(plane);
  }
  return make_result<T>(std::move(out), {x}, [B, C, plane](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (int64_t i = 0; i < B * C; ++i)
        for (int64_t p = 0; p < plane; ++p) (*g)[i * plane + p] += n.grad[i] / static_cast<T>(plane);
  });
}

/// Row-wise L2 normalization of a (B, D) matrix.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const int64_t B = x.dim(0), D = x.dim(1);
  Tensor<T> out(x.shape()), norms({B});
  for (int64_t i = 0; i < B; ++i) {
    T s = 0;
    for (int64_t j = 0; j < D; ++j) s += x.value()[i * D + j] * x.value()[i * D + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int64_t j = 0; j < D; ++j) out[i * D + j] = x.value()[i * D + j] / norms[i];
  }
  return make_result<T>(std::move(out), {x}, [norms = std::move(norms), B, D](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    for (int64_t i = 0; i < B; ++i) {
      T dot = 0;
      for (int64_t j = 0; j < D; ++j) dot += n.grad[i * D + j] * n.value[i * D + j];
      for (int64_t j = 0; j < D; ++j) (*g)[i * D + j] += (n.grad[i * D + j] - n.value[i * D + j] * dot) / norms[i];
    }
  });
}

}  // namespace hat::ops
