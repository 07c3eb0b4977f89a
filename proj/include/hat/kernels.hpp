#pragma once

// Dense compute kernels. Every kernel exists twice: a plain serial reference in
// `kernels::serial` and an OpenMP version in `kernels::omp`. The autodiff ops
// call the unqualified `kernels::` aliases (OpenMP). Tests check the pair
// against each other; bench/ times them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace hat::kernels {

// Minimum multiply-add count before a parallel region is opened.
inline constexpr int64_t kParallelGrain = 1 << 15;

namespace serial {

// C[M,N] = beta*C + A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) c[j] = beta == T(0) ? T(0) : beta * c[j];
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] = beta*C + A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (int64_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = 0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] = (beta == T(0) ? T(0) : beta * C[i * N + j]) + acc;
    }
  }
}

// C[M,N] = beta*C + A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) c[j] = beta == T(0) ? T(0) : beta * c[j];
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[k * M + i];
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// Unfolds a batch of (C,H,W) images into col[C*kh*kw, batch*OH*OW].
template <typename T>
void im2col(const T* x, int64_t batch, int64_t channels, int64_t height, int64_t width, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t out_h, int64_t out_w, T* col) {
  const int64_t cols = batch * out_h * out_w;
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (int64_t b = 0; b < batch; ++b) {
          const T* img = x + (b * channels + c) * height * width;
          for (int64_t oy = 0; oy < out_h; ++oy) {
            const int64_t iy = oy * stride - pad + ki;
            for (int64_t ox = 0; ox < out_w; ++ox) {
              const int64_t ix = ox * stride - pad + kj;
              const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
              row[(b * out_h + oy) * out_w + ox] = inside ? img[iy * width + ix] : T(0);
            }
          }
        }
      }
}

// Adjoint of im2col: accumulates col back into dx (dx must be pre-zeroed).
template <typename T>
void col2im(const T* col, int64_t batch, int64_t channels, int64_t height, int64_t width, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t out_h, int64_t out_w, T* dx) {
  const int64_t cols = batch * out_h * out_w;
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (int64_t b = 0; b < batch; ++b) {
          T* img = dx + (b * channels + c) * height * width;
          for (int64_t oy = 0; oy < out_h; ++oy) {
            const int64_t iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= height) continue;
            for (int64_t ox = 0; ox < out_w; ++ox) {
              const int64_t ix = ox * stride - pad + kj;
              if (ix < 0 || ix >= width) continue;
              img[iy * width + ix] += row[(b * out_h + oy) * out_w + ox];
            }
          }
        }
      }
}

// Scaled dot-product attention per (batch, head) on (B,S,C) tensors; head h
// owns channels [h*dh, (h+1)*dh). probs is (B,H,S,S).
template <typename T>
void attention_forward(const T* q, const T* k, const T* v, int64_t batch, int64_t seq, int64_t heads,
                       int64_t dh, T* out, T* probs) {
  const int64_t width = heads * dh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      T* p = probs + (b * heads + h) * seq * seq;
      for (int64_t i = 0; i < seq; ++i) {
        const T* qi = q + (b * seq + i) * width + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < seq; ++j) {
          const T* kj = k + (b * seq + j) * width + h * dh;
          T s = 0;
          for (int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * seq + j] = s * scale;
          mx = std::max(mx, p[i * seq + j]);
        }
        T z = 0;
        for (int64_t j = 0; j < seq; ++j) z += (p[i * seq + j] = std::exp(p[i * seq + j] - mx));
        for (int64_t j = 0; j < seq; ++j) p[i * seq + j] /= z;
        T* oi = out + (b * seq + i) * width + h * dh;
        for (int64_t c = 0; c < dh; ++c) oi[c] = 0;
        for (int64_t j = 0; j < seq; ++j) {
          const T* vj = v + (b * seq + j) * width + h * dh;
          const T w = p[i * seq + j];
          for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
}

// Accumulates into dq, dk, dv.
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, int64_t batch,
                        int64_t seq, int64_t heads, int64_t dh, T* dq, T* dk, T* dv) {
  const int64_t width = heads * dh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> ds(static_cast<size_t>(seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      const T* p = probs + (b * heads + h) * seq * seq;
      for (int64_t i = 0; i < seq; ++i) {
        const T* doi = dout + (b * seq + i) * width + h * dh;
        T dot = 0;
        for (int64_t j = 0; j < seq; ++j) {
          const T* vj = v + (b * seq + j) * width + h * dh;
          T* dvj = dv + (b * seq + j) * width + h * dh;
          const T w = p[i * seq + j];
          T dp = 0;
          for (int64_t c = 0; c < dh; ++c) {
            dp += doi[c] * vj[c];
            dvj[c] += w * doi[c];
          }
          ds[static_cast<size_t>(j)] = dp;
          dot += w * dp;
        }
        const T* qi = q + (b * seq + i) * width + h * dh;
        T* dqi = dq + (b * seq + i) * width + h * dh;
        for (int64_t j = 0; j < seq; ++j) {
          const T g = p[i * seq + j] * (ds[static_cast<size_t>(j)] - dot) * scale;
          const T* kj = k + (b * seq + j) * width + h * dh;
          T* dkj = dk + (b * seq + j) * width + h * dh;
          for (int64_t c = 0; c < dh; ++c) {
            dqi[c] += g * kj[c];
            dkj[c] += g * qi[c];
          }
        }
      }
    }
}

// D[i,j] = sum_c (X[i,c] - Y[j,c])^2 for X[n,d], Y[m,d].
template <typename T>
void pairwise_sq_dist(const T* X, const T* Y, int64_t n, int64_t m, int64_t d, T* D) {
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      T acc = 0;
      for (int64_t c = 0; c < d; ++c) {
        const T t = X[i * d + c] - Y[j * d + c];
        acc += t * t;
      }
      D[i * m + j] = acc;
    }
}

}  // namespace serial

namespace omp {

template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
#pragma omp parallel for schedule(static) if (M * N * K > kParallelGrain)
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) c[j] = beta == T(0) ? T(0) : beta * c[j];
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
#pragma omp simd
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
#pragma omp parallel for collapse(2) schedule(static) if (M * N * K > kParallelGrain)
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      const T* a = A + i * K;
      const T* b = B + j * K;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] = (beta == T(0) ? T(0) : beta * C[i * N + j]) + acc;
    }
  }
}

template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, T beta) {
#pragma omp parallel for schedule(static) if (M * N * K > kParallelGrain)
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) c[j] = beta == T(0) ? T(0) : beta * c[j];
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[k * M + i];
      const T* b = B + k * N;
#pragma omp simd
      for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <typename T>
void im2col(const T* x, int64_t batch, int64_t channels, int64_t height, int64_t width, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t out_h, int64_t out_w, T* col) {
  const int64_t cols = batch * out_h * out_w;
  const int64_t rows = channels * kh * kw;
#pragma omp parallel for schedule(static) if (rows * cols > kParallelGrain)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t c = r / (kh * kw);
    const int64_t ki = (r / kw) % kh;
    const int64_t kj = r % kw;
    T* row = col + r * cols;
    for (int64_t b = 0; b < batch; ++b) {
      const T* img = x + (b * channels + c) * height * width;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const int64_t iy = oy * stride - pad + ki;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const int64_t ix = ox * stride - pad + kj;
          const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
          row[(b * out_h + oy) * out_w + ox] = inside ? img[iy * width + ix] : T(0);
        }
      }
    }
  }
}

// Parallel over channels: each channel plane of dx is written by one thread.
template <typename T>
void col2im(const T* col, int64_t batch, int64_t channels, int64_t height, int64_t width, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t out_h, int64_t out_w, T* dx) {
  const int64_t cols = batch * out_h * out_w;
#pragma omp parallel for schedule(static) if (channels * kh * kw * cols > kParallelGrain)
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (int64_t b = 0; b < batch; ++b) {
          T* img = dx + (b * channels + c) * height * width;
          for (int64_t oy = 0; oy < out_h; ++oy) {
            const int64_t iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= height) continue;
            for (int64_t ox = 0; ox < out_w; ++ox) {
              const int64_t ix = ox * stride - pad + kj;
              if (ix < 0 || ix >= width) continue;
              img[iy * width + ix] += row[(b * out_h + oy) * out_w + ox];
            }
          }
        }
      }
}

template <typename T>
void attention_forward(const T* q, const T* k, const T* v, int64_t batch, int64_t seq, int64_t heads,
                       int64_t dh, T* out, T* probs) {
  const int64_t width = heads * dh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
#pragma omp parallel for collapse(2) schedule(static) if (batch * heads * seq * seq * dh > kParallelGrain)
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      T* p = probs + (b * heads + h) * seq * seq;
      for (int64_t i = 0; i < seq; ++i) {
        const T* qi = q + (b * seq + i) * width + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < seq; ++j) {
          const T* kj = k + (b * seq + j) * width + h * dh;
          T s = 0;
#pragma omp simd reduction(+ : s)
          for (int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * seq + j] = s * scale;
          mx = std::max(mx, p[i * seq + j]);
        }
        T z = 0;
        for (int64_t j = 0; j < seq; ++j) z += (p[i * seq + j] = std::exp(p[i * seq + j] - mx));
        for (int64_t j = 0; j < seq; ++j) p[i * seq + j] /= z;
        T* oi = out + (b * seq + i) * width + h * dh;
        for (int64_t c = 0; c < dh; ++c) oi[c] = 0;
        for (int64_t j = 0; j < seq; ++j) {
          const T* vj = v + (b * seq + j) * width + h * dh;
          const T w = p[i * seq + j];
#pragma omp simd
          for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
}

// Each (b, h) pair touches a disjoint slice of dq/dk/dv.
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, int64_t batch,
                        int64_t seq, int64_t heads, int64_t dh, T* dq, T* dk, T* dv) {
  const int64_t width = heads * dh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
#pragma omp parallel for collapse(2) schedule(static) if (batch * heads * seq * seq * dh > kParallelGrain)
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      std::vector<T> ds(static_cast<size_t>(seq));
      const T* p = probs + (b * heads + h) * seq * seq;
      for (int64_t i = 0; i < seq; ++i) {
        const T* doi = dout + (b * seq + i) * width + h * dh;
        T dot = 0;
        for (int64_t j = 0; j < seq; ++j) {
          const T* vj = v + (b * seq + j) * width + h * dh;
          T* dvj = dv + (b * seq + j) * width + h * dh;
          const T w = p[i * seq + j];
          T dp = 0;
          for (int64_t c = 0; c < dh; ++c) {
            dp += doi[c] * vj[c];
            dvj[c] += w * doi[c];
          }
          ds[static_cast<size_t>(j)] = dp;
          dot += w * dp;
        }
        const T* qi = q + (b * seq + i) * width + h * dh;
        T* dqi = dq + (b * seq + i) * width + h * dh;
        for (int64_t j = 0; j < seq; ++j) {
          const T g = p[i * seq + j] * (ds[static_cast<size_t>(j)] - dot) * scale;
          const T* kj = k + (b * seq + j) * width + h * dh;
          T* dkj = dk + (b * seq + j) * width + h * dh;
#pragma omp simd
          for (int64_t c = 0; c < dh; ++c) {
            dqi[c] += g * kj[c];
            dkj[c] += g * qi[c];
          }
        }
      }
    }
}

template <typename T>
void pairwise_sq_dist(const T* X, const T* Y, int64_t n, int64_t m, int64_t d, T* D) {
#pragma omp parallel for schedule(static) if (n * m * d > kParallelGrain)
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int64_t c = 0; c < d; ++c) {
        const T t = X[i * d + c] - Y[j * d + c];
        acc += t * t;
      }
      D[i * m + j] = acc;
    }
}

}  // namespace omp

using omp::attention_backward;
using omp::attention_forward;
using omp::col2im;
using omp::gemm_nn;
using omp::gemm_nt;
using omp::gemm_tn;
using omp::im2col;
using omp::pairwise_sq_dist;

inline int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace hat::kernels
