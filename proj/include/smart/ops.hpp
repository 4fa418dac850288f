#pragma once

// Differentiable operations over smart::Tensor.
//
// Kernels are plain loops written so that the innermost loop is an axpy over
// contiguous memory; with -O3 -march=native that vectorizes without relaxing
// IEEE semantics, which keeps every run bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smart/tensor.hpp"

namespace smart {

namespace kernel {

// Four rows of c times one tile of W columns; the accumulators start from c
// so the summation order matches the plain triple loop.
template <std::size_t W>
inline void gemm_block4(const double* __restrict a, std::size_t lda, const double* __restrict b, std::size_t ldb,
                        double* __restrict c, std::size_t ldc, std::size_t K) {
  double acc0[W], acc1[W], acc2[W], acc3[W];
  for (std::size_t j = 0; j < W; ++j) {
    acc0[j] = c[j];
    acc1[j] = c[ldc + j];
    acc2[j] = c[2 * ldc + j];
    acc3[j] = c[3 * ldc + j];
  }
  for (std::size_t k = 0; k < K; ++k) {
    const double* bk = b + k * ldb;
    const double x0 = a[k], x1 = a[lda + k], x2 = a[2 * lda + k], x3 = a[3 * lda + k];
    for (std::size_t j = 0; j < W; ++j) {
      acc0[j] += x0 * bk[j];
      acc1[j] += x1 * bk[j];
      acc2[j] += x2 * bk[j];
      acc3[j] += x3 * bk[j];
    }
  }
  for (std::size_t j = 0; j < W; ++j) {
    c[j] = acc0[j];
    c[ldc + j] = acc1[j];
    c[2 * ldc + j] = acc2[j];
    c[3 * ldc + j] = acc3[j];
  }
}

// c[M,N] += a[M,K] * b[K,N]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t M,
                    std::size_t K, std::size_t N) {
  constexpr std::size_t tile = 32;
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    std::size_t j0 = 0;
    for (; j0 + tile <= N; j0 += tile) gemm_block4<tile>(a + i * K, K, b + j0, N, c + i * N + j0, N, K);
    if (j0 < N) {
      double* ct = c + i * N + j0;
      const std::size_t w = N - j0;
      double acc[4][tile];
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < w; ++j) acc[r][j] = ct[r * N + j];
      for (std::size_t k = 0; k < K; ++k) {
        const double* bk = b + k * N + j0;
        for (std::size_t r = 0; r < 4; ++r) {
          const double x = a[(i + r) * K + k];
          for (std::size_t j = 0; j < w; ++j) acc[r][j] += x * bk[j];
        }
      }
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < w; ++j) ct[r * N + j] = acc[r][j];
    }
  }
  for (; i < M; ++i) {
    double* ci = c + i * N;
    const double* ai = a + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = ai[k];
      const double* bk = b + k * N;
      for (std::size_t j = 0; j < N; ++j) ci[j] += av * bk[j];
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N], four rows of a and b per pass over c.
inline void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t M,
                    std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const double* ai = a + i * K;
    const double* b0 = b + i * N;
    const double* b1 = b0 + N;
    const double* b2 = b1 + N;
    const double* b3 = b2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const double x0 = ai[k], x1 = ai[K + k], x2 = ai[2 * K + k], x3 = ai[3 * K + k];
      double* ck = c + k * N;
      for (std::size_t j = 0; j < N; ++j) ck[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
    }
  }
  for (; i < M; ++i) {
    const double* ai = a + i * K;
    const double* bi = b + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = ai[k];
      double* ck = c + k * N;
      for (std::size_t j = 0; j < N; ++j) ck[j] += av * bi[j];
    }
  }
}

inline void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// c[M,N] += a[M,K] * b[N,K]^T, via a transposed copy of b so the inner loop stays an axpy.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t M, std::size_t K,
                    std::size_t N, std::vector<double>& scratch) {
  scratch.resize(K * N);
  transpose(b, scratch.data(), N, K);
  gemm_nn(a, scratch.data(), c, M, K, N);
}

}  // namespace kernel

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Visits (out_index, in_index) for out = permute(in, perm). Inner dimension is
// walked with a fixed input stride.
template <typename F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, F&& f) {
  const std::size_t rank = in_shape.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{1});
    return;
  }
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> mapped(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    mapped[i] = in_strides[perm[i]];
  }
  const std::size_t inner = out_shape.back();
  const std::size_t inner_stride = mapped.back();
  const std::size_t total = numel(out_shape);
  if (total == 0) return;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_base = 0;
  for (std::size_t out = 0; out < total; out += inner) {
    f(out, in_base, inner, inner_stride);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      in_base += mapped[d];
      if (idx[d] < out_shape[d]) break;
      in_base -= mapped[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b where b has the shape of a or of a trailing suffix of a (broadcast over leading axes).
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(b.shape(), a.shape())) {
    throw ShapeError("add: shape " + to_string(b.shape()) + " does not broadcast to " +
                     to_string(a.shape()));
  }
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  if (m > 0) {
    for (std::size_t base = 0; base < n; base += m)
      for (std::size_t j = 0; j < m; ++j) out[base + j] += bd[j];
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [ai, bi, n, m](auto& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad && m > 0) {
      auto& g = bi->grad_buffer();
      for (std::size_t base = 0; base < n; base += m)
        for (std::size_t j = 0; j < m; ++j) g[j] += o.grad[base + j];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [ai, bi, n](auto& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= o.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [ai, bi, n](auto& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
  auto ai = a.impl();
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [ai, n, s](auto& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * s;
  });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation. The single nonlinearity used across the model.
inline Tensor gelu(const Tensor& x) {
  // 0.5 * (1 + tanh(u)) == 1 / (1 + exp(-2u)), one exp per element.
  const std::size_t n = x.numel();
  std::vector<double> out(n), gate(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    gate[i] = 1.0 / (1.0 + std::exp(-2.0 * detail::kGeluC * (v + detail::kGeluA * v * v * v)));
    out[i] = v * gate[i];
  }
  auto xi = x.impl();
  return detail::make_result("gelu", x.shape(), std::move(out), {x},
                             [xi, n, gate = std::move(gate)](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double v = xi->data[i];
                                 const double s = gate[i];
                                 const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
                                 g[i] += o.grad[i] * (s + 2.0 * v * s * (1.0 - s) * du);
                               }
                             });
}

inline Tensor sigmoid(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto xi = x.impl();
  auto saved = out;
  return detail::make_result("sigmoid", x.shape(), std::move(out), {x},
                             [xi, n, y = std::move(saved)](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * y[i] * (1.0 - y[i]);
                             });
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Inverted dropout. Evaluation mode (or rate 0) returns x unchanged.
inline Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const std::size_t n = x.numel();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(n), out(n);
  for (std::size_t i = 0; i < n; ++i) {
    factor[i] = uniform01(rng) < rate ? 0.0 : keep_scale;
    out[i] = x[i] * factor[i];
  }
  auto xi = x.impl();
  return detail::make_result("dropout", x.shape(), std::move(out), {x},
                             [xi, n, f = std::move(factor)](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * f[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xi = x.impl();
  const std::size_t n = x.numel();
  return detail::make_result("sum", Shape{}, {s}, {x}, [xi, n](auto& o) {
    auto& g = xi->grad_buffer();
    const double go = o.grad[0];
    for (std::size_t i = 0; i < n; ++i) g[i] += go;
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto xi = x.impl();
  const std::size_t n = x.numel();
  return detail::make_result("reshape", std::move(shape),
                             std::vector<double>(x.data().begin(), x.data().end()), {x},
                             [xi, n](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i];
                             });
}

inline Tensor permute(const Tensor& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.dim();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
  std::vector<double> out(x.numel());
  const double* src = x.data().data();
  detail::for_each_permuted(x.shape(), perm, [&](std::size_t o, std::size_t in, std::size_t len,
                                                 std::size_t stride) {
    for (std::size_t j = 0; j < len; ++j) out[o + j] = src[in + j * stride];
  });
  auto xi = x.impl();
  return detail::make_result("permute", std::move(out_shape), std::move(out), {x},
                             [xi, perm](auto& o) {
                               auto& g = xi->grad_buffer();
                               detail::for_each_permuted(
                                   xi->shape, perm,
                                   [&](std::size_t out, std::size_t in, std::size_t len,
                                       std::size_t stride) {
                                     for (std::size_t j = 0; j < len; ++j)
                                       g[in + j * stride] += o.grad[out + j];
                                   });
                             });
}

/// Concatenates tensors along axis; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::vector<std::size_t> chunk(parts.size());
  std::size_t out_chunk = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    chunk[p] = outer ? parts[p].numel() / outer : 0;
    out_chunk += chunk[p];
  }
  std::vector<double> out(outer * out_chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = o * out_chunk;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].data().data() + o * chunk[p];
      std::copy(src, src + chunk[p], out.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += chunk[p];
    }
  }
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  Tensor result(std::move(out_shape), std::move(out));
  if (validation_enabled()) detail::check_finite(*result.impl(), "concat");
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    auto node = std::make_shared<detail::GradNode>();
    node->inputs = impls;
    node->backward = [impls, chunk, outer, out_chunk](detail::TensorImpl& o) {
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (!impls[p]->requires_grad) continue;
        auto& g = impls[p]->grad_buffer();
        std::size_t offset = 0;
        for (std::size_t q = 0; q < p; ++q) offset += chunk[q];
        for (std::size_t oi = 0; oi < outer; ++oi)
          for (std::size_t j = 0; j < chunk[p]; ++j)
            g[oi * chunk[p] + j] += o.grad[oi * out_chunk + offset + j];
      }
    };
    result.impl()->node = std::move(node);
    result.impl()->requires_grad = true;
  }
  return result;
}

/// Repeats x along a new leading axis of extent n.
inline Tensor expand_leading(const Tensor& x, std::size_t n) {
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t m = x.numel();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), out.begin() + i * m);
  auto xi = x.impl();
  return detail::make_result("expand_leading", std::move(out_shape), std::move(out), {x},
                             [xi, n, m](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j) g[j] += o.grad[i * m + j];
                             });
}

/// x: [B, T, ...]; returns [B, ...] with row index[b] taken from batch item b.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.dim() < 2 || index.size() != x.size(0)) {
    throw ShapeError("gather_rows: expected [B, T, ...] with B indices, got " + to_string(x.shape()));
  }
  const std::size_t B = x.size(0), T = x.size(1);
  const std::size_t inner = B * T != 0 ? x.numel() / (B * T) : 0;
  Shape out_shape{B};
  out_shape.insert(out_shape.end(), x.shape().begin() + 2, x.shape().end());
  std::vector<double> out(B * inner);
  for (std::size_t b = 0; b < B; ++b) {
    if (index[b] >= T) throw ShapeError("gather_rows: index out of range");
    const double* src = x.data().data() + (b * T + index[b]) * inner;
    std::copy(src, src + inner, out.begin() + b * inner);
  }
  auto xi = x.impl();
  return detail::make_result("gather_rows", std::move(out_shape), std::move(out), {x},
                             [xi, index, T, inner](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t b = 0; b < index.size(); ++b)
                                 for (std::size_t j = 0; j < inner; ++j)
                                   g[(b * T + index[b]) * inner + j] += o.grad[b * inner + j];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product. a: [..., M, K]; b: [K, N] (shared) or [..., K, N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t M = a.shape()[a.dim() - 2], K = a.shape().back();
  const std::size_t Kb = b.shape()[b.dim() - 2], N = b.shape().back();
  const bool shared_b = b.dim() == 2;
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (K != Kb || (!shared_b && lead_a != lead_b)) {
    throw ShapeError("matmul: dimension mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t batch = numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<double> out(batch * M * N, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernel::gemm_nn(ad + i * M * K, shared_b ? bd : bd + i * K * N, out.data() + i * M * N, M, K, N);
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [ai, bi, batch, M, K, N, shared_b](auto& o) {
        std::vector<double> scratch;
        const double* go = o.grad.data();
        if (ai->requires_grad) {
          auto& ga = ai->grad_buffer();
          for (std::size_t i = 0; i < batch; ++i) {
            const double* bm = bi->data.data() + (shared_b ? 0 : i * K * N);
            kernel::gemm_nt(go + i * M * N, bm, ga.data() + i * M * K, M, N, K, scratch);
          }
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t i = 0; i < batch; ++i) {
            kernel::gemm_tn(ai->data.data() + i * M * K, go + i * M * N,
                            gb.data() + (shared_b ? 0 : i * K * N), M, K, N);
          }
        }
      });
}

/// Batched alpha * a * b^T + addend. a: [..., M, K]; b: [..., N, K]; the
/// optional addend has the output shape and is treated as a constant.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b, double alpha = 1.0, const Tensor& addend = Tensor()) {
  if (a.dim() < 2 || b.dim() != a.dim()) {
    throw ShapeError("matmul_nt: rank mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  }
  const std::size_t M = a.shape()[a.dim() - 2], K = a.shape().back();
  const std::size_t N = b.shape()[b.dim() - 2], Kb = b.shape().back();
  const Shape lead(a.shape().begin(), a.shape().end() - 2);
  if (K != Kb || lead != Shape(b.shape().begin(), b.shape().end() - 2)) {
    throw ShapeError("matmul_nt: dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  const std::size_t batch = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(M);
  out_shape.push_back(N);
  if (addend.defined() && addend.shape() != out_shape) {
    throw ShapeError("matmul_nt: addend " + to_string(addend.shape()) + " does not match " + to_string(out_shape));
  }
  std::vector<double> out(batch * M * N, 0.0), scratch;
  for (std::size_t i = 0; i < batch; ++i) {
    kernel::gemm_nt(a.data().data() + i * M * K, b.data().data() + i * N * K, out.data() + i * M * N, M,
                    K, N, scratch);
  }
  if (alpha != 1.0)
    for (auto& v : out) v *= alpha;
  if (addend.defined()) {
    const double* add = addend.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += add[i];
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result("matmul_nt", std::move(out_shape), std::move(out), {a, b},
                             [ai, bi, batch, M, K, N, alpha](auto& o) {
                               std::vector<double> scaled;
                               const double* go = o.grad.data();
                               if (alpha != 1.0) {
                                 scaled.assign(o.grad.begin(), o.grad.end());
                                 for (auto& v : scaled) v *= alpha;
                                 go = scaled.data();
                               }
                               if (ai->requires_grad) {
                                 auto& ga = ai->grad_buffer();
                                 for (std::size_t i = 0; i < batch; ++i)
                                   kernel::gemm_nn(go + i * M * N, bi->data.data() + i * N * K,
                                                   ga.data() + i * M * K, M, N, K);
                               }
                               if (bi->requires_grad) {
                                 auto& gb = bi->grad_buffer();
                                 for (std::size_t i = 0; i < batch; ++i)
                                   kernel::gemm_tn(go + i * M * N, ai->data.data() + i * M * K,
                                                   gb.data() + i * N * K, M, N, K);
                               }
                             });
}

/// Affine map over the last axis: x[..., in] * w[in, out] + b[out]. bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.dim() != 2 || x.dim() < 1 || x.shape().back() != w.size(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  const std::size_t in = w.size(0), out_dim = w.size(1);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != out_dim)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  const std::size_t rows = in ? x.numel() / in : 0;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim, 0.0);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  }
  kernel::gemm_nn(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
  auto xi = x.impl(), wi = w.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result("linear", std::move(out_shape), std::move(out), {x, w, bias},
                             [xi, wi, bi, rows, in, out_dim](auto& o) {
                               const double* go = o.grad.data();
                               if (xi->requires_grad) {
                                 std::vector<double> scratch;
                                 kernel::gemm_nt(go, wi->data.data(), xi->grad_buffer().data(), rows,
                                                 out_dim, in, scratch);
                               }
                               if (wi->requires_grad) {
                                 kernel::gemm_tn(xi->data.data(), go, wi->grad_buffer().data(), rows,
                                                 in, out_dim);
                               }
                               if (detail::wants_grad(bi)) {
                                 auto& gb = bi->grad_buffer();
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < out_dim; ++j) gb[j] += go[r * out_dim + j];
                               }
                             });
}

/// Independent affine maps per group: x[..., G, in] with w[G, in, out], b[G, out].
inline Tensor grouped_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.dim() != 3 || x.dim() < 2 || x.shape()[x.dim() - 2] != w.size(0) ||
      x.shape().back() != w.size(1) || b.dim() != 2 || b.size(0) != w.size(0) ||
      b.size(1) != w.size(2)) {
    throw ShapeError("grouped_linear: input " + to_string(x.shape()) + " weight " +
                     to_string(w.shape()) + " bias " + to_string(b.shape()));
  }
  const std::size_t G = w.size(0), in = w.size(1), od = w.size(2);
  const std::size_t rows = x.numel() / (G * in);
  Shape out_shape = x.shape();
  out_shape.back() = od;
  std::vector<double> out(rows * G * od);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < G; ++g) {
      double* y = out.data() + (r * G + g) * od;
      std::copy(b.data().begin() + g * od, b.data().begin() + (g + 1) * od, y);
      kernel::gemm_nn(x.data().data() + (r * G + g) * in, w.data().data() + g * in * od, y, 1, in, od);
    }
  }
  auto xi = x.impl(), wi = w.impl(), bi = b.impl();
  return detail::make_result(
      "grouped_linear", std::move(out_shape), std::move(out), {x, w, b},
      [xi, wi, bi, rows, G, in, od](auto& o) {
        std::vector<double> scratch;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t g = 0; g < G; ++g) {
            const double* go = o.grad.data() + (r * G + g) * od;
            if (xi->requires_grad)
              kernel::gemm_nt(go, wi->data.data() + g * in * od, xi->grad_buffer().data() + (r * G + g) * in,
                              1, od, in, scratch);
            if (wi->requires_grad)
              kernel::gemm_tn(xi->data.data() + (r * G + g) * in, go, wi->grad_buffer().data() + g * in * od,
                              1, in, od);
            if (bi->requires_grad) {
              auto& gb = bi->grad_buffer();
              for (std::size_t j = 0; j < od; ++j) gb[g * od + j] += go[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stable softmax along axis (max subtraction).
inline Tensor softmax(const Tensor& x, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim(), "softmax");
  const std::size_t len = x.shape()[ax];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] *= inv;
    }
  }
  auto xi = x.impl();
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [xi, outer, inner, len](auto& o) {
                               auto& g = xi->grad_buffer();
                               const auto& y = o.data;
                               for (std::size_t oi = 0; oi < outer; ++oi) {
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = oi * len * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t k = 0; k < len; ++k)
                                     dot += y[base + k * inner] * o.grad[base + k * inner];
                                   for (std::size_t k = 0; k < len; ++k)
                                     g[base + k * inner] += y[base + k * inner] * (o.grad[base + k * inner] - dot);
                                 }
                               }
                             });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last axis to zero mean / unit variance, then applies gamma, beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t D = x.dim() ? x.shape().back() : 0;
  if (gamma.numel() != D || beta.numel() != D || D == 0) {
    throw ShapeError("layer_norm: gamma/beta must match last extent of " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / D;
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < D; ++j) {
      const double h = (row[j] - mu) * rstd[r];
      xhat[r * D + j] = h;
      out[r * D + j] = h * gd[j] + bd[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, rows, D, xhat = std::move(xhat), rstd = std::move(rstd)](auto& o) {
        const double* go = o.grad.data();
        if (gi->requires_grad || bi->requires_grad) {
          auto& gg = gi->grad_buffer();
          auto& gb = bi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) {
              gg[j] += go[r * D + j] * xhat[r * D + j];
              gb[j] += go[r * D + j];
            }
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          const double* gd = gi->data.data();
          const double invD = 1.0 / static_cast<double>(D);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < D; ++j) {
              const double dh = go[r * D + j] * gd[j];
              m1 += dh;
              m2 += dh * xhat[r * D + j];
            }
            m1 *= invD;
            m2 *= invD;
            for (std::size_t j = 0; j < D; ++j) {
              const double dh = go[r * D + j] * gd[j];
              gx[r * D + j] += rstd[r] * (dh - m1 - xhat[r * D + j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Masked reductions and losses

/// x: [B, T, N, D], weights: B*T*N constants. Returns [B, N, D] with
/// out[b, n] = sum_t weights[b, t, n] * x[b, t, n].
inline Tensor weighted_time_sum(const Tensor& x, std::vector<double> weights) {
  if (x.dim() != 4 || weights.size() * x.size(3) != x.numel()) {
    throw ShapeError("weighted_time_sum: expected [B, T, N, D] with B*T*N weights, got " +
                     to_string(x.shape()));
  }
  const std::size_t B = x.size(0), T = x.size(1), N = x.size(2), D = x.size(3);
  std::vector<double> out(B * N * D, 0.0);
  const double* xd = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        const double w = weights[(b * T + t) * N + n];
        if (w == 0.0) continue;
        const double* src = xd + ((b * T + t) * N + n) * D;
        double* dst = out.data() + (b * N + n) * D;
        for (std::size_t k = 0; k < D; ++k) dst[k] += w * src[k];
      }
  auto xi = x.impl();
  return detail::make_result("weighted_time_sum", Shape{B, N, D}, std::move(out), {x},
                             [xi, B, T, N, D, w = std::move(weights)](auto& o) {
                               auto& g = xi->grad_buffer();
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t n = 0; n < N; ++n) {
                                     const double wt = w[(b * T + t) * N + n];
                                     if (wt == 0.0) continue;
                                     const double* src = o.grad.data() + (b * N + n) * D;
                                     double* dst = g.data() + ((b * T + t) * N + n) * D;
                                     for (std::size_t k = 0; k < D; ++k) dst[k] += wt * src[k];
                                   }
                             });
}

/// sum_cells cell_weight * ||pred_cell - target_cell||_1, where a cell is one
/// slice of the last axis. target is treated as a constant.
inline Tensor weighted_l1(const Tensor& pred, const Tensor& target, std::vector<double> cell_weights) {
  detail::require_same_shape(pred, target, "weighted_l1");
  const std::size_t D = pred.dim() ? pred.shape().back() : 1;
  if (cell_weights.size() * D != pred.numel()) {
    throw ShapeError("weighted_l1: " + std::to_string(cell_weights.size()) + " cell weights for " +
                     to_string(pred.shape()));
  }
  double total = 0.0;
  for (std::size_t c = 0; c < cell_weights.size(); ++c) {
    const double w = cell_weights[c];
    if (w == 0.0) continue;
    double s = 0.0;
    for (std::size_t k = 0; k < D; ++k) s += std::abs(pred[c * D + k] - target[c * D + k]);
    total += w * s;
  }
  auto pi = pred.impl(), ti = target.impl();
  return detail::make_result("weighted_l1", Shape{}, {total}, {pred},
                             [pi, ti, D, w = std::move(cell_weights)](auto& o) {
                               auto& g = pi->grad_buffer();
                               const double go = o.grad[0];
                               for (std::size_t c = 0; c < w.size(); ++c) {
                                 if (w[c] == 0.0) continue;
                                 for (std::size_t k = 0; k < D; ++k) {
                                   const double diff = pi->data[c * D + k] - ti->data[c * D + k];
                                   const double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                                   g[c * D + k] += go * w[c] * sgn;
                                 }
                               }
                             });
}

/// Sum of elementwise binary cross-entropy on logits, divided by normalizer.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets, double normalizer) {
  if (targets.size() != logits.numel()) throw ShapeError("bce_with_logits: target count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  auto li = logits.impl();
  return detail::make_result("bce_with_logits", Shape{}, {total / normalizer}, {logits},
                             [li, targets, normalizer](auto& o) {
                               auto& g = li->grad_buffer();
                               const double go = o.grad[0] / normalizer;
                               for (std::size_t i = 0; i < targets.size(); ++i) {
                                 const double z = li->data[i];
                                 const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                                         : std::exp(z) / (1.0 + std::exp(z));
                                 g[i] += go * (p - targets[i]);
                               }
                             });
}

/// Sum of softmax cross-entropy over rows of logits [B, C], divided by normalizer.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& classes, double normalizer) {
  if (logits.dim() != 2 || classes.size() != logits.size(0)) {
    throw ShapeError("cross_entropy: expected [B, C] logits with B classes");
  }
  const std::size_t B = logits.size(0), C = logits.size(1);
  std::vector<double> prob(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (classes[b] < 0 || static_cast<std::size_t>(classes[b]) >= C)
      throw std::out_of_range("cross_entropy: class index out of range");
    const double* z = logits.data().data() + b * C;
    const double mx = *std::max_element(z, z + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(z[c] - lse);
    total += lse - z[classes[b]];
  }
  auto li = logits.impl();
  return detail::make_result("cross_entropy", Shape{}, {total / normalizer}, {logits},
                             [li, classes, normalizer, B, C, prob = std::move(prob)](auto& o) {
                               auto& g = li->grad_buffer();
                               const double go = o.grad[0] / normalizer;
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const double onehot = static_cast<int>(c) == classes[b] ? 1.0 : 0.0;
                                   g[b * C + c] += go * (prob[b * C + c] - onehot);
                                 }
                             });
}

}  // namespace smart
