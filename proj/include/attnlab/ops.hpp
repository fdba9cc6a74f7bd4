#pragma once

#include <cblas.h>
#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "attnlab/rng.hpp"
#include "attnlab/tensor.hpp"

// Differentiable tensor operations. Every op takes an optional Tape<T>*:
// with a tape the op allocates a grad buffer for its output (when an input
// is on the graph) and records its adjoint step; with nullptr it runs
// forward-only. Ops validate shapes up front and verify the output is
// finite before returning.

namespace attnlab {

namespace detail {

// Process-wide tuning, applied once at static init. Large activation
// buffers are recycled through the heap instead of mmap round-trips, and
// BLAS runs one thread per gemm: reproducibility requires a fixed thread
// count, and at these matrix sizes one thread is also the fastest setting
// measured. ATTNLAB_BLAS_THREADS overrides the thread count.
struct RuntimeTuning {
  RuntimeTuning() {
    mallopt(M_MMAP_THRESHOLD, 1 << 28);
    mallopt(M_TRIM_THRESHOLD, 1 << 28);
    int threads = 1;
    if (const char* env = std::getenv("ATTNLAB_BLAS_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) threads = v;
    }
    openblas_set_num_threads(threads);
  }
};
inline const RuntimeTuning runtime_tuning{};

inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
                 float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                 double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

// Shared core for matmul / matmul_nt. Ranks must match; leading (batch) axes
// must be equal extent pairwise. b is [..,k,n] or, when trans_b, [..,n,k].
template <class T>
Tensor<T> batched_matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_b,
                         const char* opname) {
  const std::string msg = std::string(opname) + ": incompatible shapes " + shape_str(a.shape) +
                          " and " + shape_str(b.shape);
  if (a.rank() < 2 || a.rank() != b.rank()) throw ShapeError(msg);
  const std::int64_t r = a.rank();
  std::int64_t batch = 1;
  Shape out_shape;
  for (std::int64_t i = 0; i < r - 2; ++i) {
    if (a.shape[i] != b.shape[i]) throw ShapeError(msg);
    batch *= a.shape[i];
    out_shape.push_back(a.shape[i]);
  }
  const std::int64_t m = a.shape[r - 2];
  const std::int64_t k = a.shape[r - 1];
  const std::int64_t bk = trans_b ? b.shape[r - 1] : b.shape[r - 2];
  const std::int64_t n = trans_b ? b.shape[r - 2] : b.shape[r - 1];
  if (k != bk) throw ShapeError(msg);
  out_shape.push_back(m);
  out_shape.push_back(n);

  const bool needs_grad = a.on_graph() || b.on_graph();
  Tensor<T> out = make_output<T>(tape, out_shape, needs_grad);

  const std::int64_t as = m * k, bs = k * n, cs = m * n;
  const std::int64_t ldb = trans_b ? k : n;
  for (std::int64_t i = 0; i < batch; ++i)
    gemm(false, trans_b, m, n, k, T{1}, a.ptr() + i * as, k, b.ptr() + i * bs, ldb, T{0},
         out.ptr() + i * cs, n);
  check_finite(opname, out);

  if (tape && needs_grad) {
    tape->record([a, b, out, trans_b, batch, m, n, k, as, bs, cs, ldb]() {
      for (std::int64_t i = 0; i < batch; ++i) {
        const T* dc = out.gptr() + i * cs;
        if (a.on_graph()) {
          // dA += dC.B^T (plain) or dC.B (nt)
          gemm(false, !trans_b, m, k, n, T{1}, dc, n, b.ptr() + i * bs, ldb, T{1},
               a.grad->data() + i * as, k);
        }
        if (b.on_graph()) {
          if (!trans_b)  // dB += A^T.dC
            gemm(true, false, k, n, m, T{1}, a.ptr() + i * as, k, dc, n, T{1},
                 b.grad->data() + i * bs, n);
          else  // dB += dC^T.A
            gemm(true, false, n, k, m, T{1}, dc, n, a.ptr() + i * as, k, T{1},
                 b.grad->data() + i * bs, k);
        }
      }
    });
  }
  return out;
}

inline std::int64_t mask_index(std::int64_t flat, std::int64_t mask_numel) {
  return flat % mask_numel;
}

}  // namespace detail

// --- shape plumbing ---------------------------------------------------------

// Zero-copy view with a new shape; shares both value and grad storage, so
// adjoints flow through without a recorded step.
template <class T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, const Shape& shape) {
  check_shape_positive(shape);
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
  return Tensor<T>(shape, x.data, x.grad, tape && x.on_graph() ? tape->next_id() : -1);
}

// --- elementwise ------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const bool ng = a.on_graph() || b.on_graph();
  Tensor<T> out = make_output<T>(tape, a.shape, ng);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  check_finite("add", out);
  if (tape && ng) {
    tape->record([a, b, out, n]() {
      const T* g = out.gptr();
      if (a.on_graph())
        for (std::int64_t i = 0; i < n; ++i) a.grad->data()[i] += g[i];
      if (b.on_graph())
        for (std::int64_t i = 0; i < n; ++i) b.grad->data()[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const bool ng = a.on_graph() || b.on_graph();
  Tensor<T> out = make_output<T>(tape, a.shape, ng);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  check_finite("mul", out);
  if (tape && ng) {
    tape->record([a, b, out, n]() {
      const T* g = out.gptr();
      if (a.on_graph())
        for (std::int64_t i = 0; i < n; ++i) a.grad->data()[i] += g[i] * b.ptr()[i];
      if (b.on_graph())
        for (std::int64_t i = 0; i < n; ++i) b.grad->data()[i] += g[i] * a.ptr()[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
  Tensor<T> out = make_output<T>(tape, x.shape, x.on_graph());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * c;
  check_finite("scale", out);
  if (tape && x.on_graph()) {
    tape->record([x, out, c, n]() {
      for (std::int64_t i = 0; i < n; ++i) x.grad->data()[i] += c * out.gptr()[i];
    });
  }
  return out;
}

// x[..,d] + bias[d], bias broadcast over all leading axes.
template <class T>
Tensor<T> add_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape.back() != bias.shape[0])
    throw ShapeError("add_bias: " + shape_str(x.shape) + " with bias " + shape_str(bias.shape));
  const std::int64_t d = bias.shape[0];
  const std::int64_t rows = x.numel() / d;
  const bool ng = x.on_graph() || bias.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t i = 0; i < d; ++i) out.ptr()[r * d + i] = x.ptr()[r * d + i] + bias.ptr()[i];
  check_finite("add_bias", out);
  if (tape && ng) {
    tape->record([x, bias, out, rows, d]() {
      const T* g = out.gptr();
      if (x.on_graph())
        for (std::int64_t i = 0, n = rows * d; i < n; ++i) x.grad->data()[i] += g[i];
      if (bias.on_graph())
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t i = 0; i < d; ++i) bias.grad->data()[i] += g[r * d + i];
    });
  }
  return out;
}

// x[B,L,d] + rows[L,d], rows broadcast over the batch axis.
template <class T>
Tensor<T> add_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& rows) {
  if (x.rank() != 3 || rows.rank() != 2 || x.shape[1] != rows.shape[0] ||
      x.shape[2] != rows.shape[1])
    throw ShapeError("add_rows: " + shape_str(x.shape) + " with rows " + shape_str(rows.shape));
  const std::int64_t b = x.shape[0], n = rows.numel();
  const bool ng = x.on_graph() || rows.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.ptr()[i * n + j] = x.ptr()[i * n + j] + rows.ptr()[j];
  check_finite("add_rows", out);
  if (tape && ng) {
    tape->record([x, rows, out, b, n]() {
      const T* g = out.gptr();
      if (x.on_graph())
        for (std::int64_t i = 0; i < b * n; ++i) x.grad->data()[i] += g[i];
      if (rows.on_graph())
        for (std::int64_t i = 0; i < b; ++i)
          for (std::int64_t j = 0; j < n; ++j) rows.grad->data()[j] += g[i * n + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = make_output<T>(tape, {1}, x.on_graph());
  T acc{0};
  for (std::int64_t i = 0, n = x.numel(); i < n; ++i) acc += x.ptr()[i];
  out.ptr()[0] = acc;
  check_finite("sum_all", out);
  if (tape && x.on_graph()) {
    tape->record([x, out]() {
      const T g = out.gptr()[0];
      for (std::int64_t i = 0, n = x.numel(); i < n; ++i) x.grad->data()[i] += g;
    });
  }
  return out;
}

// --- matrix products ---------------------------------------------------------

// [..,m,k] x [..,k,n] -> [..,m,n]. Rank 2 is a plain product; higher ranks
// batch over equal leading axes. Adjoints: dA = dC.B^T, dB = A^T.dC.
template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::batched_matmul(tape, a, b, false, "matmul");
}

// [..,m,k] x [..,n,k] -> [..,m,n]; b is used transposed (attention scores).
template <class T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::batched_matmul(tape, a, b, true, "matmul_nt");
}

// --- softmax ------------------------------------------------------------------

// Row softmax over the last axis with an optional keep-mask broadcast over
// leading axes (mask shape must match the trailing extents of x). Rows are
// stabilized by subtracting the row max over kept entries; masked entries are
// exactly 0 in the output. A fully masked row is an error.
template <class T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x, const Mask* mask = nullptr) {
  if (x.rank() < 1) throw ShapeError("softmax_rows: rank-0 input");
  const std::int64_t n = x.shape.back();
  const std::int64_t rows = x.numel() / n;
  std::int64_t mask_n = 0;
  if (mask) {
    mask_n = mask->numel();
    if (mask_n > x.numel() || x.numel() % mask_n != 0 || mask_n % n != 0)
      throw ShapeError("softmax_rows: mask " + shape_str(mask->shape) +
                       " does not align with input " + shape_str(x.shape));
  }
  Tensor<T> out = make_output<T>(tape, x.shape, x.on_graph());
  const std::uint8_t* keep = mask ? mask->ptr() : nullptr;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * n;
    T* yr = out.ptr() + r * n;
    T sum{0};
    if (!keep) {
      T mx = xr[0];
      for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
      for (std::int64_t i = 0; i < n; ++i) {
        yr[i] = std::exp(xr[i] - mx);
        sum += yr[i];
      }
    } else {
      const std::uint8_t* kp = keep + detail::mask_index(r * n, mask_n);
      T mx{0};
      std::int64_t kept = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        if (!kp[i]) continue;
        mx = kept ? std::max(mx, xr[i]) : xr[i];
        ++kept;
      }
      if (kept == 0) throw ValueError("softmax_rows: fully masked row " + std::to_string(r));
      for (std::int64_t i = 0; i < n; ++i) {
        yr[i] = kp[i] ? std::exp(xr[i] - mx) : T{0};
        sum += yr[i];
      }
    }
    const T inv = T{1} / sum;
    for (std::int64_t i = 0; i < n; ++i) yr[i] *= inv;  // masked entries stay exactly 0
  }
  check_finite("softmax_rows", out);
  if (tape && x.on_graph()) {
    // masked outputs are exactly 0, so their terms vanish without branching
    tape->record([x, out, rows, n]() {
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* yr = out.ptr() + r * n;
        const T* gy = out.gptr() + r * n;
        T* gx = x.grad->data() + r * n;
        T dot{0};
        for (std::int64_t i = 0; i < n; ++i) dot += gy[i] * yr[i];
        for (std::int64_t i = 0; i < n; ++i) gx[i] += yr[i] * (gy[i] - dot);
      }
    });
  }
  return out;
}

// --- loss ----------------------------------------------------------------------

// Mean negative log softmax probability of the target class, natural log.
// logits [N,V], targets [N] with every target in [0,V).
template <class T>
Tensor<T> cross_entropy(Tape<T>* tape, const Tensor<T>& logits, const IntTensor& targets) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [N,V], got " + shape_str(logits.shape));
  const std::int64_t n = logits.shape[0], v = logits.shape[1];
  if (targets.numel() != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.numel()) + " targets for " +
                     std::to_string(n) + " rows");
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int32_t t = targets.ptr()[r];
    if (t < 0 || t >= v)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(v) + ") at row " + std::to_string(r));
  }
  Tensor<T> out = make_output<T>(tape, {1}, logits.on_graph());
  double acc = 0;  // accumulate row losses in double regardless of T
  for (std::int64_t r = 0; r < n; ++r) {
    const T* xr = logits.ptr() + r * v;
    T mx = xr[0];
    for (std::int64_t i = 1; i < v; ++i) mx = std::max(mx, xr[i]);
    double s = 0;
    for (std::int64_t i = 0; i < v; ++i) s += std::exp(static_cast<double>(xr[i] - mx));
    acc += static_cast<double>(mx) + std::log(s) - static_cast<double>(xr[targets.ptr()[r]]);
  }
  out.ptr()[0] = static_cast<T>(acc / static_cast<double>(n));
  check_finite("cross_entropy", out);
  if (tape && logits.on_graph()) {
    IntTensor tg = targets;
    tape->record([logits, tg, out, n, v]() {
      const T g = out.gptr()[0];
      for (std::int64_t r = 0; r < n; ++r) {
        const T* xr = logits.ptr() + r * v;
        T* gx = logits.grad->data() + r * v;
        T mx = xr[0];
        for (std::int64_t i = 1; i < v; ++i) mx = std::max(mx, xr[i]);
        double s = 0;
        for (std::int64_t i = 0; i < v; ++i) s += std::exp(static_cast<double>(xr[i] - mx));
        const T invn = g / static_cast<T>(n);
        for (std::int64_t i = 0; i < v; ++i) {
          const T p = static_cast<T>(std::exp(static_cast<double>(xr[i] - mx)) / s);
          gx[i] += invn * (p - (i == tg.ptr()[r] ? T{1} : T{0}));
        }
      }
    });
  }
  return out;
}

// --- depth-wise causal convolution ------------------------------------------------

// out[b,t,c] = sum_j kernels[c,j] * x[b,t-2+j,c], kernel width fixed at 3,
// input left-padded with zeros (causal), no cross-channel mixing, no bias.
template <class T>
Tensor<T> depthwise_conv1d_causal(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernels) {
  if (x.rank() != 3) throw ShapeError("depthwise_conv1d_causal: x must be [B,L,C], got " + shape_str(x.shape));
  if (kernels.rank() != 2 || kernels.shape[1] != 3 || kernels.shape[0] != x.shape[2])
    throw ShapeError("depthwise_conv1d_causal: kernels " + shape_str(kernels.shape) +
                     " do not match channels of x " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], l = x.shape[1], c = x.shape[2];
  const bool ng = x.on_graph() || kernels.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t t = 0; t < l; ++t)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        T acc{0};
        for (std::int64_t j = 0; j < 3; ++j) {
          const std::int64_t s = t - 2 + j;
          if (s < 0) continue;
          acc += kernels.ptr()[ci * 3 + j] * x.ptr()[(bi * l + s) * c + ci];
        }
        out.ptr()[(bi * l + t) * c + ci] = acc;
      }
  check_finite("depthwise_conv1d_causal", out);
  if (tape && ng) {
    tape->record([x, kernels, out, b, l, c]() {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t t = 0; t < l; ++t)
          for (std::int64_t ci = 0; ci < c; ++ci) {
            const T g = out.gptr()[(bi * l + t) * c + ci];
            for (std::int64_t j = 0; j < 3; ++j) {
              const std::int64_t s = t - 2 + j;
              if (s < 0) continue;
              if (x.on_graph())
                x.grad->data()[(bi * l + s) * c + ci] += kernels.ptr()[ci * 3 + j] * g;
              if (kernels.on_graph())
                kernels.grad->data()[ci * 3 + j] += x.ptr()[(bi * l + s) * c + ci] * g;
            }
          }
    });
  }
  return out;
}

// --- activations -----------------------------------------------------------------

// max(0,x)^2; adjoint 2x for x>0, 0 for x<=0.
template <class T>
Tensor<T> squared_relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = make_output<T>(tape, x.shape, x.on_graph());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x.ptr()[i];
    out.ptr()[i] = v > T{0} ? v * v : T{0};
  }
  check_finite("squared_relu", out);
  if (tape && x.on_graph()) {
    tape->record([x, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const T v = x.ptr()[i];
        if (v > T{0}) x.grad->data()[i] += T{2} * v * out.gptr()[i];
      }
    });
  }
  return out;
}

// --- layer norm ------------------------------------------------------------------

// Standardize over the last axis (biased variance, eps inside the sqrt),
// then apply the affine gain/bias.
template <class T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = static_cast<T>(1e-5)) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 || gain.shape[0] != x.shape.back() ||
      bias.shape[0] != x.shape.back())
    throw ShapeError("layer_norm: x " + shape_str(x.shape) + ", gain " + shape_str(gain.shape) +
                     ", bias " + shape_str(bias.shape));
  const std::int64_t d = x.shape.back();
  const std::int64_t rows = x.numel() / d;
  const bool ng = x.on_graph() || gain.on_graph() || bias.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T* yr = out.ptr() + r * d;
    T mean{0};
    for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i)
      yr[i] = gain.ptr()[i] * (xr[i] - mean) * inv + bias.ptr()[i];
  }
  check_finite("layer_norm", out);
  if (tape && ng) {
    tape->record([x, gain, bias, out, rows, d, eps]() {
      std::vector<T> xhat(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * d;
        const T* gy = out.gptr() + r * d;
        T mean{0};
        for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(var + eps);
        T m1{0}, m2{0};  // mean(dy*g), mean(dy*g*xhat)
        for (std::int64_t i = 0; i < d; ++i) {
          xhat[static_cast<std::size_t>(i)] = (xr[i] - mean) * inv;
          const T dyg = gy[i] * gain.ptr()[i];
          m1 += dyg;
          m2 += dyg * xhat[static_cast<std::size_t>(i)];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        if (x.on_graph()) {
          T* gx = x.grad->data() + r * d;
          for (std::int64_t i = 0; i < d; ++i)
            gx[i] += inv * (gy[i] * gain.ptr()[i] - m1 - xhat[static_cast<std::size_t>(i)] * m2);
        }
        if (gain.on_graph())
          for (std::int64_t i = 0; i < d; ++i)
            gain.grad->data()[i] += gy[i] * xhat[static_cast<std::size_t>(i)];
        if (bias.on_graph())
          for (std::int64_t i = 0; i < d; ++i) bias.grad->data()[i] += gy[i];
      }
    });
  }
  return out;
}

// --- dropout ---------------------------------------------------------------------

// Inverted dropout: each element zeroed with probability p, survivors scaled
// by 1/(1-p). Identity (and no rng draws) when p == 0 or not training.
template <class T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw ValueError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const std::int64_t n = x.numel();
  Tensor<T> mask = make_tensor<T>(x.shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < n; ++i) mask.ptr()[i] = rng.bernoulli(p) ? T{0} : keep_scale;
  Tensor<T> out = make_output<T>(tape, x.shape, x.on_graph());
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * mask.ptr()[i];
  check_finite("dropout", out);
  if (tape && x.on_graph()) {
    tape->record([x, out, mask, n]() {
      for (std::int64_t i = 0; i < n; ++i) x.grad->data()[i] += out.gptr()[i] * mask.ptr()[i];
    });
  }
  return out;
}

// --- embedding -------------------------------------------------------------------

// Row gather: out[b,l,:] = table[ids[b,l],:]. Adjoint scatter-adds rows.
template <class T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, const IntTensor& ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table must be [V,d], got " + shape_str(table.shape));
  const std::int64_t v = table.shape[0], d = table.shape[1];
  const std::int64_t n = ids.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int32_t t = ids.ptr()[i];
    if (t < 0 || t >= v)
      throw IndexError("embedding_lookup: id " + std::to_string(t) + " out of range [0," +
                       std::to_string(v) + ")");
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  Tensor<T> out = make_output<T>(tape, out_shape, table.on_graph());
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(table.ptr() + ids.ptr()[i] * d, table.ptr() + (ids.ptr()[i] + 1) * d,
              out.ptr() + i * d);
  check_finite("embedding_lookup", out);
  if (tape && table.on_graph()) {
    IntTensor idc = ids;
    tape->record([table, idc, out, n, d]() {
      for (std::int64_t i = 0; i < n; ++i) {
        T* dst = table.grad->data() + idc.ptr()[i] * d;
        const T* src = out.gptr() + i * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// --- sequence concatenation --------------------------------------------------------

// [B,La,d] ++ [B,Lb,d] -> [B,La+Lb,d] along the time axis.
template <class T>
Tensor<T> concat_time(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2])
    throw ShapeError("concat_time: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::int64_t bt = a.shape[0], la = a.shape[1], lb = b.shape[1], d = a.shape[2];
  const bool ng = a.on_graph() || b.on_graph();
  Tensor<T> out = make_output<T>(tape, {bt, la + lb, d}, ng);
  for (std::int64_t i = 0; i < bt; ++i) {
    std::copy(a.ptr() + i * la * d, a.ptr() + (i + 1) * la * d, out.ptr() + i * (la + lb) * d);
    std::copy(b.ptr() + i * lb * d, b.ptr() + (i + 1) * lb * d,
              out.ptr() + i * (la + lb) * d + la * d);
  }
  if (tape && ng) {
    tape->record([a, b, out, bt, la, lb, d]() {
      for (std::int64_t i = 0; i < bt; ++i) {
        const T* g = out.gptr() + i * (la + lb) * d;
        if (a.on_graph())
          for (std::int64_t j = 0; j < la * d; ++j) a.grad->data()[i * la * d + j] += g[j];
        if (b.on_graph())
          for (std::int64_t j = 0; j < lb * d; ++j) b.grad->data()[i * lb * d + j] += g[la * d + j];
      }
    });
  }
  return out;
}

// Reverse-order adjoint accumulation; free-function form of Tape::backward.
template <class T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

}  // namespace attnlab
