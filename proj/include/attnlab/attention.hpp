#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/gradcheck.hpp"
#include "attnlab/ops.hpp"
#include "attnlab/rng.hpp"

// The four attention modules. MHA scores content only (absolute position
// information is added to the embeddings upstream); MDHA adds a width-3
// causal depth-wise convolution on the projected, head-split Q/K/V; RMHA
// replaces absolute position terms with relative-offset scoring (projected
// sinusoid table plus global content/position biases); RCMHA combines the
// relative scoring with the depth-wise convolution.

namespace attnlab {

enum class AttentionVariant { mha, mdha, rmha, rcmha };

constexpr bool uses_relative(AttentionVariant v) {
  return v == AttentionVariant::rmha || v == AttentionVariant::rcmha;
}

constexpr bool uses_dwc(AttentionVariant v) {
  return v == AttentionVariant::mdha || v == AttentionVariant::rcmha;
}

inline std::string variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::mha: return "MHA";
    case AttentionVariant::mdha: return "MDHA";
    case AttentionVariant::rmha: return "RMHA";
    case AttentionVariant::rcmha: return "RCMHA";
  }
  return "?";
}

inline std::optional<AttentionVariant> parse_variant(const std::string& s) {
  if (s == "MHA" || s == "mha") return AttentionVariant::mha;
  if (s == "MDHA" || s == "mdha") return AttentionVariant::mdha;
  if (s == "RMHA" || s == "rmha") return AttentionVariant::rmha;
  if (s == "RCMHA" || s == "rcmha") return AttentionVariant::rcmha;
  return std::nullopt;
}

struct AttentionConfig {
  std::int64_t d_model = 0;
  std::int64_t heads = 0;
  double p_drop = 0.0;
  std::int64_t mem_len = 0;
  static constexpr std::int64_t kernel_width = 3;

  std::int64_t d_head() const { return d_model / heads; }

  void validate() const {
    if (d_model <= 0 || heads <= 0)
      throw ValueError("AttentionConfig: d_model and heads must be positive");
    if (d_model % heads != 0)
      throw ValueError("AttentionConfig: d_model " + std::to_string(d_model) +
                       " not divisible by heads " + std::to_string(heads));
    if (p_drop < 0.0 || p_drop >= 1.0)
      throw ValueError("AttentionConfig: p_drop must be in [0,1)");
    if (mem_len < 0) throw ValueError("AttentionConfig: mem_len must be >= 0");
  }
};

// w_q/w_k/w_v/w_o are [d_model,d_model]; the dwc kernels ([d_model,3], one
// width-3 kernel per channel) are present iff the variant convolves Q/K/V.
template <class T>
struct ProjectionSet {
  Tensor<T> w_q, w_k, w_v, w_o;
  Tensor<T> dwc_q, dwc_k, dwc_v;

  bool has_dwc() const { return dwc_q.defined(); }
};

// Relative-position parameters: learned projection of the fixed sinusoid
// table plus the global content bias u and global position bias v.
template <class T>
struct RelPosParams {
  Tensor<T> w_kr;   // [d_model, d_model]
  Tensor<T> u, v;   // [d_model]

  bool defined() const { return w_kr.defined(); }
};

template <class T>
struct AttentionParams {
  ProjectionSet<T> proj;
  RelPosParams<T> rel;

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w_q", &proj.w_q});
    out.push_back({prefix + ".w_k", &proj.w_k});
    out.push_back({prefix + ".w_v", &proj.w_v});
    out.push_back({prefix + ".w_o", &proj.w_o});
    if (proj.has_dwc()) {
      out.push_back({prefix + ".dwc_q", &proj.dwc_q});
      out.push_back({prefix + ".dwc_k", &proj.dwc_k});
      out.push_back({prefix + ".dwc_v", &proj.dwc_v});
    }
    if (rel.defined()) {
      out.push_back({prefix + ".w_kr", &rel.w_kr});
      out.push_back({prefix + ".u", &rel.u});
      out.push_back({prefix + ".v", &rel.v});
    }
  }
};

// --- parameter construction and initialization -------------------------------

// Leaf tensor with a zeroed grad buffer, not tied to any tape.
template <class T>
Tensor<T> make_leaf(const Shape& shape) {
  check_shape_positive(shape);
  const std::int64_t n = shape_numel(shape);
  return Tensor<T>(shape, std::make_shared<Buffer<T>>(n), std::make_shared<Buffer<T>>(n));
}

// Glorot-uniform: U(-a,a) with a = sqrt(6/(fan_in+fan_out)); the resulting
// standard deviation is sqrt(2/(fan_in+fan_out)).
template <class T>
void init_glorot(Tensor<T>& w, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(w.shape[0] + w.shape[1]));
  for (std::int64_t i = 0; i < w.numel(); ++i) w.ptr()[i] = static_cast<T>(rng.uniform(-a, a));
}

// [0,0,1] per channel: the causal width-3 identity, so a freshly initialized
// convolving variant starts exactly at its non-convolving counterpart.
template <class T>
void init_delta_kernels(Tensor<T>& k) {
  k.fill(T{0});
  for (std::int64_t c = 0; c < k.shape[0]; ++c) k.ptr()[c * 3 + 2] = T{1};
}

template <class T>
AttentionParams<T> make_attention_params(AttentionVariant variant, const AttentionConfig& cfg) {
  cfg.validate();
  AttentionParams<T> p;
  const std::int64_t d = cfg.d_model;
  p.proj.w_q = make_leaf<T>({d, d});
  p.proj.w_k = make_leaf<T>({d, d});
  p.proj.w_v = make_leaf<T>({d, d});
  p.proj.w_o = make_leaf<T>({d, d});
  if (uses_dwc(variant)) {
    p.proj.dwc_q = make_leaf<T>({d, 3});
    p.proj.dwc_k = make_leaf<T>({d, 3});
    p.proj.dwc_v = make_leaf<T>({d, 3});
  }
  if (uses_relative(variant)) {
    p.rel.w_kr = make_leaf<T>({d, d});
    p.rel.u = make_leaf<T>({d});
    p.rel.v = make_leaf<T>({d});
  }
  return p;
}

// Projections Glorot-uniform, u/v zeros, dwc kernels delta. Draw order is
// fixed (w_q, w_k, w_v, w_o, then w_kr) and the delta/zero fills consume no
// draws, so convolving and non-convolving variants initialized from the same
// seed share their common weights exactly.
template <class T>
void init_attention_params(AttentionParams<T>& p, Rng& rng) {
  init_glorot(p.proj.w_q, rng);
  init_glorot(p.proj.w_k, rng);
  init_glorot(p.proj.w_v, rng);
  init_glorot(p.proj.w_o, rng);
  if (p.proj.has_dwc()) {
    init_delta_kernels(p.proj.dwc_q);
    init_delta_kernels(p.proj.dwc_k);
    init_delta_kernels(p.proj.dwc_v);
  }
  if (p.rel.defined()) {
    init_glorot(p.rel.w_kr, rng);
    p.rel.u.fill(T{0});
    p.rel.v.fill(T{0});
  }
}

// --- positional tables ---------------------------------------------------------

// Row r encodes position p = start + r*step: sin(p/10000^(2i/d)) at even
// index 2i, cos of the same angle at odd index 2i+1.
template <class T>
Tensor<T> sinusoid_table(std::int64_t start, std::int64_t count, std::int64_t step,
                         std::int64_t d_model) {
  if (d_model <= 0 || d_model % 2 != 0)
    throw ValueError("sinusoid_table: d_model must be positive and even, got " +
                     std::to_string(d_model));
  if (count <= 0) throw ValueError("sinusoid_table: count must be positive");
  Tensor<T> out = make_tensor<T>({count, d_model});
  for (std::int64_t r = 0; r < count; ++r) {
    const double p = static_cast<double>(start + r * step);
    for (std::int64_t i = 0; i < d_model / 2; ++i) {
      const double angle = p / std::pow(10000.0, 2.0 * static_cast<double>(i) /
                                                     static_cast<double>(d_model));
      out.ptr()[r * d_model + 2 * i] = static_cast<T>(std::sin(angle));
      out.ptr()[r * d_model + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return out;
}

// Absolute positions 0..count-1 (added to embeddings for MHA/MDHA).
template <class T>
Tensor<T> sinusoid_positions(std::int64_t count, std::int64_t d_model) {
  return sinusoid_table<T>(0, count, 1, d_model);
}

// Relative offsets for Lq queries over Lk keys, descending: row a encodes
// offset (Lk-1) - a, covering Lk-1 down to -(Lq-1).
template <class T>
Tensor<T> rel_sinusoid_table(std::int64_t q_len, std::int64_t k_len, std::int64_t d_model) {
  return sinusoid_table<T>(k_len - 1, q_len + k_len - 1, -1, d_model);
}

// --- head split / merge ---------------------------------------------------------

// [B,L,h*dh] -> [B,h,L,dh]; lossless permutation copy.
template <class T>
Tensor<T> split_heads(Tape<T>* tape, const Tensor<T>& x, std::int64_t heads) {
  if (x.rank() != 3 || x.shape[2] % heads != 0)
    throw ShapeError("split_heads: " + shape_str(x.shape) + " with heads " +
                     std::to_string(heads));
  const std::int64_t b = x.shape[0], l = x.shape[1], dh = x.shape[2] / heads;
  Tensor<T> out = make_output<T>(tape, {b, heads, l, dh}, x.on_graph());
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t li = 0; li < l; ++li)
      for (std::int64_t h = 0; h < heads; ++h)
        std::copy(x.ptr() + ((bi * l + li) * heads + h) * dh,
                  x.ptr() + ((bi * l + li) * heads + h) * dh + dh,
                  out.ptr() + (((bi * heads + h) * l) + li) * dh);
  if (tape && x.on_graph()) {
    tape->record([x, out, b, l, heads, dh]() {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t li = 0; li < l; ++li)
          for (std::int64_t h = 0; h < heads; ++h) {
            T* dst = x.grad->data() + ((bi * l + li) * heads + h) * dh;
            const T* src = out.gptr() + (((bi * heads + h) * l) + li) * dh;
            for (std::int64_t c = 0; c < dh; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

// [B,h,L,dh] -> [B,L,h*dh]; exact inverse of split_heads.
template <class T>
Tensor<T> merge_heads(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("merge_heads: expected [B,h,L,dh], got " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], l = x.shape[2], dh = x.shape[3];
  Tensor<T> out = make_output<T>(tape, {b, l, heads * dh}, x.on_graph());
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t li = 0; li < l; ++li)
        std::copy(x.ptr() + (((bi * heads + h) * l) + li) * dh,
                  x.ptr() + (((bi * heads + h) * l) + li) * dh + dh,
                  out.ptr() + ((bi * l + li) * heads + h) * dh);
  if (tape && x.on_graph()) {
    tape->record([x, out, b, l, heads, dh]() {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t li = 0; li < l; ++li) {
            T* dst = x.grad->data() + (((bi * heads + h) * l) + li) * dh;
            const T* src = out.gptr() + ((bi * l + li) * heads + h) * dh;
            for (std::int64_t c = 0; c < dh; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

// [n,h*dh] -> [h,n,dh]: per-head view of the projected relative table.
template <class T>
Tensor<T> table_heads(Tape<T>* tape, const Tensor<T>& table, std::int64_t heads) {
  if (table.rank() != 2 || table.shape[1] % heads != 0)
    throw ShapeError("table_heads: " + shape_str(table.shape) + " with heads " +
                     std::to_string(heads));
  const std::int64_t n = table.shape[0], dh = table.shape[1] / heads;
  Tensor<T> out = make_output<T>(tape, {heads, n, dh}, table.on_graph());
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t a = 0; a < n; ++a)
      std::copy(table.ptr() + (a * heads + h) * dh, table.ptr() + (a * heads + h) * dh + dh,
                out.ptr() + (h * n + a) * dh);
  if (tape && table.on_graph()) {
    tape->record([table, out, n, heads, dh]() {
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t a = 0; a < n; ++a) {
          T* dst = table.grad->data() + (a * heads + h) * dh;
          const T* src = out.gptr() + (h * n + a) * dh;
          for (std::int64_t c = 0; c < dh; ++c) dst[c] += src[c];
        }
    });
  }
  return out;
}

// --- masking -----------------------------------------------------------------------

// Keep-mask [q_len, total_len]: query i may attend to absolute key positions
// 0 .. (total_len - q_len) + i; later positions are masked out.
inline Mask causal_mask(std::int64_t q_len, std::int64_t total_len) {
  if (total_len < q_len)
    throw ShapeError("causal_mask: total_len " + std::to_string(total_len) + " < q_len " +
                     std::to_string(q_len));
  const std::int64_t mem = total_len - q_len;
  Mask m({q_len, total_len});
  for (std::int64_t i = 0; i < q_len; ++i)
    for (std::int64_t j = 0; j < total_len; ++j)
      m.ptr()[i * total_len + j] = static_cast<std::uint8_t>(j <= mem + i);
  return m;
}

// --- head-space ops -----------------------------------------------------------------

// x[B,h,L,dh] + bias[h*dh], the per-head slice of a d_model bias vector.
template <class T>
Tensor<T> add_head_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.shape[0] != x.shape[1] * x.shape[3])
    throw ShapeError("add_head_bias: " + shape_str(x.shape) + " with bias " +
                     shape_str(bias.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], l = x.shape[2], dh = x.shape[3];
  const bool ng = x.on_graph() || bias.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t li = 0; li < l; ++li)
        for (std::int64_t c = 0; c < dh; ++c) {
          const std::int64_t idx = (((bi * heads + h) * l) + li) * dh + c;
          out.ptr()[idx] = x.ptr()[idx] + bias.ptr()[h * dh + c];
        }
  check_finite("add_head_bias", out);
  if (tape && ng) {
    tape->record([x, bias, out, b, heads, l, dh]() {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t li = 0; li < l; ++li)
            for (std::int64_t c = 0; c < dh; ++c) {
              const std::int64_t idx = (((bi * heads + h) * l) + li) * dh + c;
              if (x.on_graph()) x.grad->data()[idx] += out.gptr()[idx];
              if (bias.on_graph()) bias.grad->data()[h * dh + c] += out.gptr()[idx];
            }
    });
  }
  return out;
}

namespace detail {

// Pack head h of a [B,h,L,w] tensor into a contiguous [B*L, w] block, and the
// inverse scatter (plain or accumulating). Lets the per-head products below
// run as one large gemm per head instead of B small ones.
template <class T>
void gather_head(const T* x, T* dst, std::int64_t b, std::int64_t heads, std::int64_t l,
                 std::int64_t w, std::int64_t h) {
  for (std::int64_t bi = 0; bi < b; ++bi)
    std::copy(x + ((bi * heads + h) * l) * w, x + ((bi * heads + h) * l + l) * w,
              dst + bi * l * w);
}

template <class T>
void scatter_head(const T* src, T* x, std::int64_t b, std::int64_t heads, std::int64_t l,
                  std::int64_t w, std::int64_t h, bool accumulate) {
  for (std::int64_t bi = 0; bi < b; ++bi) {
    T* dst = x + ((bi * heads + h) * l) * w;
    const T* s = src + bi * l * w;
    if (accumulate) {
      for (std::int64_t i = 0; i < l * w; ++i) dst[i] += s[i];
    } else {
      std::copy(s, s + l * w, dst);
    }
  }
}

}  // namespace detail

// x[B,h,L,dh] x table[h,n,dh]^T -> [B,h,L,n]; the table is shared across the
// batch axis, so each head runs as a single [B*L,dh] x [dh,n] product.
template <class T>
Tensor<T> bmm_broadcast_nt(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& table) {
  if (x.rank() != 4 || table.rank() != 3 || x.shape[1] != table.shape[0] ||
      x.shape[3] != table.shape[2])
    throw ShapeError("bmm_broadcast_nt: " + shape_str(x.shape) + " with table " +
                     shape_str(table.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], l = x.shape[2], dh = x.shape[3];
  const std::int64_t n = table.shape[1];
  const bool ng = x.on_graph() || table.on_graph();
  Tensor<T> out = make_output<T>(tape, {b, heads, l, n}, ng);
  {
    std::vector<T> xg(static_cast<std::size_t>(b * l * dh));
    std::vector<T> og(static_cast<std::size_t>(b * l * n));
    for (std::int64_t h = 0; h < heads; ++h) {
      detail::gather_head(x.ptr(), xg.data(), b, heads, l, dh, h);
      detail::gemm(false, true, b * l, n, dh, T{1}, xg.data(), dh, table.ptr() + (h * n) * dh, dh,
                   T{0}, og.data(), n);
      detail::scatter_head(og.data(), out.ptr(), b, heads, l, n, h, false);
    }
  }
  check_finite("bmm_broadcast_nt", out);
  if (tape && ng) {
    tape->record([x, table, out, b, heads, l, dh, n]() {
      std::vector<T> gg(static_cast<std::size_t>(b * l * n));
      std::vector<T> tmp(static_cast<std::size_t>(b * l * dh));
      for (std::int64_t h = 0; h < heads; ++h) {
        detail::gather_head(out.gptr(), gg.data(), b, heads, l, n, h);
        if (x.on_graph()) {  // dX_h += dC_h . T_h
          detail::gemm(false, false, b * l, dh, n, T{1}, gg.data(), n,
                       table.ptr() + (h * n) * dh, dh, T{0}, tmp.data(), dh);
          detail::scatter_head(tmp.data(), x.grad->data(), b, heads, l, dh, h, true);
        }
        if (table.on_graph()) {  // dT_h += dC_h^T . X_h
          detail::gather_head(x.ptr(), tmp.data(), b, heads, l, dh, h);
          detail::gemm(true, false, n, dh, b * l, T{1}, gg.data(), n, tmp.data(), dh, T{1},
                       table.grad->data() + (h * n) * dh, dh);
        }
      }
    });
  }
  return out;
}

// Row-shift rearrangement: in[b,h,i,a] indexed over the full offset table
// (row a = offset Lk-1-a) becomes out[b,h,i,j] = in[b,h,i,(Lq-1)-i+j], the
// per-query contiguous slice that realigns offsets to key positions.
template <class T>
Tensor<T> rel_shift(Tape<T>* tape, const Tensor<T>& x, std::int64_t k_len) {
  if (x.rank() != 4) throw ShapeError("rel_shift: expected [B,h,Lq,n], got " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], lq = x.shape[2], n = x.shape[3];
  if (n != lq + k_len - 1)
    throw ShapeError("rel_shift: table extent " + std::to_string(n) + " does not cover offsets for Lq=" +
                     std::to_string(lq) + ", Lk=" + std::to_string(k_len));
  Tensor<T> out = make_output<T>(tape, {b, heads, lq, k_len}, x.on_graph());
  for (std::int64_t bh = 0; bh < b * heads; ++bh)
    for (std::int64_t i = 0; i < lq; ++i)
      std::copy(x.ptr() + (bh * lq + i) * n + (lq - 1 - i),
                x.ptr() + (bh * lq + i) * n + (lq - 1 - i) + k_len,
                out.ptr() + (bh * lq + i) * k_len);
  if (tape && x.on_graph()) {
    tape->record([x, out, b, heads, lq, n, k_len]() {
      for (std::int64_t bh = 0; bh < b * heads; ++bh)
        for (std::int64_t i = 0; i < lq; ++i) {
          T* dst = x.grad->data() + (bh * lq + i) * n + (lq - 1 - i);
          const T* src = out.gptr() + (bh * lq + i) * k_len;
          for (std::int64_t j = 0; j < k_len; ++j) dst[j] += src[j];
        }
    });
  }
  return out;
}

// [B,L,d] -> [B,len,d], rows start..start+len-1 of the time axis.
template <class T>
Tensor<T> slice_time3(Tape<T>* tape, const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  if (x.rank() != 3) throw ShapeError("slice_time3: expected rank 3, got " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], l = x.shape[1], d = x.shape[2];
  if (start < 0 || len <= 0 || start + len > l)
    throw ShapeError("slice_time3: slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " + shape_str(x.shape));
  Tensor<T> out = make_output<T>(tape, {b, len, d}, x.on_graph());
  for (std::int64_t bi = 0; bi < b; ++bi)
    std::copy(x.ptr() + (bi * l + start) * d, x.ptr() + (bi * l + start + len) * d,
              out.ptr() + bi * len * d);
  if (tape && x.on_graph()) {
    tape->record([x, out, b, l, d, start, len]() {
      for (std::int64_t bi = 0; bi < b; ++bi) {
        T* dst = x.grad->data() + (bi * l + start) * d;
        const T* src = out.gptr() + bi * len * d;
        for (std::int64_t i = 0; i < len * d; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// [B,h,L,dh] -> [B,h,len,dh], rows start..start+len-1 of the time axis.
template <class T>
Tensor<T> slice_time4(Tape<T>* tape, const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  if (x.rank() != 4) throw ShapeError("slice_time4: expected rank 4, got " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], l = x.shape[2], dh = x.shape[3];
  if (start < 0 || len <= 0 || start + len > l)
    throw ShapeError("slice_time4: slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " + shape_str(x.shape));
  Tensor<T> out = make_output<T>(tape, {b, heads, len, dh}, x.on_graph());
  for (std::int64_t bh = 0; bh < b * heads; ++bh)
    std::copy(x.ptr() + (bh * l + start) * dh, x.ptr() + (bh * l + start + len) * dh,
              out.ptr() + bh * len * dh);
  if (tape && x.on_graph()) {
    tape->record([x, out, b, heads, l, dh, start, len]() {
      for (std::int64_t bh = 0; bh < b * heads; ++bh) {
        T* dst = x.grad->data() + (bh * l + start) * dh;
        const T* src = out.gptr() + bh * len * dh;
        for (std::int64_t j = 0; j < len * dh; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Depth-wise causal convolution on head-split tensors: channel (h,c) of
// x[B,h,L,dh] is convolved along L with kernels[h*dh+c, :], width 3, zero
// left padding, no bias, no cross-channel mixing.
template <class T>
Tensor<T> apply_dwc(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernels) {
  if (x.rank() != 4) throw ShapeError("apply_dwc: expected [B,h,L,dh], got " + shape_str(x.shape));
  const std::int64_t b = x.shape[0], heads = x.shape[1], l = x.shape[2], dh = x.shape[3];
  if (kernels.rank() != 2 || kernels.shape[1] != 3 || kernels.shape[0] != heads * dh)
    throw ShapeError("apply_dwc: kernels " + shape_str(kernels.shape) + " do not match " +
                     std::to_string(heads * dh) + " channels of " + shape_str(x.shape));
  const bool ng = x.on_graph() || kernels.on_graph();
  Tensor<T> out = make_output<T>(tape, x.shape, ng);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < l; ++t)
        for (std::int64_t c = 0; c < dh; ++c) {
          T acc{0};
          for (std::int64_t j = 0; j < 3; ++j) {
            const std::int64_t s = t - 2 + j;
            if (s < 0) continue;
            acc += kernels.ptr()[(h * dh + c) * 3 + j] *
                   x.ptr()[(((bi * heads + h) * l) + s) * dh + c];
          }
          out.ptr()[(((bi * heads + h) * l) + t) * dh + c] = acc;
        }
  check_finite("apply_dwc", out);
  if (tape && ng) {
    tape->record([x, kernels, out, b, heads, l, dh]() {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t t = 0; t < l; ++t)
            for (std::int64_t c = 0; c < dh; ++c) {
              const T g = out.gptr()[(((bi * heads + h) * l) + t) * dh + c];
              for (std::int64_t j = 0; j < 3; ++j) {
                const std::int64_t s = t - 2 + j;
                if (s < 0) continue;
                if (x.on_graph())
                  x.grad->data()[(((bi * heads + h) * l) + s) * dh + c] +=
                      kernels.ptr()[(h * dh + c) * 3 + j] * g;
                if (kernels.on_graph())
                  kernels.grad->data()[(h * dh + c) * 3 + j] +=
                      x.ptr()[(((bi * heads + h) * l) + s) * dh + c] * g;
              }
            }
    });
  }
  return out;
}

// --- scoring -----------------------------------------------------------------------

template <class T>
struct AttentionOutput {
  Tensor<T> y;
  Tensor<T> weights;  // softmax weights, pre-dropout: rows sum to 1
};

// softmax(Q.K^T / sqrt(d) under mask).V; returns the context and the
// (pre-dropout) weights.
template <class T>
AttentionOutput<T> scaled_dot_attention(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v, const Mask* mask, double p_drop,
                                        Rng& rng, bool training) {
  if (q.rank() != 4 || k.rank() != 4 || q.shape.back() != k.shape.back())
    throw ShapeError("scaled_dot_attention: head width mismatch, Q " + shape_str(q.shape) +
                     " vs K " + shape_str(k.shape));
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.shape.back())));
  auto scores = scale(tape, matmul_nt(tape, q, k), inv_sqrt_d);
  auto weights = softmax_rows(tape, scores, mask);
  auto dropped = dropout(tape, weights, p_drop, rng, training);
  return {matmul(tape, dropped, v), weights};
}

namespace detail {

template <class T>
void check_rel_args(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& rel_table,
                    const Tensor<T>& u, const Tensor<T>& v) {
  if (q.rank() != 4 || k.rank() != 4 || q.shape[0] != k.shape[0] || q.shape[1] != k.shape[1] ||
      q.shape[3] != k.shape[3])
    throw ShapeError("rel_scores: Q " + shape_str(q.shape) + " vs K " + shape_str(k.shape));
  const std::int64_t d_model = q.shape[1] * q.shape[3];
  if (rel_table.rank() != 2 || rel_table.shape[1] != d_model)
    throw ShapeError("rel_scores: rel_table " + shape_str(rel_table.shape) +
                     " does not match d_model " + std::to_string(d_model));
  const std::int64_t need = q.shape[2] + k.shape[2] - 1;
  if (rel_table.shape[0] != need)
    throw ShapeError("rel_scores: rel_table holds " + std::to_string(rel_table.shape[0]) +
                     " offsets, need " + std::to_string(need) + " (Lk-1 down to -(Lq-1))");
  if (u.rank() != 1 || u.shape[0] != d_model || v.rank() != 1 || v.shape[0] != d_model)
    throw ShapeError("rel_scores: u/v must be [d_model]");
}

}  // namespace detail

// Reference relative scoring by explicit per-(i,j) offset gather:
//   score[i,j] = ((q_i+u).k_j + (q_i+v).r_off(i,j)) / sqrt(d_head)
// where query i sits at absolute position (Lk-Lq)+i, key j at j, the offset
// is their difference, and r is the per-head slice of the projected sinusoid
// row for that offset (table row a = offset Lk-1-a). Forward-only: this is
// the oracle the shifted fast path is checked against.
template <class T>
Tensor<T> rel_scores_naive(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& rel_table,
                           const Tensor<T>& u, const Tensor<T>& v) {
  detail::check_rel_args(q, k, rel_table, u, v);
  const std::int64_t b = q.shape[0], heads = q.shape[1], lq = q.shape[2], dh = q.shape[3];
  const std::int64_t lk = k.shape[2];
  const std::int64_t mem = lk - lq;
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> out = make_tensor<T>({b, heads, lq, lk});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t i = 0; i < lq; ++i)
        for (std::int64_t j = 0; j < lk; ++j) {
          const std::int64_t offset = mem + i - j;
          const std::int64_t row = (lk - 1) - offset;
          const T* qp = q.ptr() + (((bi * heads + h) * lq) + i) * dh;
          const T* kp = k.ptr() + (((bi * heads + h) * lk) + j) * dh;
          const T* rp = rel_table.ptr() + row * heads * dh + h * dh;
          T content{0}, position{0};
          for (std::int64_t c = 0; c < dh; ++c) {
            content += (qp[c] + u.ptr()[h * dh + c]) * kp[c];
            position += (qp[c] + v.ptr()[h * dh + c]) * rp[c];
          }
          out.ptr()[(((bi * heads + h) * lq) + i) * lk + j] = (content + position) * inv_sqrt_d;
        }
  check_finite("rel_scores_naive", out);
  return out;
}

// Fast path: one batched product against the full offset table followed by
// the row-shift rearrangement. Produces the same values as rel_scores_naive.
template <class T>
Tensor<T> rel_scores_shifted(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k,
                             const Tensor<T>& rel_table, const Tensor<T>& u, const Tensor<T>& v) {
  detail::check_rel_args(q, k, rel_table, u, v);
  const std::int64_t heads = q.shape[1], lk = k.shape[2], dh = q.shape[3];
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto r_heads = table_heads(tape, rel_table, heads);
  auto content = matmul_nt(tape, add_head_bias(tape, q, u), k);
  auto position = rel_shift(tape, bmm_broadcast_nt(tape, add_head_bias(tape, q, v), r_heads), lk);
  return scale(tape, add(tape, content, position), inv_sqrt_d);
}

// --- full module ---------------------------------------------------------------------

// One attention module pass. x is the (normalized) current segment
// [B,L,d_model]; memory, when present, is the cached previous hidden state
// [B,M,d_model] already normalized the same way. K and V are projected from
// [memory || x]; Q from x, except that convolving variants project Q over
// [memory || x] too so the convolution sees real left context, then slice
// the memory rows off after convolving.
template <class T>
AttentionOutput<T> attention_forward(Tape<T>* tape, AttentionVariant variant,
                                     const AttentionConfig& cfg, const AttentionParams<T>& params,
                                     const Tensor<T>& x, const Tensor<T>* memory, Rng& rng,
                                     bool training) {
  cfg.validate();
  if (x.rank() != 3 || x.shape[2] != cfg.d_model)
    throw ShapeError("attention_forward: x " + shape_str(x.shape) + " vs d_model " +
                     std::to_string(cfg.d_model));
  if (params.proj.has_dwc() != uses_dwc(variant))
    throw ValueError("attention_forward: dwc kernels " +
                     std::string(params.proj.has_dwc() ? "present" : "missing") + " for variant " +
                     variant_name(variant));
  if (params.rel.defined() != uses_relative(variant))
    throw ValueError("attention_forward: relative-position parameters " +
                     std::string(params.rel.defined() ? "present" : "missing") + " for variant " +
                     variant_name(variant));
  const bool has_mem = memory && memory->defined() && memory->shape[1] > 0;
  if (has_mem && (memory->rank() != 3 || memory->shape[0] != x.shape[0] ||
                  memory->shape[2] != cfg.d_model))
    throw ShapeError("attention_forward: memory " + shape_str(memory->shape) +
                     " incompatible with x " + shape_str(x.shape));

  const std::int64_t b = x.shape[0], l = x.shape[1], d = cfg.d_model;
  const std::int64_t m = has_mem ? memory->shape[1] : 0;
  const std::int64_t total = m + l;

  Tensor<T> kv_in = has_mem ? concat_time(tape, *memory, x) : x;
  // Convolving variants give Q real left context: prepend the last
  // kernel_width-1 memory frames before projecting, convolve, then slice
  // them back off. Projecting only those frames (not the whole memory)
  // computes the same result.
  const std::int64_t q_ctx = (uses_dwc(variant) && has_mem) ? std::min<std::int64_t>(m, 2) : 0;
  Tensor<T> q_in = x;
  if (q_ctx > 0)
    q_in = concat_time(tape, slice_time3(tape, *memory, m - q_ctx, q_ctx), x);
  const std::int64_t lq_src = q_in.shape[1];

  auto project = [&](const Tensor<T>& src, const Tensor<T>& w, std::int64_t rows) {
    return reshape(tape, matmul(tape, reshape(tape, src, {src.shape[0] * rows, d}), w),
                   {src.shape[0], rows, d});
  };
  auto qh = split_heads(tape, project(q_in, params.proj.w_q, lq_src), cfg.heads);
  auto kh = split_heads(tape, project(kv_in, params.proj.w_k, total), cfg.heads);
  auto vh = split_heads(tape, project(kv_in, params.proj.w_v, total), cfg.heads);

  if (uses_dwc(variant)) {
    qh = apply_dwc(tape, qh, params.proj.dwc_q);
    kh = apply_dwc(tape, kh, params.proj.dwc_k);
    vh = apply_dwc(tape, vh, params.proj.dwc_v);
    if (q_ctx > 0) qh = slice_time4(tape, qh, q_ctx, l);
  }

  Mask mask = causal_mask(l, total);
  AttentionOutput<T> attn;
  if (uses_relative(variant)) {
    auto sinusoids = rel_sinusoid_table<T>(l, total, d);
    auto rel_proj = matmul(tape, sinusoids, params.rel.w_kr);
    auto scores = rel_scores_shifted(tape, qh, kh, rel_proj, params.rel.u, params.rel.v);
    auto weights = softmax_rows(tape, scores, &mask);
    auto dropped = dropout(tape, weights, cfg.p_drop, rng, training);
    attn = {matmul(tape, dropped, vh), weights};
  } else {
    attn = scaled_dot_attention(tape, qh, kh, vh, &mask, cfg.p_drop, rng, training);
  }

  auto merged = merge_heads(tape, attn.y);
  auto y = reshape(tape, matmul(tape, reshape(tape, merged, {b * l, d}), params.proj.w_o),
                   {b, l, d});
  y = dropout(tape, y, cfg.p_drop, rng, training);
  return {y, attn.weights};
}

}  // namespace attnlab
