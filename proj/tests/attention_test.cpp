#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/attention.hpp"
#include "support/testutil.hpp"

using namespace attnlab;

namespace {

// --- sinusoid table -----------------------------------------------------------

TEST(SinusoidTable, PositionZeroAlternates) {
  auto t = sinusoid_table<double>(0, 3, 1, 6);
  for (int i = 0; i < 6; i += 2) {
    EXPECT_EQ(t.ptr()[i], 0.0);      // sin 0
    EXPECT_EQ(t.ptr()[i + 1], 1.0);  // cos 0
  }
}

TEST(SinusoidTable, EntriesBounded) {
  auto t = sinusoid_table<double>(-7, 40, 1, 8);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    EXPECT_GE(t.ptr()[i], -1.0);
    EXPECT_LE(t.ptr()[i], 1.0);
  }
}

TEST(SinusoidTable, DirectFormulaEvaluation) {
  // row for p=1, d=4: entry0 = sin(1/10000^0) = sin(1)
  auto t = sinusoid_table<double>(1, 1, 1, 4);
  EXPECT_NEAR(t.ptr()[0], 0.8414709848078965, 1e-15);
  EXPECT_NEAR(t.ptr()[1], std::cos(1.0), 1e-15);
  EXPECT_NEAR(t.ptr()[2], std::sin(1.0 / 100.0), 1e-15);
  EXPECT_NEAR(t.ptr()[3], std::cos(1.0 / 100.0), 1e-15);
}

TEST(SinusoidTable, OddWidthIsError) {
  EXPECT_THROW(sinusoid_table<double>(0, 2, 1, 5), ValueError);
}

// --- head split / merge ----------------------------------------------------------

TEST(Heads, SingleHeadPreservesOrder) {
  Rng rng(1);
  auto x = testutil::random_tensor<double>({2, 3, 4}, rng);
  auto y = split_heads<double>(nullptr, x, 1);
  ASSERT_EQ(y.shape, (Shape{2, 1, 3, 4}));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.ptr()[i], x.ptr()[i]);
}

TEST(Heads, RoundTripBitIdentical) {
  Rng rng(2);
  auto x = testutil::random_tensor<double>({3, 5, 8}, rng);
  auto back = merge_heads<double>(nullptr, split_heads<double>(nullptr, x, 4));
  for (std::int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(back.ptr()[i], x.ptr()[i]);
}

TEST(Heads, ExplicitIndexMapping) {
  // B=1, L=2, d=4, heads=2: out[0,h,l,c] must equal x[0,l,2h+c]
  auto x = make_tensor<double>({1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
  auto y = split_heads<double>(nullptr, x, 2);
  const double expect[] = {0, 1, 4, 5, 2, 3, 6, 7};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(y.ptr()[i], expect[i]);
}

TEST(Heads, DivisibilityError) {
  auto x = make_tensor<double>({1, 2, 5});
  EXPECT_THROW(split_heads<double>(nullptr, x, 2), ShapeError);
}

// --- causal mask -------------------------------------------------------------------

TEST(CausalMask, LowerTriangularWithoutMemory) {
  Mask m = causal_mask(3, 3);
  const std::uint8_t expect[] = {1, 0, 0, 1, 1, 0, 1, 1, 1};
  for (int i = 0; i < 9; ++i) EXPECT_EQ(m.ptr()[i], expect[i]);
}

TEST(CausalMask, FullHistoryVisible) {
  Mask m = causal_mask(1, 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(m.ptr()[i], 1);
}

TEST(CausalMask, TotalShorterThanQueryIsError) { EXPECT_THROW(causal_mask(4, 3), ShapeError); }

// --- scaled dot attention -------------------------------------------------------------

TEST(ScaledDot, SingleKeyReturnsValueRow) {
  Rng rng(3);
  auto q = testutil::random_tensor<double>({1, 1, 1, 4}, rng);
  auto k = testutil::random_tensor<double>({1, 1, 1, 4}, rng);
  auto v = testutil::random_tensor<double>({1, 1, 1, 4}, rng);
  auto out = scaled_dot_attention<double>(nullptr, q, k, v, nullptr, 0.0, rng, false);
  EXPECT_EQ(out.weights.ptr()[0], 1.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out.y.ptr()[i], v.ptr()[i]);
}

TEST(ScaledDot, ZeroQueryAveragesHistory) {
  Rng rng(4);
  auto q = make_tensor<double>({1, 1, 4, 2});
  auto k = testutil::random_tensor<double>({1, 1, 4, 2}, rng);
  auto v = testutil::random_tensor<double>({1, 1, 4, 2}, rng);
  Mask m = causal_mask(4, 4);
  auto out = scaled_dot_attention<double>(nullptr, q, k, v, &m, 0.0, rng, false);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 2; ++c) {
      double mean = 0;
      for (int j = 0; j <= i; ++j) mean += v.ptr()[j * 2 + c];
      mean /= (i + 1);
      EXPECT_NEAR(out.y.ptr()[i * 2 + c], mean, 1e-12);
    }
}

TEST(ScaledDot, MatchesDoubleLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::int64_t b = 2, h = 2, lq = 3, lk = 5, dh = 4;
    auto q = testutil::random_tensor<double>({b, h, lq, dh}, rng);
    auto k = testutil::random_tensor<double>({b, h, lk, dh}, rng);
    auto v = testutil::random_tensor<double>({b, h, lk, dh}, rng);
    Mask m = causal_mask(lq, lk);
    auto out = scaled_dot_attention<double>(nullptr, q, k, v, &m, 0.0, rng, false);
    for (std::int64_t bh = 0; bh < b * h; ++bh)
      for (std::int64_t i = 0; i < lq; ++i) {
        // per-pair scores, masked softmax, weighted value sum
        std::vector<double> row(static_cast<std::size_t>(lk), 0.0);
        double mx = -1e300;
        for (std::int64_t j = 0; j < lk; ++j) {
          double s = 0;
          for (std::int64_t c = 0; c < dh; ++c)
            s += q.ptr()[(bh * lq + i) * dh + c] * k.ptr()[(bh * lk + j) * dh + c];
          row[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
          if (m.ptr()[i * lk + j] && row[static_cast<std::size_t>(j)] > mx)
            mx = row[static_cast<std::size_t>(j)];
        }
        double z = 0;
        for (std::int64_t j = 0; j < lk; ++j)
          if (m.ptr()[i * lk + j]) z += std::exp(row[static_cast<std::size_t>(j)] - mx);
        for (std::int64_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::int64_t j = 0; j < lk; ++j)
            if (m.ptr()[i * lk + j])
              acc += std::exp(row[static_cast<std::size_t>(j)] - mx) / z *
                     v.ptr()[(bh * lk + j) * dh + c];
          ASSERT_NEAR(out.y.ptr()[(bh * lq + i) * dh + c], acc, 1e-10);
        }
      }
  }
}

TEST(ScaledDot, HeadWidthMismatchIsError) {
  Rng rng(5);
  auto q = make_tensor<double>({1, 1, 2, 4});
  auto k = make_tensor<double>({1, 1, 2, 3});
  auto v = make_tensor<double>({1, 1, 2, 3});
  EXPECT_THROW(scaled_dot_attention<double>(nullptr, q, k, v, nullptr, 0.0, rng, false),
               ShapeError);
}

// --- relative scoring -----------------------------------------------------------------

TEST(RelScores, CollapsesToContentOnlyWhenPositionTermsVanish) {
  Rng rng(6);
  const std::int64_t b = 1, h = 2, lq = 3, lk = 5, dh = 4;
  auto q = testutil::random_tensor<double>({b, h, lq, dh}, rng);
  auto k = testutil::random_tensor<double>({b, h, lk, dh}, rng);
  auto table = make_tensor<double>({lq + lk - 1, h * dh});  // zeros
  auto u = make_tensor<double>({h * dh});
  auto v = make_tensor<double>({h * dh});
  auto scores = rel_scores_naive(q, k, table, u, v);
  auto content = scale<double>(nullptr, matmul_nt<double>(nullptr, q, k),
                               1.0 / std::sqrt(static_cast<double>(dh)));
  EXPECT_LE(testutil::max_abs_diff(scores, content), 1e-12);
}

TEST(RelScores, ZeroContentLeavesPositionBiasTerms) {
  Rng rng(7);
  const std::int64_t b = 1, h = 1, lq = 2, lk = 4, dh = 3;
  auto q = make_tensor<double>({b, h, lq, dh});
  auto k = make_tensor<double>({b, h, lk, dh});
  auto table = testutil::random_tensor<double>({lq + lk - 1, dh}, rng);
  auto u = testutil::random_tensor<double>({dh}, rng);
  auto v = testutil::random_tensor<double>({dh}, rng);
  auto scores = rel_scores_naive(q, k, table, u, v);
  // with q = k = 0 only the v.r term survives
  const std::int64_t mem = lk - lq;
  for (std::int64_t i = 0; i < lq; ++i)
    for (std::int64_t j = 0; j < lk; ++j) {
      const std::int64_t row = (lk - 1) - (mem + i - j);
      double expect = 0;
      for (std::int64_t c = 0; c < dh; ++c) expect += v.ptr()[c] * table.ptr()[row * dh + c];
      expect /= std::sqrt(static_cast<double>(dh));
      EXPECT_NEAR(scores.ptr()[i * lk + j], expect, 1e-12);
    }
}

TEST(RelScores, ShiftedEqualsNaive) {
  for (std::int64_t lq = 1; lq <= 4; ++lq)
    for (std::int64_t mem = 0; mem <= 4; ++mem)
      for (std::int64_t h : {1, 2}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
          Rng rng(seed * 977 + static_cast<std::uint64_t>(lq * 64 + mem * 8 + h));
          const std::int64_t dh = 4, lk = mem + lq;
          auto q = testutil::random_tensor<double>({2, h, lq, dh}, rng);
          auto k = testutil::random_tensor<double>({2, h, lk, dh}, rng);
          auto table = testutil::random_tensor<double>({lq + lk - 1, h * dh}, rng);
          auto u = testutil::random_tensor<double>({h * dh}, rng);
          auto v = testutil::random_tensor<double>({h * dh}, rng);
          auto fast = rel_scores_shifted<double>(nullptr, q, k, table, u, v);
          auto naive = rel_scores_naive(q, k, table, u, v);
          ASSERT_LE(testutil::max_abs_diff(fast, naive), 1e-10)
              << "lq=" << lq << " mem=" << mem << " h=" << h << " seed=" << seed;
        }
      }
}

TEST(RelScores, SingleQueryNeedsNoShift) {
  Rng rng(8);
  auto q = testutil::random_tensor<double>({1, 2, 1, 4}, rng);
  auto k = testutil::random_tensor<double>({1, 2, 6, 4}, rng);
  auto table = testutil::random_tensor<double>({6, 8}, rng);
  auto u = testutil::random_tensor<double>({8}, rng);
  auto v = testutil::random_tensor<double>({8}, rng);
  auto fast = rel_scores_shifted<double>(nullptr, q, k, table, u, v);
  auto naive = rel_scores_naive(q, k, table, u, v);
  EXPECT_LE(testutil::max_abs_diff(fast, naive), 1e-12);
}

TEST(RelScores, ZeroMemoryContentAgreesAtOverlappingOffsets) {
  Rng rng(9);
  const std::int64_t h = 2, lq = 3, mem = 2, dh = 3;
  auto q = testutil::random_tensor<double>({1, h, lq, dh}, rng);
  auto k0 = testutil::random_tensor<double>({1, h, lq, dh}, rng);
  auto u = testutil::random_tensor<double>({h * dh}, rng);
  auto v = testutil::random_tensor<double>({h * dh}, rng);
  // same key content preceded by zero memory rows
  auto k1 = make_tensor<double>({1, h, mem + lq, dh});
  for (std::int64_t hh = 0; hh < h; ++hh)
    std::copy(k0.ptr() + hh * lq * dh, k0.ptr() + (hh + 1) * lq * dh,
              k1.ptr() + (hh * (mem + lq) + mem) * dh);
  // offset tables built from the same sinusoid basis and projection
  auto w = testutil::random_tensor<double>({h * dh, h * dh}, rng);
  auto t0 = matmul<double>(nullptr, rel_sinusoid_table<double>(lq, lq, h * dh), w);
  auto t1 = matmul<double>(nullptr, rel_sinusoid_table<double>(lq, mem + lq, h * dh), w);
  auto s0 = rel_scores_naive(q, k0, t0, u, v);
  auto s1 = rel_scores_naive(q, k1, t1, u, v);
  for (std::int64_t hh = 0; hh < h; ++hh)
    for (std::int64_t i = 0; i < lq; ++i)
      for (std::int64_t j = 0; j < lq; ++j)
        EXPECT_NEAR(s1.ptr()[(hh * lq + i) * (mem + lq) + (mem + j)],
                    s0.ptr()[(hh * lq + i) * lq + j], 1e-10);
}

TEST(RelScores, MissingOffsetsIsError) {
  auto q = make_tensor<double>({1, 1, 3, 4});
  auto k = make_tensor<double>({1, 1, 5, 4});
  auto short_table = make_tensor<double>({5, 4});  // needs 7 rows
  auto u = make_tensor<double>({4});
  auto v = make_tensor<double>({4});
  EXPECT_THROW(rel_scores_naive(q, k, short_table, u, v), ShapeError);
  EXPECT_THROW(rel_scores_shifted<double>(nullptr, q, k, short_table, u, v), ShapeError);
}

// --- head-space depth-wise convolution -----------------------------------------------------

TEST(ApplyDwc, DeltaKernelsAreIdentity) {
  Rng rng(10);
  auto x = testutil::random_tensor<double>({2, 2, 5, 3}, rng);
  auto k = make_leaf<double>({6, 3});
  init_delta_kernels(k);
  auto y = apply_dwc<double>(nullptr, x, k);
  for (std::int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.ptr()[i], x.ptr()[i]);
}

TEST(ApplyDwc, RunningThreeSumSingleChannel) {
  auto x = make_tensor<double>({1, 1, 4, 1}, {1, 2, 3, 4});
  auto k = make_tensor<double>({1, 3}, {1, 1, 1});
  auto y = apply_dwc<double>(nullptr, x, k);
  EXPECT_EQ(y.ptr()[0], 1.0);
  EXPECT_EQ(y.ptr()[1], 3.0);
  EXPECT_EQ(y.ptr()[2], 6.0);
  EXPECT_EQ(y.ptr()[3], 9.0);
}

TEST(ApplyDwc, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 50);
    const std::int64_t b = 2, h = 2, l = 6, dh = 3;
    auto x = testutil::random_tensor<double>({b, h, l, dh}, rng);
    auto k = testutil::random_tensor<double>({h * dh, 3}, rng);
    auto y = apply_dwc<double>(nullptr, x, k);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t hh = 0; hh < h; ++hh)
        for (std::int64_t t = 0; t < l; ++t)
          for (std::int64_t c = 0; c < dh; ++c) {
            double acc = 0;
            for (std::int64_t j = 0; j < 3; ++j) {
              const std::int64_t s = t - 2 + j;
              if (s < 0) continue;
              acc += k.ptr()[(hh * dh + c) * 3 + j] * x.ptr()[(((bi * h + hh) * l) + s) * dh + c];
            }
            ASSERT_NEAR(y.ptr()[(((bi * h + hh) * l) + t) * dh + c], acc, 1e-12);
          }
  }
}

TEST(ApplyDwc, ChannelMismatchIsError) {
  auto x = make_tensor<double>({1, 2, 4, 3});
  auto k = make_tensor<double>({5, 3});
  EXPECT_THROW(apply_dwc<double>(nullptr, x, k), ShapeError);
}

// --- full module ------------------------------------------------------------------------

AttentionConfig tiny_config(std::int64_t d, std::int64_t heads, std::int64_t mem_len,
                            double p_drop = 0.0) {
  AttentionConfig cfg;
  cfg.d_model = d;
  cfg.heads = heads;
  cfg.p_drop = p_drop;
  cfg.mem_len = mem_len;
  return cfg;
}

// Shared-weight counterpart with the dwc kernels dropped.
template <class T>
AttentionParams<T> strip_dwc(const AttentionParams<T>& p) {
  AttentionParams<T> out = p;
  out.proj.dwc_q = out.proj.dwc_k = out.proj.dwc_v = Tensor<T>{};
  return out;
}

TEST(AttentionForward, DeltaKernelCollapse) {
  // RCMHA with delta kernels computes exactly RMHA; MDHA likewise MHA.
  // Exercised over the experiment grid's (heads, p_drop) pairs scaled down.
  const std::int64_t grid[][2] = {{8, 4}, {8, 8}, {16, 4}, {16, 8}};
  for (auto [d, h] : grid) {
    for (std::int64_t mem : {0L, 3L}) {
      Rng rng(static_cast<std::uint64_t>(d * 100 + h * 10 + mem));
      auto cfg = tiny_config(d, h, mem);
      auto conv_rel = make_attention_params<double>(AttentionVariant::rcmha, cfg);
      init_attention_params(conv_rel, rng);
      auto plain_rel = strip_dwc(conv_rel);
      auto x = testutil::random_tensor<double>({2, 4, d}, rng);
      auto memory = testutil::random_tensor<double>({2, mem > 0 ? mem : 1, d}, rng);
      const Tensor<double>* mem_ptr = mem > 0 ? &memory : nullptr;
      Rng r1(1), r2(1);
      auto a = attention_forward<double>(nullptr, AttentionVariant::rcmha, cfg, conv_rel, x,
                                         mem_ptr, r1, false);
      auto b = attention_forward<double>(nullptr, AttentionVariant::rmha, cfg, plain_rel, x,
                                         mem_ptr, r2, false);
      EXPECT_LE(testutil::max_abs_diff(a.y, b.y), 1e-12);

      auto conv_abs = make_attention_params<double>(AttentionVariant::mdha, cfg);
      init_attention_params(conv_abs, rng);
      auto plain_abs = strip_dwc(conv_abs);
      auto c = attention_forward<double>(nullptr, AttentionVariant::mdha, cfg, conv_abs, x,
                                         mem_ptr, r1, false);
      auto e = attention_forward<double>(nullptr, AttentionVariant::mha, cfg, plain_abs, x,
                                         mem_ptr, r2, false);
      EXPECT_LE(testutil::max_abs_diff(c.y, e.y), 1e-12);
    }
  }
}

TEST(AttentionForward, CausalityExact) {
  for (auto variant : {AttentionVariant::mha, AttentionVariant::mdha, AttentionVariant::rmha,
                       AttentionVariant::rcmha}) {
    Rng rng(77);
    auto cfg = tiny_config(8, 2, 3);
    auto params = make_attention_params<double>(variant, cfg);
    init_attention_params(params, rng);
    // non-delta kernels so the convolution path is actually exercised
    if (params.proj.has_dwc()) {
      for (auto* k : {&params.proj.dwc_q, &params.proj.dwc_k, &params.proj.dwc_v})
        for (std::int64_t i = 0; i < k->numel(); ++i) k->ptr()[i] = rng.uniform(-0.5, 0.5);
    }
    auto memory = testutil::random_tensor<double>({1, 3, 8}, rng);
    auto x = testutil::random_tensor<double>({1, 6, 8}, rng);
    Rng r0(5);
    auto y0 = attention_forward<double>(nullptr, variant, cfg, params, x, &memory, r0, false);
    for (std::int64_t t = 0; t < 5; ++t) {
      auto xp = clone_values(x);
      for (std::int64_t s = t + 1; s < 6; ++s)
        for (std::int64_t c = 0; c < 8; ++c) xp.ptr()[s * 8 + c] += rng.uniform(0.5, 1.5);
      Rng r1(5);
      auto y1 = attention_forward<double>(nullptr, variant, cfg, params, xp, &memory, r1, false);
      for (std::int64_t s = 0; s <= t; ++s)
        for (std::int64_t c = 0; c < 8; ++c)
          ASSERT_EQ(y1.y.ptr()[s * 8 + c], y0.y.ptr()[s * 8 + c])
              << variant_name(variant) << " t=" << t << " s=" << s;
    }
  }
}

TEST(AttentionForward, WeightRowsAreDistributions) {
  for (auto variant : {AttentionVariant::mha, AttentionVariant::rcmha}) {
    Rng rng(78);
    auto cfg = tiny_config(8, 2, 2);
    auto params = make_attention_params<double>(variant, cfg);
    init_attention_params(params, rng);
    auto memory = testutil::random_tensor<double>({2, 2, 8}, rng);
    auto x = testutil::random_tensor<double>({2, 4, 8}, rng);
    Rng r(6);
    auto out = attention_forward<double>(nullptr, variant, cfg, params, x, &memory, r, false);
    ASSERT_EQ(out.weights.shape, (Shape{2, 2, 4, 6}));
    for (std::int64_t row = 0; row < 2 * 2 * 4; ++row) {
      double sum = 0;
      const std::int64_t i = row % 4;
      for (std::int64_t j = 0; j < 6; ++j) {
        const double w = out.weights.ptr()[row * 6 + j];
        EXPECT_GE(w, 0.0);
        if (j > 2 + i) EXPECT_EQ(w, 0.0);  // future: exactly zero
        sum += w;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(AttentionForward, SingleHeadMatchesDirectComputation) {
  Rng rng(79);
  auto cfg = tiny_config(6, 1, 0);
  auto params = make_attention_params<double>(AttentionVariant::mha, cfg);
  init_attention_params(params, rng);
  auto x = testutil::random_tensor<double>({2, 4, 6}, rng);
  Rng r(7);
  auto out = attention_forward<double>(nullptr, AttentionVariant::mha, cfg, params, x, nullptr, r,
                                       false);
  // direct single-head pipeline on unsplit tensors
  auto flat = reshape<double>(nullptr, x, {8, 6});
  auto q = reshape<double>(nullptr, matmul<double>(nullptr, flat, params.proj.w_q), {2, 4, 6});
  auto k = reshape<double>(nullptr, matmul<double>(nullptr, flat, params.proj.w_k), {2, 4, 6});
  auto v = reshape<double>(nullptr, matmul<double>(nullptr, flat, params.proj.w_v), {2, 4, 6});
  auto scores = scale<double>(nullptr, matmul_nt<double>(nullptr, q, k), 1.0 / std::sqrt(6.0));
  Mask m = causal_mask(4, 4);
  auto w = softmax_rows<double>(nullptr, scores, &m);
  auto ctx = matmul<double>(nullptr, w, v);
  auto y = reshape<double>(
      nullptr, matmul<double>(nullptr, reshape<double>(nullptr, ctx, {8, 6}), params.proj.w_o),
      {2, 4, 6});
  for (std::int64_t i = 0; i < y.numel(); ++i) ASSERT_EQ(out.y.ptr()[i], y.ptr()[i]);
}

TEST(AttentionForward, VariantParamMismatchIsError) {
  Rng rng(80);
  auto cfg = tiny_config(8, 2, 0);
  auto rel_params = make_attention_params<double>(AttentionVariant::rmha, cfg);
  init_attention_params(rel_params, rng);
  auto x = make_tensor<double>({1, 2, 8});
  Rng r(8);
  EXPECT_THROW(attention_forward<double>(nullptr, AttentionVariant::rcmha, cfg, rel_params, x,
                                         nullptr, r, false),
               ValueError);
  EXPECT_THROW(attention_forward<double>(nullptr, AttentionVariant::mha, cfg, rel_params, x,
                                         nullptr, r, false),
               ValueError);
}

TEST(AttentionForward, MemoryWidthMismatchIsError) {
  Rng rng(81);
  auto cfg = tiny_config(8, 2, 2);
  auto params = make_attention_params<double>(AttentionVariant::mha, cfg);
  init_attention_params(params, rng);
  auto x = make_tensor<double>({1, 2, 8});
  auto memory = make_tensor<double>({1, 2, 4});
  Rng r(9);
  EXPECT_THROW(attention_forward<double>(nullptr, AttentionVariant::mha, cfg, params, x, &memory,
                                         r, false),
               ShapeError);
}

TEST(AttentionForward, GradCheckAllVariants) {
  for (auto variant : {AttentionVariant::mha, AttentionVariant::mdha, AttentionVariant::rmha,
                       AttentionVariant::rcmha}) {
    for (std::int64_t mem : {0L, 2L}) {
      Rng rng(200 + static_cast<std::uint64_t>(mem));
      auto cfg = tiny_config(4, 2, mem);
      auto params = make_attention_params<double>(variant, cfg);
      init_attention_params(params, rng);
      if (params.proj.has_dwc()) {  // perturb off the delta point
        for (auto* k : {&params.proj.dwc_q, &params.proj.dwc_k, &params.proj.dwc_v})
          for (std::int64_t i = 0; i < k->numel(); ++i) k->ptr()[i] += rng.uniform(-0.3, 0.3);
      }
      Tape<double> setup;
      auto x = make_param<double>(setup, {2, 3, 4});
      for (std::int64_t i = 0; i < x.numel(); ++i) x.ptr()[i] = rng.uniform(-1, 1);
      auto memory = testutil::random_tensor<double>({2, mem > 0 ? mem : 1, 4}, rng);
      const Tensor<double>* mem_ptr = mem > 0 ? &memory : nullptr;
      Rng proj_rng(300);
      auto proj = testutil::random_tensor<double>({2, 3, 4}, proj_rng);

      std::vector<ParamRef<double>> refs;
      params.collect(refs, variant_name(variant));
      refs.push_back({"x", &x});
      auto rep = gradcheck<double>(
          [&](Tape<double>* t) {
            Rng r(1);
            auto out = attention_forward<double>(t, variant, cfg, params, x, mem_ptr, r, false);
            return sum_all(t, mul(t, out.y, proj));
          },
          refs);
      EXPECT_TRUE(rep.pass) << variant_name(variant) << " mem=" << mem
                            << " err=" << rep.max_rel_err;
      EXPECT_LE(rep.max_rel_err, 1e-4);
    }
  }
}

}  // namespace
