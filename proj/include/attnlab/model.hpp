#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "attnlab/attention.hpp"
#include "attnlab/ops.hpp"

// Decoder-only carrier: embedding (+ absolute sinusoids for the
// absolute-position variants), n_layers pre-norm blocks of
// {attention variant, FFN with squared ReLU}, segment-recurrence memory,
// final norm and output projection.

namespace attnlab {

struct ModelConfig {
  std::int64_t vocab_size = 0;
  std::int64_t n_layers = 4;
  std::int64_t d_model = 0;
  std::int64_t heads = 0;
  double p_drop = 0.0;
  std::int64_t d_ff = 0;     // 0 -> 4*d_model
  std::int64_t seg_len = 0;
  std::int64_t mem_len = -1; // -1 -> seg_len
  AttentionVariant variant = AttentionVariant::rcmha;

  void finalize() {
    if (d_ff == 0) d_ff = 4 * d_model;
    if (mem_len < 0) mem_len = seg_len;
  }

  void validate() const {
    if (vocab_size <= 0 || n_layers <= 0 || d_model <= 0 || heads <= 0 || d_ff <= 0 ||
        seg_len <= 0)
      throw ValueError("ModelConfig: all extents must be positive");
    if (d_model % heads != 0)
      throw ValueError("ModelConfig: d_model " + std::to_string(d_model) +
                       " not divisible by heads " + std::to_string(heads));
    if (mem_len < 0) throw ValueError("ModelConfig: mem_len must be >= 0");
    if (p_drop < 0.0 || p_drop >= 1.0) throw ValueError("ModelConfig: p_drop must be in [0,1)");
  }

  AttentionConfig attention_config() const {
    AttentionConfig a;
    a.d_model = d_model;
    a.heads = heads;
    a.p_drop = p_drop;
    a.mem_len = mem_len;
    return a;
  }
};

// Per-layer cached hidden states, detached from the graph: plain value
// tensors with no grad buffers, so segment-2 losses cannot reach segment-1
// activations.
template <class T>
struct MemoryState {
  std::vector<Tensor<T>> layers;

  bool has(std::size_t layer) const {
    return layer < layers.size() && layers[layer].defined() && layers[layer].shape[1] > 0;
  }
};

template <class T>
struct BlockParams {
  AttentionParams<T> attn;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    attn.collect(out, prefix + ".attn");
    out.push_back({prefix + ".ln1_g", &ln1_g});
    out.push_back({prefix + ".ln1_b", &ln1_b});
    out.push_back({prefix + ".ln2_g", &ln2_g});
    out.push_back({prefix + ".ln2_b", &ln2_b});
    out.push_back({prefix + ".w1", &w1});
    out.push_back({prefix + ".b1", &b1});
    out.push_back({prefix + ".w2", &w2});
    out.push_back({prefix + ".b2", &b2});
  }
};

template <class T>
struct ModelParams {
  Tensor<T> embedding;
  std::vector<BlockParams<T>> blocks;
  Tensor<T> ln_f_g, ln_f_b;
  Tensor<T> w_head, b_head;

  std::vector<ParamRef<T>> collect() {
    std::vector<ParamRef<T>> out;
    out.push_back({"embedding", &embedding});
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, "block" + std::to_string(i));
    out.push_back({"ln_f_g", &ln_f_g});
    out.push_back({"ln_f_b", &ln_f_b});
    out.push_back({"w_head", &w_head});
    out.push_back({"b_head", &b_head});
    return out;
  }
};

// --- construction / initialization ------------------------------------------------

template <class T>
ModelParams<T> make_model_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<T> p;
  const std::int64_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  p.embedding = make_leaf<T>({v, d});
  p.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& blk : p.blocks) {
    blk.attn = make_attention_params<T>(cfg.variant, cfg.attention_config());
    blk.ln1_g = make_leaf<T>({d});
    blk.ln1_b = make_leaf<T>({d});
    blk.ln2_g = make_leaf<T>({d});
    blk.ln2_b = make_leaf<T>({d});
    blk.w1 = make_leaf<T>({d, f});
    blk.b1 = make_leaf<T>({f});
    blk.w2 = make_leaf<T>({f, d});
    blk.b2 = make_leaf<T>({d});
  }
  p.ln_f_g = make_leaf<T>({d});
  p.ln_f_b = make_leaf<T>({d});
  p.w_head = make_leaf<T>({d, v});
  p.b_head = make_leaf<T>({v});
  return p;
}

// Glorot-uniform projections, normal(0, 0.02) embeddings, ones for norm
// gains, zeros for biases/u/v, delta dwc kernels. Fill order is fixed, so a
// given seed always produces the same parameters.
template <class T>
void init_params(ModelParams<T>& p, Rng& rng) {
  for (std::int64_t i = 0; i < p.embedding.numel(); ++i)
    p.embedding.ptr()[i] = static_cast<T>(rng.normal(0.0, 0.02));
  for (auto& blk : p.blocks) {
    init_attention_params(blk.attn, rng);
    blk.ln1_g.fill(T{1});
    blk.ln1_b.fill(T{0});
    blk.ln2_g.fill(T{1});
    blk.ln2_b.fill(T{0});
    init_glorot(blk.w1, rng);
    blk.b1.fill(T{0});
    init_glorot(blk.w2, rng);
    blk.b2.fill(T{0});
  }
  p.ln_f_g.fill(T{1});
  p.ln_f_b.fill(T{0});
  init_glorot(p.w_head, rng);
  p.b_head.fill(T{0});
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  ModelParams<T> p = make_model_params<T>(cfg);
  init_params(p, rng);
  return p;
}

// --- parameter accounting ------------------------------------------------------------

// Exact count by enumerating every tensor.
template <class T>
std::int64_t param_count(ModelParams<T>& params) {
  std::int64_t n = 0;
  for (const auto& ref : params.collect()) n += ref.tensor->numel();
  return n;
}

// Closed form of the same count:
//   embedding V*d
//   per block: 4*d^2 projections (+9*d dwc kernels) (+d^2+2d relative),
//              4*d norm affines, d*f+f+f*d+d FFN
//   final norm 2d, head d*V+V.
inline std::int64_t param_count_formula(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  std::int64_t block = 4 * d * d + 4 * d + d * f + f + f * d + d;
  if (uses_dwc(cfg.variant)) block += 9 * d;
  if (uses_relative(cfg.variant)) block += d * d + 2 * d;
  return v * d + cfg.n_layers * block + 2 * d + d * v + v;
}

// --- forward -----------------------------------------------------------------------------

// W2.squared_relu(W1.x + b1) + b2, dropout on the output when training.
template <class T>
Tensor<T> ffn_forward(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                      const Tensor<T>& w2, const Tensor<T>& b2, double p_drop, Rng& rng,
                      bool training) {
  if (x.rank() != 3 || x.shape[2] != w1.shape[0] || w1.shape[1] != w2.shape[0] ||
      w2.shape[1] != x.shape[2])
    throw ShapeError("ffn_forward: x " + shape_str(x.shape) + ", w1 " + shape_str(w1.shape) +
                     ", w2 " + shape_str(w2.shape));
  const std::int64_t rows = x.shape[0] * x.shape[1];
  auto flat = reshape(tape, x, {rows, x.shape[2]});
  auto hidden = squared_relu(tape, add_bias(tape, matmul(tape, flat, w1), b1));
  auto out = add_bias(tape, matmul(tape, hidden, w2), b2);
  return dropout(tape, reshape(tape, out, x.shape), p_drop, rng, training);
}

// Pre-norm residual block: x + attn(norm1(x), norm1(mem)), then h + ffn(norm2(h)).
// The cached memory slice is normalized with the same norm1 affine before
// projection, matching how the current segment is treated.
template <class T>
Tensor<T> block_forward(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>* memory,
                        BlockParams<T>& blk, AttentionVariant variant, const AttentionConfig& cfg,
                        Rng& rng, bool training) {
  auto x_n = layer_norm(tape, x, blk.ln1_g, blk.ln1_b);
  Tensor<T> mem_n;
  const bool has_mem = memory && memory->defined() && memory->shape[1] > 0;
  if (has_mem) mem_n = layer_norm(tape, *memory, blk.ln1_g, blk.ln1_b);
  auto attn = attention_forward(tape, variant, cfg, blk.attn, x_n, has_mem ? &mem_n : nullptr,
                                rng, training);
  auto h = add(tape, x, attn.y);
  auto f = ffn_forward(tape, layer_norm(tape, h, blk.ln2_g, blk.ln2_b), blk.w1, blk.b1, blk.w2,
                       blk.b2, cfg.p_drop, rng, training);
  return add(tape, h, f);
}

namespace detail {

// Last mem_len rows of [old || current] per batch lane, copied off-graph.
template <class T>
Tensor<T> detached_memory_rows(const Tensor<T>* old_mem, const Tensor<T>& current,
                               std::int64_t mem_len) {
  const std::int64_t b = current.shape[0], l = current.shape[1], d = current.shape[2];
  const std::int64_t m_old = (old_mem && old_mem->defined()) ? old_mem->shape[1] : 0;
  const std::int64_t keep = std::min(mem_len, m_old + l);
  Tensor<T> out = make_tensor<T>({b, keep, d});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t r = 0; r < keep; ++r) {
      // position r counts from the end: r=0 is the oldest kept row
      const std::int64_t pos = (m_old + l) - keep + r;
      const T* src = pos < m_old ? old_mem->ptr() + (bi * m_old + pos) * d
                                 : current.ptr() + (bi * l + (pos - m_old)) * d;
      std::copy(src, src + d, out.ptr() + (bi * keep + r) * d);
    }
  return out;
}

}  // namespace detail

template <class T>
struct ModelOutput {
  Tensor<T> logits;          // [B, L, vocab]
  MemoryState<T> new_memory;
};

// Embed (+ absolute sinusoids for MHA/MDHA), run the blocks threading each
// layer's memory slice, final norm, project to vocabulary logits. The new
// memory holds the last mem_len input hidden states of every layer, detached.
template <class T>
ModelOutput<T> model_forward(Tape<T>* tape, const IntTensor& tokens, const MemoryState<T>& memory,
                             ModelParams<T>& params, const ModelConfig& cfg, Rng& rng,
                             bool training) {
  cfg.validate();
  if (tokens.shape.size() != 2)
    throw ShapeError("model_forward: tokens must be [B,L], got " + shape_str(tokens.shape));
  const std::int64_t l = tokens.shape[1];
  if (l > cfg.seg_len)
    throw ValueError("model_forward: segment length " + std::to_string(l) + " exceeds seg_len " +
                     std::to_string(cfg.seg_len));
  if (!memory.layers.empty() && memory.layers.size() != static_cast<std::size_t>(cfg.n_layers))
    throw ShapeError("model_forward: memory has " + std::to_string(memory.layers.size()) +
                     " layers, model has " + std::to_string(cfg.n_layers));

  auto h = embedding_lookup(tape, params.embedding, tokens);
  if (!uses_relative(cfg.variant))
    h = add_rows(tape, h, sinusoid_positions<T>(l, cfg.d_model));

  const AttentionConfig acfg = cfg.attention_config();
  ModelOutput<T> out;
  out.new_memory.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (std::size_t layer = 0; layer < params.blocks.size(); ++layer) {
    const Tensor<T>* mem_l = memory.has(layer) ? &memory.layers[layer] : nullptr;
    if (cfg.mem_len > 0)
      out.new_memory.layers[layer] = detail::detached_memory_rows(mem_l, h, cfg.mem_len);
    h = block_forward(tape, h, mem_l, params.blocks[layer], cfg.variant, acfg, rng, training);
  }
  h = layer_norm(tape, h, params.ln_f_g, params.ln_f_b);
  auto flat = reshape(tape, h, {h.shape[0] * l, cfg.d_model});
  auto logits = add_bias(tape, matmul(tape, flat, params.w_head), params.b_head);
  out.logits = reshape(tape, logits, {h.shape[0], l, cfg.vocab_size});
  return out;
}

// --- checkpoint --------------------------------------------------------------------------

// <base>.bin: every parameter's values as little-endian 32-bit floats,
// concatenated in enumeration order. <base>.manifest: one "name=extents"
// line per parameter in the same order. Round-trips bit-exactly for float
// parameters; double parameters are narrowed to f32 on save.
template <class T>
void save_checkpoint(ModelParams<T>& params, const std::string& base) {
  auto refs = params.collect();
  std::ofstream bin(base + ".bin", std::ios::binary | std::ios::trunc);
  std::ofstream manifest(base + ".manifest", std::ios::trunc);
  if (!bin || !manifest) throw IoError("save_checkpoint: cannot open " + base + ".{bin,manifest}");
  for (const auto& ref : refs) {
    manifest << ref.name << "=";
    for (std::size_t i = 0; i < ref.tensor->shape.size(); ++i)
      manifest << (i ? "," : "") << ref.tensor->shape[i];
    manifest << "\n";
    for (std::int64_t i = 0; i < ref.tensor->numel(); ++i) {
      const float v = static_cast<float>(ref.tensor->ptr()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      const unsigned char le[4] = {static_cast<unsigned char>(bits & 0xff),
                                   static_cast<unsigned char>((bits >> 8) & 0xff),
                                   static_cast<unsigned char>((bits >> 16) & 0xff),
                                   static_cast<unsigned char>((bits >> 24) & 0xff)};
      bin.write(reinterpret_cast<const char*>(le), 4);
    }
  }
  if (!bin || !manifest) throw IoError("save_checkpoint: write failed for " + base);
}

template <class T>
void load_checkpoint(ModelParams<T>& params, const std::string& base) {
  auto refs = params.collect();
  std::ifstream bin(base + ".bin", std::ios::binary);
  std::ifstream manifest(base + ".manifest");
  if (!bin || !manifest) throw IoError("load_checkpoint: cannot open " + base + ".{bin,manifest}");
  for (const auto& ref : refs) {
    std::string line;
    if (!std::getline(manifest, line))
      throw IoError("load_checkpoint: manifest ends before " + ref.name);
    std::string expect = ref.name + "=";
    for (std::size_t i = 0; i < ref.tensor->shape.size(); ++i)
      expect += (i ? "," : "") + std::to_string(ref.tensor->shape[i]);
    if (line != expect)
      throw IoError("load_checkpoint: manifest line '" + line + "' does not match '" + expect +
                    "'");
    for (std::int64_t i = 0; i < ref.tensor->numel(); ++i) {
      unsigned char le[4];
      if (!bin.read(reinterpret_cast<char*>(le), 4))
        throw IoError("load_checkpoint: truncated buffer at " + ref.name);
      const std::uint32_t bits = static_cast<std::uint32_t>(le[0]) |
                                 (static_cast<std::uint32_t>(le[1]) << 8) |
                                 (static_cast<std::uint32_t>(le[2]) << 16) |
                                 (static_cast<std::uint32_t>(le[3]) << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      ref.tensor->ptr()[i] = static_cast<T>(v);
    }
  }
}

}  // namespace attnlab
