#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "attnlab/meter.hpp"
#include "attnlab/model.hpp"

// Character-level language-model training: corpus ingestion with a
// codepoint-sorted vocabulary, contiguous-lane segment batching (so
// recurrence memory is meaningful), Adam with global-norm clipping, and the
// loss / accuracy / perplexity evaluation loop.

namespace attnlab {

// --- utf-8 -----------------------------------------------------------------

inline std::vector<std::uint32_t> utf8_decode(const std::string& s) {
  std::vector<std::uint32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::uint32_t cp;
    std::size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1f;
      len = 2;
    } else if ((c >> 4) == 0xe) {
      cp = c & 0x0f;
      len = 3;
    } else if ((c >> 3) == 0x1e) {
      cp = c & 0x07;
      len = 4;
    } else {
      throw ValueError("utf8_decode: invalid lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) throw ValueError("utf8_decode: truncated sequence at end of input");
    for (std::size_t k = 1; k < len; ++k) {
      const unsigned char cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2)
        throw ValueError("utf8_decode: invalid continuation byte at offset " +
                         std::to_string(i + k));
      cp = (cp << 6) | (cc & 0x3f);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void utf8_append(std::string& s, std::uint32_t cp) {
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    s.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

// --- dataset -----------------------------------------------------------------

enum class Split { train, valid };

struct Dataset {
  std::vector<std::int32_t> ids;        // corpus encoded as dense vocab ids
  std::vector<std::uint32_t> vocab;     // distinct codepoints, sorted ascending
  double train_frac = 0.9;

  std::int64_t vocab_size() const { return static_cast<std::int64_t>(vocab.size()); }

  std::int32_t encode_char(std::uint32_t cp) const {
    auto it = std::lower_bound(vocab.begin(), vocab.end(), cp);
    if (it == vocab.end() || *it != cp)
      throw IndexError("Dataset: codepoint " + std::to_string(cp) + " not in vocabulary");
    return static_cast<std::int32_t>(it - vocab.begin());
  }

  std::vector<std::int32_t> encode(const std::string& text) const {
    std::vector<std::int32_t> out;
    for (std::uint32_t cp : utf8_decode(text)) out.push_back(encode_char(cp));
    return out;
  }

  std::string decode(const std::vector<std::int32_t>& seq) const {
    std::string out;
    for (std::int32_t id : seq) {
      if (id < 0 || id >= vocab_size())
        throw IndexError("Dataset: id " + std::to_string(id) + " out of vocabulary");
      utf8_append(out, vocab[static_cast<std::size_t>(id)]);
    }
    return out;
  }

  // [begin,end) of `ids` belonging to the split (train gets the first
  // floor(N*train_frac) characters, valid the rest).
  std::pair<std::int64_t, std::int64_t> split_range(Split split) const {
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    const std::int64_t cut = static_cast<std::int64_t>(static_cast<double>(n) * train_frac);
    return split == Split::train ? std::make_pair(std::int64_t{0}, cut) : std::make_pair(cut, n);
  }
};

// Distinct characters sorted by codepoint, ids assigned in order.
inline Dataset build_vocab(const std::string& text) {
  if (text.empty()) throw ValueError("build_vocab: empty corpus");
  Dataset d;
  auto cps = utf8_decode(text);
  d.vocab = cps;
  std::sort(d.vocab.begin(), d.vocab.end());
  d.vocab.erase(std::unique(d.vocab.begin(), d.vocab.end()), d.vocab.end());
  d.ids.reserve(cps.size());
  for (std::uint32_t cp : cps) d.ids.push_back(d.encode_char(cp));
  return d;
}

inline Dataset load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_corpus: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return build_vocab(ss.str());
}

// --- segment batching -----------------------------------------------------------

struct Batch {
  IntTensor inputs;   // [B, seg_len]
  IntTensor targets;  // [B, seg_len], inputs shifted by one
};

// Iterates (input, target) segment pairs. Each batch lane walks its own
// contiguous slice of the split, so segment k continues exactly where
// segment k-1 stopped and carried memory lines up with the text.
class SegmentStream {
 public:
  SegmentStream(const Dataset& data, Split split, std::int64_t batch, std::int64_t seg_len)
      : data_(&data), batch_(batch), seg_len_(seg_len) {
    if (batch <= 0 || seg_len <= 0)
      throw ValueError("SegmentStream: batch and seg_len must be positive");
    auto [begin, end] = data.split_range(split);
    const std::int64_t n = end - begin;
    if (n < batch * (seg_len + 1))
      throw ValueError("SegmentStream: split has " + std::to_string(n) + " characters, needs >= " +
                       std::to_string(batch * (seg_len + 1)));
    begin_ = begin;
    lane_len_ = (n - 1) / batch;
    segments_ = lane_len_ / seg_len;
  }

  std::int64_t segments_per_epoch() const { return segments_; }

  void reset() { cursor_ = 0; }

  std::optional<Batch> next() {
    if (cursor_ >= segments_) return std::nullopt;
    Batch b{IntTensor({batch_, seg_len_}), IntTensor({batch_, seg_len_})};
    for (std::int64_t lane = 0; lane < batch_; ++lane) {
      const std::int64_t base = begin_ + lane * lane_len_ + cursor_ * seg_len_;
      for (std::int64_t t = 0; t < seg_len_; ++t) {
        b.inputs.ptr()[lane * seg_len_ + t] = data_->ids[static_cast<std::size_t>(base + t)];
        b.targets.ptr()[lane * seg_len_ + t] = data_->ids[static_cast<std::size_t>(base + t + 1)];
      }
    }
    ++cursor_;
    return b;
  }

 private:
  const Dataset* data_;
  std::int64_t batch_, seg_len_;
  std::int64_t begin_ = 0, lane_len_ = 0, segments_ = 0, cursor_ = 0;
};

// --- optimizer ----------------------------------------------------------------------

// Per-parameter first/second moment buffers mirroring the parameter shapes.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void init(const std::vector<ParamRef<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<std::size_t>(p.tensor->numel()), T{0});
      v.emplace_back(static_cast<std::size_t>(p.tensor->numel()), T{0});
    }
    step = 0;
  }
};

// Standard bias-corrected Adam update from the gradients currently held by
// the parameter tensors.
template <class T>
void adam_step(const std::vector<ParamRef<T>>& params, AdamState<T>& state) {
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                     " moment buffers for " + std::to_string(params.size()) + " parameters");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& t = *params[i].tensor;
    if (static_cast<std::int64_t>(state.m[i].size()) != t.numel())
      throw ShapeError("adam_step: moment shape mismatch for " + params[i].name);
    const T* g = t.gptr();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      m[j] = static_cast<T>(state.beta1 * m[j] + (1.0 - state.beta1) * g[j]);
      v[j] = static_cast<T>(state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j]);
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      t.ptr()[j] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// Scales gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
template <class T>
double clip_global_norm(const std::vector<ParamRef<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    const T* g = p.tensor->gptr();
    for (std::int64_t j = 0; j < p.tensor->numel(); ++j)
      sq += static_cast<double>(g[j]) * static_cast<double>(g[j]);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      T* g = p.tensor->grad->data();
      for (std::int64_t j = 0; j < p.tensor->numel(); ++j) g[j] *= s;
    }
  }
  return norm;
}

// --- metrics -----------------------------------------------------------------------

// One experiment row. wall_ms is measured time and is the only
// non-deterministic field.
struct MetricsRecord {
  std::int64_t step = 0;
  double loss = 0;
  double accuracy = 0;
  double ppl = 0;
  std::int64_t params = 0;
  std::int64_t peak_mem_bytes = 0;
  std::int64_t wall_ms = 0;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  double ppl = 0;
  std::int64_t positions = 0;
};

// Per-position metrics from a logits block: mean nll of the target under the
// row softmax (natural log), and argmax accuracy with ties broken toward the
// lowest token id.
template <class T>
void accumulate_metrics(const Tensor<T>& logits, const IntTensor& targets, double& nll_sum,
                        std::int64_t& correct, std::int64_t& positions) {
  const std::int64_t v = logits.shape.back();
  const std::int64_t rows = logits.numel() / v;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = logits.ptr() + r * v;
    std::int64_t best = 0;
    T mx = row[0];
    for (std::int64_t i = 1; i < v; ++i)
      if (row[i] > mx) {  // strict: first maximum wins, lowest id on ties
        mx = row[i];
        best = i;
      }
    double lse = 0;
    for (std::int64_t i = 0; i < v; ++i) lse += std::exp(static_cast<double>(row[i] - mx));
    lse = static_cast<double>(mx) + std::log(lse);
    const std::int32_t target = targets.ptr()[r];
    nll_sum += lse - static_cast<double>(row[target]);
    correct += best == target ? 1 : 0;
    positions += 1;
  }
}

// Dropout off, no gradients, recurrence memory threaded across the split's
// segments in order. max_batches = 0 evaluates the whole split.
template <class T>
EvalResult evaluate(ModelParams<T>& params, const ModelConfig& cfg, const Dataset& data,
                    Split split, std::int64_t batch, std::int64_t max_batches = 0) {
  SegmentStream stream(data, split, batch, cfg.seg_len);
  MemoryState<T> memory;
  Rng rng(0);  // never consumed: training=false and dropout off
  double nll = 0;
  std::int64_t correct = 0, positions = 0, batches = 0;
  while (auto b = stream.next()) {
    auto out = model_forward<T>(nullptr, b->inputs, memory, params, cfg, rng, false);
    memory = std::move(out.new_memory);
    accumulate_metrics(out.logits, b->targets, nll, correct, positions);
    if (max_batches > 0 && ++batches >= max_batches) break;
  }
  EvalResult r;
  r.positions = positions;
  r.loss = positions ? nll / static_cast<double>(positions) : 0.0;
  r.accuracy = positions ? static_cast<double>(correct) / static_cast<double>(positions) : 0.0;
  r.ppl = std::exp(r.loss);
  return r;
}

// --- training loop ---------------------------------------------------------------------

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch = 32;
  std::uint64_t seed = 42;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::int64_t eval_interval = 200;
  std::int64_t eval_batches = 8;  // periodic evals; the final eval is full
};

enum class RunStatus { ok, aborted };

template <class T>
struct TrainResult {
  RunStatus status = RunStatus::ok;
  std::string message;
  std::int64_t steps_done = 0;
  std::vector<MetricsRecord> history;
  MetricsRecord final_record;
  std::int64_t peak_mem_bytes = 0;
  std::int64_t avg_mem_bytes = 0;
  std::int64_t wall_ms = 0;
  ModelParams<T> params;
};

// Per-step loop: next segment batch -> forward with carried memory -> loss
// -> backward -> clip -> adam, with periodic validation records. Parameters
// are initialized from cfg.seed; the same seed reproduces the run exactly
// (wall_ms aside). A non-finite loss aborts the run with a diagnostic
// message instead of propagating.
template <class T>
TrainResult<T> train(const ModelConfig& mcfg_in, const TrainConfig& tcfg, const Dataset& data,
                     const std::function<void(const MetricsRecord&)>& on_record = {}) {
  ModelConfig mcfg = mcfg_in;
  mcfg.finalize();
  mcfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&t0]() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                                 t0)
        .count();
  };

  TrainResult<T> result;
  Rng rng(tcfg.seed);
  result.params = init_params<T>(mcfg, rng);
  auto refs = result.params.collect();
  const std::int64_t n_params = param_count(result.params);

  AdamState<T> adam;
  adam.lr = tcfg.lr;
  adam.init(refs);

  SegmentStream stream(data, Split::train, tcfg.batch, mcfg.seg_len);
  MemoryState<T> memory;

  auto emit = [&](std::int64_t step, const EvalResult& ev) {
    MetricsRecord rec;
    rec.step = step;
    rec.loss = ev.loss;
    rec.accuracy = ev.accuracy;
    rec.ppl = ev.ppl;
    rec.params = n_params;
    rec.peak_mem_bytes = MemoryMeter::peak_bytes();
    rec.wall_ms = wall_ms();
    result.history.push_back(rec);
    result.final_record = rec;
    if (on_record) on_record(rec);
  };

  emit(0, evaluate(result.params, mcfg, data, Split::valid, tcfg.batch, tcfg.eval_batches));

  double live_sum = 0;
  for (std::int64_t step = 1; step <= tcfg.steps; ++step) {
    auto batch = stream.next();
    if (!batch) {  // epoch wrap: lanes restart, so cached memory is stale
      stream.reset();
      memory = MemoryState<T>{};
      batch = stream.next();
    }
    try {
      Tape<T> tape;
      auto out = model_forward<T>(&tape, batch->inputs, memory, result.params, mcfg, rng, true);
      memory = std::move(out.new_memory);
      auto flat = reshape(&tape, out.logits, {batch->inputs.numel(), mcfg.vocab_size});
      IntTensor flat_targets = batch->targets;
      flat_targets.shape = {batch->targets.numel()};
      auto loss = cross_entropy(&tape, flat, flat_targets);
      for (auto& ref : refs) ref.tensor->zero_grad();
      tape.backward(loss);
      live_sum += static_cast<double>(MemoryMeter::live_bytes());
      clip_global_norm(refs, tcfg.clip_norm);
      adam_step(refs, adam);
    } catch (const NumericError& e) {
      result.status = RunStatus::aborted;
      result.message = "step " + std::to_string(step) + ": " + e.what();
      result.steps_done = step - 1;
      break;
    }
    result.steps_done = step;
    const bool last = step == tcfg.steps;
    if (last || (tcfg.eval_interval > 0 && step % tcfg.eval_interval == 0))
      emit(step, evaluate(result.params, mcfg, data, Split::valid, tcfg.batch,
                          last ? 0 : tcfg.eval_batches));
  }

  result.peak_mem_bytes = MemoryMeter::peak_bytes();
  result.avg_mem_bytes = result.steps_done
                             ? static_cast<std::int64_t>(live_sum / static_cast<double>(result.steps_done))
                             : 0;
  result.wall_ms = wall_ms();
  return result;
}

}  // namespace attnlab
