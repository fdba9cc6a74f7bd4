#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attnlab/errors.hpp"
#include "attnlab/meter.hpp"

namespace attnlab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape_positive(const Shape& s) {
  for (auto e : s)
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
}

// Metered flat storage. All tensor payloads (float, double, int, byte masks)
// go through Buffer so MemoryMeter sees every live tensor byte. Buffers are
// zero-filled unless the caller promises to overwrite every element
// (Uninitialized; op outputs use it).
struct Uninitialized {};

template <class T>
class Buffer {
 public:
  explicit Buffer(std::int64_t n) : n_(n), v_(new T[static_cast<std::size_t>(n)]()) {
    MemoryMeter::add(n * static_cast<std::int64_t>(sizeof(T)));
  }
  Buffer(std::int64_t n, Uninitialized) : n_(n), v_(new T[static_cast<std::size_t>(n)]) {
    MemoryMeter::add(n * static_cast<std::int64_t>(sizeof(T)));
  }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;
  ~Buffer() { MemoryMeter::sub(n_ * static_cast<std::int64_t>(sizeof(T))); }

  T* data() { return v_.get(); }
  const T* data() const { return v_.get(); }
  std::int64_t size() const { return n_; }

 private:
  std::int64_t n_;
  std::unique_ptr<T[]> v_;
};

// Dense n-dimensional array participating in a reverse-mode graph.
// `data` is always present; `grad` is present iff the tensor is on some
// tape's graph (parameters, and everything computed from them under a tape).
// `id` identifies the node in the differentiation graph; -1 means off-graph.
template <class T>
struct Tensor {
  Shape shape;
  std::shared_ptr<Buffer<T>> data;
  std::shared_ptr<Buffer<T>> grad;
  std::int64_t id = -1;

  Tensor() = default;
  Tensor(Shape s, std::shared_ptr<Buffer<T>> d, std::shared_ptr<Buffer<T>> g = nullptr,
         std::int64_t node_id = -1)
      : shape(std::move(s)), data(std::move(d)), grad(std::move(g)), id(node_id) {}

  std::int64_t numel() const { return shape_numel(shape); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  bool defined() const { return data != nullptr; }
  bool on_graph() const { return grad != nullptr; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T* gptr() { return grad->data(); }
  const T* gptr() const { return grad->data(); }

  T& at(std::int64_t i) { return data->data()[i]; }
  const T& at(std::int64_t i) const { return data->data()[i]; }

  void fill(T v) {
    T* p = ptr();
    for (std::int64_t i = 0, n = numel(); i < n; ++i) p[i] = v;
  }

  void zero_grad() {
    if (!grad) return;
    T* g = gptr();
    for (std::int64_t i = 0, n = numel(); i < n; ++i) g[i] = T{0};
  }
};

// Integer tensor (token ids, class targets). Not differentiable.
struct IntTensor {
  Shape shape;
  std::shared_ptr<Buffer<std::int32_t>> data;

  IntTensor() = default;
  explicit IntTensor(Shape s) : shape(std::move(s)) {
    check_shape_positive(shape);
    data = std::make_shared<Buffer<std::int32_t>>(shape_numel(shape));
  }

  std::int64_t numel() const { return shape_numel(shape); }
  std::int32_t* ptr() { return data->data(); }
  const std::int32_t* ptr() const { return data->data(); }
};

// Boolean keep/drop mask. true = position participates, false = masked out.
struct Mask {
  Shape shape;
  std::shared_ptr<Buffer<std::uint8_t>> keep;

  Mask() = default;
  explicit Mask(Shape s) : shape(std::move(s)) {
    check_shape_positive(shape);
    keep = std::make_shared<Buffer<std::uint8_t>>(shape_numel(shape));
  }

  bool defined() const { return keep != nullptr; }
  std::int64_t numel() const { return shape_numel(shape); }
  std::uint8_t* ptr() { return keep->data(); }
  const std::uint8_t* ptr() const { return keep->data(); }
};

// Ordered record of executed differentiable operations. Ops append their
// adjoint step at execution time, so the record is topologically ordered by
// construction; backward() replays it in reverse. Passing a null Tape* to an
// op runs it forward-only (no grad buffers, nothing recorded).
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::int64_t next_id() { return next_id_++; }

  void record(std::function<void()> pull) { steps_.push_back(std::move(pull)); }

  std::size_t size() const { return steps_.size(); }

  void clear() {
    steps_.clear();
    next_id_ = 0;
  }

  // Reverse-order adjoint accumulation from a scalar loss.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape));
    if (!loss.on_graph()) throw ValueError("backward: loss is not on the graph");
    loss.gptr()[0] += T{1};
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  std::int64_t next_id_ = 0;
};

// --- construction helpers -------------------------------------------------

template <class T>
Tensor<T> make_tensor(const Shape& shape) {
  check_shape_positive(shape);
  return Tensor<T>(shape, std::make_shared<Buffer<T>>(shape_numel(shape)));
}

template <class T>
Tensor<T> make_tensor(const Shape& shape, const std::vector<T>& values) {
  Tensor<T> t = make_tensor<T>(shape);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw ShapeError("make_tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  std::copy(values.begin(), values.end(), t.ptr());
  return t;
}

// Leaf parameter: grad buffer allocated (zero) up front, so unused parameters
// report exactly-zero gradients after backward.
template <class T>
Tensor<T> make_param(Tape<T>& tape, const Shape& shape) {
  check_shape_positive(shape);
  const std::int64_t n = shape_numel(shape);
  return Tensor<T>(shape, std::make_shared<Buffer<T>>(n), std::make_shared<Buffer<T>>(n),
                   tape.next_id());
}

// Attach a zeroed grad buffer to an existing value tensor (used when a
// long-lived parameter joins a fresh per-step tape).
template <class T>
void attach_grad(Tape<T>& tape, Tensor<T>& t) {
  if (!t.grad) t.grad = std::make_shared<Buffer<T>>(t.numel());
  if (t.id < 0) t.id = tape.next_id();
}

// Output-tensor helper used by ops: value storage left uninitialized (the op
// writes every element), grad allocated zeroed iff a tape is active and some
// input is on the graph.
template <class T>
Tensor<T> make_output(Tape<T>* tape, const Shape& shape, bool needs_grad) {
  check_shape_positive(shape);
  const std::int64_t n = shape_numel(shape);
  Tensor<T> out(shape, std::make_shared<Buffer<T>>(n, Uninitialized{}));
  if (tape && needs_grad) {
    out.grad = std::make_shared<Buffer<T>>(n);
    out.id = tape->next_id();
  }
  return out;
}

// Deep copy of values only (off-graph).
template <class T>
Tensor<T> clone_values(const Tensor<T>& x) {
  Tensor<T> out = make_tensor<T>(x.shape);
  std::copy(x.ptr(), x.ptr() + x.numel(), out.ptr());
  return out;
}

// NaN/Inf must never propagate silently: every op checks its output. The
// fast path is an integer exponent-mask reduction (all-ones exponent means
// inf or nan); the slow path only runs to locate the offending index.
namespace detail {

inline bool all_finite_fast(const float* p, std::int64_t n) {
  std::uint32_t bad = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint32_t b;
    std::memcpy(&b, p + i, 4);
    bad |= static_cast<std::uint32_t>((b & 0x7f800000u) == 0x7f800000u);
  }
  return bad == 0;
}

inline bool all_finite_fast(const double* p, std::int64_t n) {
  std::uint64_t bad = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint64_t b;
    std::memcpy(&b, p + i, 8);
    bad |= static_cast<std::uint64_t>((b & 0x7ff0000000000000ull) == 0x7ff0000000000000ull);
  }
  return bad == 0;
}

}  // namespace detail

template <class T>
void check_finite(const char* op, const Tensor<T>& t) {
  const T* p = t.ptr();
  const std::int64_t n = t.numel();
  if (detail::all_finite_fast(p, n)) return;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
  }
}

}  // namespace attnlab
