#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "attnlab/ops.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass = true;

  void merge(const GradCheckReport& other) {
    entries.insert(entries.end(), other.entries.begin(), other.entries.end());
    max_rel_err = std::max(max_rel_err, other.max_rel_err);
    pass = pass && other.pass;
  }
};

// Named reference to a leaf parameter checked or updated in place.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

// Relative error with an absolute floor: |a-n| / max(|a|,|n|,1). For
// gradients of magnitude >= 1 this is true relative error; below 1 it
// degrades to absolute error, which keeps finite-difference noise on
// near-zero entries from dominating the report.
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference comparison per scalar parameter entry. `f` must build
// the scalar loss from the parameters' current values; it is called with a
// tape for the analytic pass and with nullptr for value-only evaluations, so
// it must be deterministic across calls (fixed rng seeds, dropout off or a
// frozen mask). Failures are data in the report, not errors.
template <class T>
GradCheckReport gradcheck(const std::function<Tensor<T>(Tape<T>*)>& f,
                          const std::vector<ParamRef<T>>& params, double eps = 1e-5,
                          double tol = 1e-4) {
  GradCheckReport report;

  for (const auto& p : params) p.tensor->zero_grad();
  Tape<T> tape;
  Tensor<T> loss = f(&tape);
  tape.backward(loss);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    const T* g = p.tensor->gptr();
    analytic.emplace_back(g, g + p.tensor->numel());
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& t = *params[pi].tensor;
    GradCheckEntry entry{params[pi].name, 0.0, true};
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const T saved = t.ptr()[i];
      t.ptr()[i] = saved + static_cast<T>(eps);
      const double f_plus = static_cast<double>(f(nullptr).ptr()[0]);
      t.ptr()[i] = saved - static_cast<T>(eps);
      const double f_minus = static_cast<double>(f(nullptr).ptr()[0]);
      t.ptr()[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double err = grad_rel_err(static_cast<double>(analytic[pi][static_cast<std::size_t>(i)]), numeric);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    entry.pass = entry.max_rel_err <= tol;
    report.entries.push_back(entry);
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
  }
  return report;
}

}  // namespace attnlab
