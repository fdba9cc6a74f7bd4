#pragma once

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attnlab/training.hpp"

// Experiment harness: the eight-variation grid plus the four-module
// comparison set, run strictly sequentially with the memory meter reset
// between runs, reported as per-run JSONL histories, a summary CSV and
// plot-ready JSON.

namespace attnlab {

struct RunSpec {
  std::string code;
  AttentionVariant variant = AttentionVariant::rcmha;
  std::int64_t d_model = 128;
  std::int64_t heads = 4;
  double p_drop = 0.0;
  std::int64_t n_layers = 2;
  std::int64_t seg_len = 64;
  std::int64_t mem_len = 64;
  std::int64_t steps = 2000;
  std::int64_t batch = 32;
  std::uint64_t seed = 42;

  ModelConfig model_config(std::int64_t vocab_size) const {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.n_layers = n_layers;
    cfg.d_model = d_model;
    cfg.heads = heads;
    cfg.p_drop = p_drop;
    cfg.seg_len = seg_len;
    cfg.mem_len = mem_len;
    cfg.variant = variant;
    cfg.finalize();
    return cfg;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.steps = steps;
    t.batch = batch;
    t.seed = seed;
    return t;
  }
};

struct ExperimentSpec {
  std::vector<RunSpec> runs;
};

// The eight grid variations (d_model, heads, p_drop) plus the four-module
// comparison set at the best variation's parameters (d=128, 4 heads, no
// dropout), all at desk-scale step/layer defaults.
inline ExperimentSpec default_grid() {
  ExperimentSpec spec;
  const struct {
    const char* code;
    std::int64_t d, h;
    double p;
  } variations[] = {{"A", 128, 4, 0.0}, {"B", 128, 8, 0.0}, {"C", 256, 4, 0.0},
                    {"D", 256, 8, 0.0}, {"E", 256, 8, 0.1}, {"F", 512, 4, 0.0},
                    {"G", 512, 8, 0.0}, {"H", 512, 8, 0.1}};
  for (const auto& v : variations) {
    RunSpec r;
    r.code = v.code;
    r.variant = AttentionVariant::rcmha;
    r.d_model = v.d;
    r.heads = v.h;
    r.p_drop = v.p;
    spec.runs.push_back(r);
  }
  for (auto variant : {AttentionVariant::mha, AttentionVariant::mdha, AttentionVariant::rmha,
                       AttentionVariant::rcmha}) {
    RunSpec r;
    r.code = variant_name(variant);
    r.variant = variant;
    spec.runs.push_back(r);
  }
  return spec;
}

// The four-module comparison subset.
inline ExperimentSpec comparison_set() {
  ExperimentSpec all = default_grid();
  ExperimentSpec out;
  for (auto& r : all.runs)
    if (r.code == "MHA" || r.code == "MDHA" || r.code == "RMHA" || r.code == "RCMHA")
      out.runs.push_back(r);
  return out;
}

inline void scale_d_model(ExperimentSpec& spec, std::int64_t divisor) {
  if (divisor <= 0) throw ValueError("scale_d_model: divisor must be positive");
  for (auto& r : spec.runs) {
    if (r.d_model % divisor != 0 || (r.d_model / divisor) % r.heads != 0)
      throw ValueError("scale_d_model: run " + r.code + " cannot scale d_model " +
                       std::to_string(r.d_model) + " by " + std::to_string(divisor));
    r.d_model /= divisor;
  }
}

struct RunResult {
  RunSpec spec;
  RunStatus status = RunStatus::ok;
  std::string message;
  std::vector<MetricsRecord> history;
  MetricsRecord final_record;
  std::int64_t avg_mem_bytes = 0;
  std::string history_path;
};

inline nlohmann::ordered_json record_json(const MetricsRecord& rec) {
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  j["loss"] = rec.loss;
  j["accuracy"] = rec.accuracy;
  j["ppl"] = rec.ppl;
  j["params"] = rec.params;
  j["peak_mem_bytes"] = rec.peak_mem_bytes;
  j["wall_ms"] = rec.wall_ms;
  return j;
}

namespace detail {

inline std::string format_sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace detail

// summary.csv with the pinned column schema, rows in spec order. All values
// are deterministic for fixed seeds; measured timing lives in the JSONL
// histories, so the CSV's wall_ms column is written as 0.
inline void write_summary_csv(const std::vector<RunResult>& results, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_summary_csv: cannot open " + path);
  out << "code,train_steps,ppl,accuracy,loss,params,peak_mem_bytes,avg_mem_bytes,wall_ms\n";
  for (const auto& r : results) {
    const auto& rec = r.final_record;
    out << r.spec.code << ',' << rec.step << ',' << detail::format_sig6(rec.ppl) << ','
        << detail::format_sig6(rec.accuracy) << ',' << detail::format_sig6(rec.loss) << ','
        << rec.params << ',' << rec.peak_mem_bytes << ',' << r.avg_mem_bytes << ",0\n";
  }
  if (!out) throw IoError("write_summary_csv: write failed for " + path);
}

inline void write_plotdata(const std::vector<RunResult>& results, const std::string& path) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json series;
    series["steps"] = nlohmann::ordered_json::array();
    series["loss"] = nlohmann::ordered_json::array();
    series["accuracy"] = nlohmann::ordered_json::array();
    series["ppl"] = nlohmann::ordered_json::array();
    series["peak_mem_bytes"] = nlohmann::ordered_json::array();
    for (const auto& rec : r.history) {
      series["steps"].push_back(rec.step);
      series["loss"].push_back(rec.loss);
      series["accuracy"].push_back(rec.accuracy);
      series["ppl"].push_back(rec.ppl);
      series["peak_mem_bytes"].push_back(rec.peak_mem_bytes);
    }
    arr.push_back({{"code", r.spec.code}, {"series", series}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_plotdata: cannot open " + path);
  out << arr.dump(2) << "\n";
}

inline void emit_reports(const std::vector<RunResult>& results, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_summary_csv(results, out_dir + "/summary.csv");
  write_plotdata(results, out_dir + "/plotdata.json");
}

// Runs execute strictly sequentially; the memory meter is reset before each
// run so reported peaks are independent of grid order. A failed run is
// recorded as aborted and the grid continues.
template <class T>
std::vector<RunResult> run_experiments(const ExperimentSpec& spec, const Dataset& data,
                                       const std::string& out_dir,
                                       bool progress_to_stderr = false) {
  std::filesystem::create_directories(out_dir);
  std::vector<RunResult> results;
  for (const auto& run : spec.runs) {
    RunResult result;
    result.spec = run;
    result.history_path = out_dir + "/" + run.code + ".jsonl";
    std::ofstream jsonl(result.history_path, std::ios::trunc);
    if (progress_to_stderr)
      std::fprintf(stderr, "[bench] %s: %s d=%lld h=%lld p=%.2f steps=%lld seed=%llu\n",
                   run.code.c_str(), variant_name(run.variant).c_str(),
                   static_cast<long long>(run.d_model), static_cast<long long>(run.heads),
                   run.p_drop, static_cast<long long>(run.steps),
                   static_cast<unsigned long long>(run.seed));
    MemoryMeter::reset();
    try {
      auto trained = train<T>(run.model_config(data.vocab_size()), run.train_config(), data,
                              [&](const MetricsRecord& rec) {
                                jsonl << record_json(rec).dump() << "\n";
                                jsonl.flush();
                              });
      result.status = trained.status;
      result.message = trained.message;
      result.history = std::move(trained.history);
      result.final_record = trained.final_record;
      result.avg_mem_bytes = trained.avg_mem_bytes;
    } catch (const Error& e) {
      result.status = RunStatus::aborted;
      result.message = e.what();
    }
    if (progress_to_stderr && result.status == RunStatus::ok)
      std::fprintf(stderr, "[bench] %s: loss %.4f acc %.4f ppl %.3f peak %lld bytes\n",
                   run.code.c_str(), result.final_record.loss, result.final_record.accuracy,
                   result.final_record.ppl,
                   static_cast<long long>(result.final_record.peak_mem_bytes));
    if (progress_to_stderr && result.status != RunStatus::ok)
      std::fprintf(stderr, "[bench] %s: aborted (%s)\n", run.code.c_str(),
                   result.message.c_str());
    results.push_back(std::move(result));
  }
  emit_reports(results, out_dir);
  return results;
}

template <class T>
std::vector<RunResult> run_experiments(const ExperimentSpec& spec, const std::string& corpus_path,
                                       const std::string& out_dir,
                                       bool progress_to_stderr = false) {
  Dataset data = load_corpus(corpus_path);
  return run_experiments<T>(spec, data, out_dir, progress_to_stderr);
}

}  // namespace attnlab
