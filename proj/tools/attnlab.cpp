// attnlab command line: train a single model, run the benchmark grid or the
// four-module comparison, and run the verification suites.

#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "attnlab/attnlab.hpp"

namespace {

struct CommonFlags {
  std::string corpus;
  std::string out = "out";
  std::uint64_t seed = 42;
  std::int64_t d_model = 128;
  std::int64_t heads = 4;
  double p_drop = 0.0;
  std::int64_t layers = 2;
  std::int64_t seg_len = 64;
  std::int64_t mem_len = -1;  // -1: same as seg-len
  std::int64_t steps = 2000;
  std::int64_t batch = 32;
  std::string variant = "RCMHA";
  std::string precision = "f32";
};

void add_model_flags(CLI::App* cmd, CommonFlags& f, bool corpus_required) {
  cmd->set_config("--config", "", "key=value config file; flags override file values");
  auto* corpus = cmd->add_option("--corpus", f.corpus, "UTF-8 corpus file");
  if (corpus_required) corpus->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "rng seed")->envname("ATTNLAB_SEED");
  cmd->add_option("--d-model", f.d_model, "embedding width");
  cmd->add_option("--heads", f.heads, "attention heads");
  cmd->add_option("--p-drop", f.p_drop, "dropout probability");
  cmd->add_option("--layers", f.layers, "decoder blocks");
  cmd->add_option("--seg-len", f.seg_len, "segment length");
  cmd->add_option("--mem-len", f.mem_len, "recurrence memory length (-1: seg-len)");
  cmd->add_option("--steps", f.steps, "training steps");
  cmd->add_option("--batch", f.batch, "batch lanes");
  cmd->add_option("--variant", f.variant, "attention module")
      ->check(CLI::IsMember({"MHA", "MDHA", "RMHA", "RCMHA"}));
  cmd->add_option("--precision", f.precision, "element type")
      ->check(CLI::IsMember({"f32", "f64"}));
}

template <class T>
int run_train(const CommonFlags& f) {
  attnlab::Dataset data = attnlab::load_corpus(f.corpus);
  attnlab::ModelConfig cfg;
  cfg.vocab_size = data.vocab_size();
  cfg.n_layers = f.layers;
  cfg.d_model = f.d_model;
  cfg.heads = f.heads;
  cfg.p_drop = f.p_drop;
  cfg.seg_len = f.seg_len;
  cfg.mem_len = f.mem_len;
  cfg.variant = *attnlab::parse_variant(f.variant);
  cfg.finalize();

  attnlab::TrainConfig tcfg;
  tcfg.steps = f.steps;
  tcfg.batch = f.batch;
  tcfg.seed = f.seed;

  std::filesystem::create_directories(f.out);
  std::ofstream jsonl(f.out + "/train.jsonl", std::ios::trunc);
  std::printf(
      "train: %s d=%lld h=%lld p=%.2f layers=%lld seg=%lld mem=%lld steps=%lld batch=%lld "
      "seed=%llu vocab=%lld\n",
      f.variant.c_str(), static_cast<long long>(cfg.d_model), static_cast<long long>(cfg.heads),
      cfg.p_drop, static_cast<long long>(cfg.n_layers), static_cast<long long>(cfg.seg_len),
      static_cast<long long>(cfg.mem_len), static_cast<long long>(tcfg.steps),
      static_cast<long long>(tcfg.batch), static_cast<unsigned long long>(tcfg.seed),
      static_cast<long long>(cfg.vocab_size));
  auto result = attnlab::train<T>(cfg, tcfg, data, [&](const attnlab::MetricsRecord& rec) {
    jsonl << attnlab::record_json(rec).dump() << "\n";
    jsonl.flush();
    std::printf("step %6lld  loss %.4f  acc %.4f  ppl %.3f  peak %lld B  wall %lld ms\n",
                static_cast<long long>(rec.step), rec.loss, rec.accuracy, rec.ppl,
                static_cast<long long>(rec.peak_mem_bytes), static_cast<long long>(rec.wall_ms));
    std::fflush(stdout);
  });
  if (result.status == attnlab::RunStatus::aborted) {
    std::fprintf(stderr, "aborted: %s\n", result.message.c_str());
    return 2;
  }
  attnlab::save_checkpoint(result.params, f.out + "/checkpoint");
  std::printf(
      "done: loss %.4f acc %.4f ppl %.3f | params %lld | peak %lld B avg %lld B | %lld ms\n",
      result.final_record.loss, result.final_record.accuracy, result.final_record.ppl,
      static_cast<long long>(result.final_record.params),
      static_cast<long long>(result.peak_mem_bytes),
      static_cast<long long>(result.avg_mem_bytes), static_cast<long long>(result.wall_ms));
  std::printf("checkpoint: %s/checkpoint.{bin,manifest}\n", f.out.c_str());
  return 0;
}

struct GridOverrides {
  bool steps = false, d_model = false, heads = false, p_drop = false;
};

template <class T>
int run_grid(const CommonFlags& f, attnlab::ExperimentSpec spec, std::int64_t d_model_div,
             const GridOverrides& given) {
  for (auto& run : spec.runs) {
    run.seed = f.seed;
    run.n_layers = f.layers;
    run.seg_len = f.seg_len;
    run.mem_len = f.mem_len < 0 ? f.seg_len : f.mem_len;
    run.batch = f.batch;
    if (given.steps) run.steps = f.steps;
    if (given.d_model) run.d_model = f.d_model;
    if (given.heads) run.heads = f.heads;
    if (given.p_drop) run.p_drop = f.p_drop;
  }
  if (d_model_div > 1) attnlab::scale_d_model(spec, d_model_div);
  auto results = attnlab::run_experiments<T>(spec, f.corpus, f.out, true);
  int failures = 0;
  for (const auto& r : results)
    if (r.status != attnlab::RunStatus::ok) ++failures;
  std::printf("%zu runs, %d aborted; reports in %s/{summary.csv,plotdata.json}\n", results.size(),
              failures, f.out.c_str());
  return failures == 0 ? 0 : 2;
}

int run_gradcheck() {
  auto suite = attnlab::verify::gradcheck_suite();
  suite.print();
  return suite.pass() ? 0 : 1;
}

int run_oracle(std::int64_t seeds) {
  auto rel = attnlab::verify::rel_oracle_suite(seeds);
  rel.print();
  auto value = attnlab::verify::value_oracle_suite();
  value.print();
  auto collapse = attnlab::verify::collapse_suite();
  collapse.print();
  auto causal = attnlab::verify::causality_suite();
  causal.print();
  return rel.pass() && value.pass() && collapse.pass() && causal.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-module laboratory: MHA / MDHA / RMHA / RCMHA"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train one model from flags or a config file");
  add_model_flags(train_cmd, train_flags, true);

  CommonFlags bench_flags;
  std::int64_t bench_div = 1;
  auto* bench_cmd = app.add_subcommand("bench", "run the 12-run default experiment grid");
  add_model_flags(bench_cmd, bench_flags, true);
  bench_cmd->add_option("--d-model-div", bench_div, "divide every grid d_model by this factor");

  CommonFlags cmp_flags;
  std::int64_t cmp_div = 1;
  auto* cmp_cmd = app.add_subcommand("compare", "run the four-module comparison set");
  add_model_flags(cmp_cmd, cmp_flags, true);
  cmp_cmd->add_option("--d-model-div", cmp_div, "divide every run's d_model by this factor");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");

  std::int64_t oracle_seeds = 20;
  auto* oracle_cmd = app.add_subcommand("oracle", "naive-vs-fast equivalence suites");
  oracle_cmd->add_option("--seeds", oracle_seeds, "seeds per sweep cell");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*grad_cmd) return run_gradcheck();
    if (*oracle_cmd) return run_oracle(oracle_seeds);
    if (*train_cmd)
      return train_flags.precision == "f64" ? run_train<double>(train_flags)
                                            : run_train<float>(train_flags);
    auto overrides = [](CLI::App* cmd) {
      GridOverrides g;
      g.steps = cmd->count("--steps") > 0;
      g.d_model = cmd->count("--d-model") > 0;
      g.heads = cmd->count("--heads") > 0;
      g.p_drop = cmd->count("--p-drop") > 0;
      return g;
    };
    if (*bench_cmd)
      return bench_flags.precision == "f64"
                 ? run_grid<double>(bench_flags, attnlab::default_grid(), bench_div,
                                    overrides(bench_cmd))
                 : run_grid<float>(bench_flags, attnlab::default_grid(), bench_div,
                                   overrides(bench_cmd));
    if (*cmp_cmd)
      return cmp_flags.precision == "f64"
                 ? run_grid<double>(cmp_flags, attnlab::comparison_set(), cmp_div,
                                    overrides(cmp_cmd))
                 : run_grid<float>(cmp_flags, attnlab::comparison_set(), cmp_div,
                                   overrides(cmp_cmd));
  } catch (const attnlab::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
