#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "geonorm/checks.hpp"
#include "geonorm/equivalence.hpp"
#include "geonorm/errors.hpp"
#include "geonorm/training.hpp"
#include "settings.hpp"

namespace geonorm::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kDefaultCheckSeed = 7;

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fixed6(const std::optional<double>& v) { return v ? fixed6(*v) : std::string(); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---- training runs -------------------------------------------------------

struct RunOutcome {
  std::string strategy;
  std::uint64_t seed = 0;
  RunSettings settings;
  TrainResult result;
};

std::string run_stem(const std::string& strategy, std::uint64_t seed) {
  return strategy + "_" + std::to_string(seed);
}

json result_json(const TrainResult& r) {
  return {{"initial_val_loss", r.initial_val_loss},
          {"final_train_loss", optional_json(r.final_train_loss)},
          {"final_val_loss", optional_json(r.final_val_loss)},
          {"diverged", r.diverged},
          {"diverged_at_step", r.diverged ? json(r.diverged_at_step) : json(nullptr)},
          {"divergence_reason", r.diverged ? json(r.divergence_reason) : json(nullptr)},
          {"parameter_count", r.parameter_count}};
}

// Writes loss_<stem>.csv and run_<stem>.json into dir.
void write_run_files(const fs::path& dir, const RunOutcome& run) {
  const std::string stem = run_stem(run.strategy, run.seed);
  run.result.log.write_csv(dir / ("loss_" + stem + ".csv"));
  json manifest = to_json(run.settings);
  manifest["loss_csv"] = "loss_" + stem + ".csv";
  manifest["result"] = result_json(run.result);
  write_json(dir / ("run_" + stem + ".json"), manifest);
}

void describe(std::ostream& out, const RunOutcome& run) {
  out << run.strategy << " seed " << run.seed << ": ";
  if (run.result.diverged) {
    out << "DIVERGED at step " << run.result.diverged_at_step << " (" << run.result.divergence_reason << ")\n";
    return;
  }
  out << "val " << fixed6(run.result.initial_val_loss) << " -> " << fixed6(run.result.final_val_loss)
      << ", final train " << fixed6(run.result.final_train_loss) << "\n";
}

struct Job {
  std::string strategy;
  std::uint64_t seed = 0;
  RunSettings settings;
};

// Runs every job on up to `jobs` threads; results come back in job order.
std::vector<RunOutcome> run_all(const std::vector<Job>& work, const Corpus& corpus, int jobs,
                                std::ostream& err) {
  std::vector<RunOutcome> results(work.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < work.size();) {
      const Job& j = work[i];
      results[i] = {j.strategy, j.seed, j.settings, train(j.settings.model, j.settings.train, corpus)};
      std::lock_guard lock(err_mutex);
      err << "[" << (i + 1) << "/" << work.size() << "] ";
      describe(err, results[i]);
    }
  };
  const std::size_t threads = std::min<std::size_t>(std::max(jobs, 1), work.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return results;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Population standard deviation over seeds.
MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  for (double x : xs) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(xs.size()));
  return m;
}

std::string summary_csv(const std::vector<std::string>& strategies, const std::vector<RunOutcome>& runs) {
  // Checkpoint columns: every validation step logged by a completed run.
  std::vector<long> steps;
  for (const RunOutcome& r : runs) {
    if (r.result.diverged) continue;
    for (const LossRecord& rec : r.result.log.select(Split::kValidation)) steps.push_back(rec.step);
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());

  std::string csv = "strategy,n_seeds,n_diverged,final_train_mean,final_train_std,final_val_mean,final_val_std";
  for (long s : steps) csv += ",val_" + std::to_string(s) + "_mean,val_" + std::to_string(s) + "_std";
  csv += "\n";

  auto cell = [](std::vector<double>& xs, bool want_std) {
    if (xs.empty()) return std::string();
    const MeanStd m = mean_std(xs);
    return fixed6(want_std ? m.std : m.mean);
  };
  for (const std::string& name : strategies) {
    std::size_t n = 0, diverged = 0;
    std::vector<double> train_final, val_final;
    std::map<long, std::vector<double>> at_step;
    for (const RunOutcome& r : runs) {
      if (r.strategy != name) continue;
      ++n;
      if (r.result.diverged) {
        ++diverged;
        continue;
      }
      if (r.result.final_train_loss) train_final.push_back(*r.result.final_train_loss);
      if (r.result.final_val_loss) val_final.push_back(*r.result.final_val_loss);
      for (const LossRecord& rec : r.result.log.select(Split::kValidation)) at_step[rec.step].push_back(rec.loss);
    }
    csv += name + "," + std::to_string(n) + "," + std::to_string(diverged);
    csv += "," + cell(train_final, false) + "," + cell(train_final, true);
    csv += "," + cell(val_final, false) + "," + cell(val_final, true);
    for (long s : steps) {
      auto& xs = at_step[s];
      csv += "," + cell(xs, false) + "," + cell(xs, true);
    }
    csv += "\n";
  }
  return csv;
}

// ---- flag registration ---------------------------------------------------

template <typename T>
void flag(CLI::App* app, const std::string& name, std::optional<T>& slot, const std::string& help) {
  app->add_option_function<T>(name, [&slot](const T& v) { slot = v; }, help);
}

struct TrainFlags {
  SettingsLayer cli;
  std::optional<std::string> config;
  std::optional<std::string> strategies;
  std::optional<std::string> seeds;
};

// Flags shared by train, compare and ablate-clamp. `strategy_flags` adds
// --strategy/--clamp (train only).
void add_run_flags(CLI::App* app, TrainFlags& f, bool strategy_flags, bool seed_flag) {
  SettingsLayer& s = f.cli;
  flag(app, "--config", f.config, "JSON config file; command-line flags take precedence");
  flag(app, "--corpus", s.corpus, "training text (bytes)");
  if (strategy_flags) {
    flag(app, "--strategy", s.strategy, "postnorm|prenorm|deepnorm|sandwichnorm|geonorm");
    flag(app, "--clamp", s.clamp, "GeoNorm maximum rotation angle in (0, pi/2]");
  }
  flag(app, "--decay", s.decay, "GeoNorm step schedule: harmonic|sqrt|linear");
  flag(app, "--dim", s.dim, "model width");
  flag(app, "--layers", s.layers, "number of blocks");
  flag(app, "--heads", s.heads, "attention heads");
  flag(app, "--seq", s.seq, "context length");
  flag(app, "--steps", s.steps, "optimizer steps");
  flag(app, "--batch", s.batch, "sequences per step");
  flag(app, "--lr", s.lr, "Adam learning rate");
  flag(app, "--beta1", s.beta1, "Adam beta1");
  flag(app, "--beta2", s.beta2, "Adam beta2");
  flag(app, "--eps", s.eps, "Adam epsilon");
  if (seed_flag) flag(app, "--seed", s.seed, "run seed (default $GEONORM_SEED or 1234)");
  flag(app, "--eval-every", s.eval_every, "validation interval in steps");
  flag(app, "--eval-batches", s.eval_batches, "validation batches per evaluation");
  flag(app, "--precision", s.precision, "wide|narrow (default narrow)");
  flag(app, "--out", s.out, "output directory (default runs)");
}

SettingsLayer merged(const TrainFlags& f) {
  SettingsLayer s;
  if (f.config) s = load_config_file(*f.config);
  SettingsLayer top = f.cli;
  if (f.strategies) top.strategies = split_list(*f.strategies);
  if (f.seeds) top.seeds = parse_seed_list(*f.seeds);
  s.overlay(top);
  return s;
}

// ---- subcommands ----------------------------------------------------------

int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  const SettingsLayer s = merged(f);
  const RunSettings settings = resolve_run(s, s.strategy.value_or("geonorm"));
  const Corpus corpus = load_corpus(settings.corpus);
  ensure_dir(settings.out);
  const std::string strategy(strategy_name(settings.model.strategy));
  RunOutcome run{strategy, settings.train.seed, settings, {}};
  run.result = train(settings.model, settings.train, corpus);
  write_run_files(settings.out, run);
  describe(out, run);
  if (run.result.diverged) {
    err << "run diverged; see " << (settings.out / ("run_" + run_stem(strategy, run.seed) + ".json")).string()
        << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_compare(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  SettingsLayer s = merged(f);
  const std::vector<std::string> strategies = s.strategies.value_or(all_strategy_names());
  const std::vector<std::uint64_t> seeds = s.seeds.value_or(std::vector<std::uint64_t>{1, 2, 3});
  if (strategies.size() < 2) throw UsageError("compare needs at least two strategies");
  if (seeds.empty()) throw UsageError("compare needs at least one seed");
  for (std::size_t i = 0; i < strategies.size(); ++i) {
    if (std::count(strategies.begin(), strategies.end(), strategies[i]) > 1) {
      throw UsageError("strategy '" + strategies[i] + "' listed twice");
    }
  }
  const int jobs = s.jobs.value_or(1);
  if (jobs < 1) throw UsageError("--jobs must be at least 1");

  // Decay and clamp in a shared config configure the geonorm runs only.
  std::vector<Job> work;
  for (const std::string& name : strategies) {
    SettingsLayer per = s;
    if (name != "geonorm") per.decay.reset(), per.clamp.reset();
    for (std::uint64_t seed : seeds) {
      per.seed = seed;
      work.push_back({name, seed, resolve_run(per, name)});
    }
  }
  const RunSettings& shared = work.front().settings;
  const Corpus corpus = load_corpus(shared.corpus);
  ensure_dir(shared.out);

  const std::vector<RunOutcome> runs = run_all(work, corpus, jobs, err);
  json manifest;
  manifest["strategies"] = strategies;
  manifest["seeds"] = seeds;
  manifest["summary_csv"] = "summary.csv";
  manifest["runs"] = json::array();
  std::size_t diverged = 0;
  for (const RunOutcome& r : runs) {
    write_run_files(shared.out, r);
    const std::string stem = run_stem(r.strategy, r.seed);
    manifest["runs"].push_back({{"strategy", r.strategy},
                                {"seed", r.seed},
                                {"loss_csv", "loss_" + stem + ".csv"},
                                {"run_json", "run_" + stem + ".json"},
                                {"diverged", r.result.diverged}});
    diverged += r.result.diverged ? 1 : 0;
    describe(out, r);
  }
  manifest["config"] = to_json(shared);
  manifest["config"]["train"].erase("seed");
  manifest["config"]["model"].erase("strategy");
  manifest["config"]["model"].erase("geonorm");
  write_text(shared.out / "summary.csv", summary_csv(strategies, runs));
  write_json(shared.out / "compare.json", manifest);
  out << "wrote " << (shared.out / "summary.csv").string() << "\n";
  if (diverged > 0) {
    err << diverged << " of " << runs.size() << " runs diverged\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_ablate(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  SettingsLayer s = merged(f);
  if (s.strategy && *s.strategy != "geonorm") throw UsageError("ablate-clamp always trains geonorm");
  if (s.clamp) throw UsageError("ablate-clamp sets the clamp itself");
  struct Arm {
    const char* label;
    const char* dir;
    double clamp;
  };
  constexpr double pi = std::numbers::pi;
  const Arm arms[] = {{"pi/2", "clamp_pi_2", pi / 2}, {"pi/4", "clamp_pi_4", pi / 4}, {"pi/8", "clamp_pi_8", pi / 8}};

  std::vector<Job> work;
  for (const Arm& arm : arms) {
    SettingsLayer per = s;
    per.clamp = arm.clamp;
    RunSettings rs = resolve_run(per, "geonorm");
    rs.out /= arm.dir;
    work.push_back({"geonorm", rs.train.seed, rs});
  }
  const Corpus corpus = load_corpus(work.front().settings.corpus);
  const std::vector<RunOutcome> runs = run_all(work, corpus, s.jobs.value_or(1), err);

  const fs::path root = resolve_run(s, "geonorm").out;
  std::string csv = "clamp_label,clamp,seed,initial_val_loss,final_train_loss,final_val_loss,val_reduction,converged\n";
  bool all_converged = true;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const RunOutcome& r = runs[i];
    ensure_dir(r.settings.out);
    write_run_files(r.settings.out, r);
    std::optional<double> reduction;
    if (!r.result.diverged && r.result.final_val_loss) {
      reduction = 1.0 - *r.result.final_val_loss / r.result.initial_val_loss;
    }
    const bool converged = reduction && *reduction >= 0.3;
    all_converged = all_converged && converged;
    char clamp[32];
    std::snprintf(clamp, sizeof clamp, "%.10f", arms[i].clamp);
    csv += std::string(arms[i].label) + "," + clamp + "," + std::to_string(r.seed) + "," +
           fixed6(r.result.initial_val_loss) + "," + fixed6(r.result.final_train_loss) + "," +
           fixed6(r.result.final_val_loss) + "," + fixed6(reduction) + "," + (converged ? "true" : "false") + "\n";
    out << "clamp " << arms[i].label << ": ";
    describe(out, r);
  }
  write_text(root / "ablation_summary.csv", csv);
  out << "wrote " << (root / "ablation_summary.csv").string() << "\n";
  if (!all_converged) {
    err << "at least one clamp setting failed to reduce validation loss by 30%\n";
    return kExitFailure;
  }
  return kExitOk;
}

struct CheckFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

// Writes <cmd>_report.json, plus <cmd>_failure.json with replay arguments when
// the check failed (printed to stdout if no --out was given).
int finish_check(const std::string& cmd, const CheckFlags& f, const json& report, bool passed,
                 const json& failure, std::ostream& out, std::ostream& err) {
  if (f.out) {
    ensure_dir(*f.out);
    write_json(fs::path(*f.out) / (cmd + "_report.json"), report);
  }
  if (passed) {
    out << "PASS\n";
    return kExitOk;
  }
  if (f.out) {
    const fs::path path = fs::path(*f.out) / (cmd + "_failure.json");
    write_json(path, failure);
    err << "FAIL; replay details in " << path.string() << "\n";
  } else {
    out << failure.dump(2) << "\n";
    err << "FAIL\n";
  }
  return kExitFailure;
}

// Full argument vector, subcommand first, that reruns the failing check.
json replay(const std::string& cmd, std::vector<std::string> args) {
  args.insert(args.begin(), cmd);
  return args;
}

int cmd_gradcheck(const CheckFlags& f, const std::optional<std::string>& only, std::ostream& out,
                  std::ostream& err) {
  const std::uint64_t seed = f.seed ? *f.seed : default_seed(kDefaultCheckSeed);
  std::function<bool(const std::string&)> select;
  if (only) select = [&](const std::string& name) { return name == *only; };
  const std::vector<GradCheckResult> results = run_gradcheck_suite(seed, select);
  if (results.empty()) throw UsageError("no gradcheck case named '" + only.value_or("") + "'");

  char line[160];
  std::snprintf(line, sizeof line, "%-26s %12s %10s  %s\n", "case", "max_rel_err", "tolerance", "status");
  out << line;
  json report = {{"seed", seed}, {"step", kFiniteDifferenceStep}, {"cases", json::array()}};
  json failures = json::array();
  for (const GradCheckResult& r : results) {
    std::snprintf(line, sizeof line, "%-26s %12.3e %10.1e  %s\n", r.name.c_str(), r.max_error, r.tolerance,
                  r.passed ? "PASS" : "FAIL");
    out << line;
    json c = {{"name", r.name},           {"max_error", r.max_error}, {"tolerance", r.tolerance},
              {"passed", r.passed},       {"worst_param", r.worst_param}, {"worst_index", r.worst_index},
              {"autodiff", r.autodiff}, {"finite_difference", r.finite_difference}};
    report["cases"].push_back(c);
    if (!r.passed) {
      c["replay"] = replay("gradcheck", {"--seed", std::to_string(seed), "--case", r.name});
      failures.push_back(c);
    }
  }
  report["passed"] = failures.empty();
  return finish_check("gradcheck", f, report, failures.empty(), {{"seed", seed}, {"failures", failures}}, out,
                      err);
}

int cmd_geometry(const CheckFlags& f, std::size_t trials, std::ostream& out, std::ostream& err) {
  const std::uint64_t seed = f.seed ? *f.seed : default_seed(kDefaultCheckSeed);
  if (trials == 0) throw UsageError("--trials must be positive");
  const GeometryReport g = run_geometry_suite(trials, seed);
  char line[200];
  std::snprintf(line, sizeof line,
                "trials %zu\nmax norm deviation   %.3e (tol %.0e)\nmax orthogonality    %.3e (tol %.0e)\n"
                "max idempotence err  %.3e (tol %.0e)\nmax angle error      %.3e (tol %.0e)\n",
                g.trials, g.max_norm_deviation, kGeometryNormTolerance, g.max_orthogonality,
                kGeometryOrthogonalityTolerance, g.max_idempotence_error, kGeometryIdempotenceTolerance,
                g.max_geodesic_angle_error, kGeometryAngleTolerance);
  out << line;
  json report = {{"seed", seed},
                 {"trials", g.trials},
                 {"max_norm_deviation", g.max_norm_deviation},
                 {"max_orthogonality", g.max_orthogonality},
                 {"max_idempotence_error", g.max_idempotence_error},
                 {"max_geodesic_angle_error", g.max_geodesic_angle_error},
                 {"tolerances",
                  {{"norm", kGeometryNormTolerance},
                   {"orthogonality", kGeometryOrthogonalityTolerance},
                   {"idempotence", kGeometryIdempotenceTolerance},
                   {"angle", kGeometryAngleTolerance}}},
                 {"passed", g.passed}};
  json failure = report;
  failure["replay"] =
      replay("geometry-check", {"--trials", std::to_string(trials), "--seed", std::to_string(seed)});
  return finish_check("geometry-check", f, report, g.passed, failure, out, err);
}

struct EquivalenceFlags {
  int layers = 12;
  int dim = 64;
  int heads = 4;
  int seq = 16;
  int batch = 2;
  std::string precision = "wide";
  std::optional<double> tolerance;
};

int cmd_equivalence(const CheckFlags& f, const EquivalenceFlags& e, std::ostream& out, std::ostream& err) {
  const std::uint64_t seed = f.seed ? *f.seed : default_seed(kDefaultCheckSeed);
  if (e.layers < 1 || e.dim < 1 || e.heads < 1 || e.seq < 1 || e.batch < 1) {
    throw UsageError("layers, dim, heads, seq and batch must be positive");
  }
  if (e.dim % e.heads != 0) throw UsageError("--dim must be divisible by --heads");
  Precision prec;
  try {
    prec = parse_precision(e.precision);
  } catch (const ContractError& ex) {
    throw UsageError(ex.what());
  }
  const double tol = e.tolerance.value_or(default_equivalence_tolerance(prec));
  if (!(tol > 0.0)) throw UsageError("--tolerance must be positive");

  const auto u = [](int v) { return static_cast<std::size_t>(v); };
  const ChainModules mods = random_transformer_chain(u(e.layers), u(e.dim), u(e.heads), seed, prec);
  const DenseTensor x0 = random_chain_input(u(e.batch), u(e.seq), u(e.dim), seed, prec);
  const EquivalenceReport r = check_equivalence(x0, mods, tol);

  char line[160];
  std::snprintf(line, sizeof line, "%5s %14s %16s %14s\n", "layer", "norm_dev", "scaled_identity", "implied_angle");
  out << line;
  json layers = json::array();
  for (std::size_t k = 0; k < r.layer_deviation.size(); ++k) {
    const int layer = static_cast<int>(k) + 1;
    std::snprintf(line, sizeof line, "%5d %14.3e %16.3e %14.6f\n", layer, r.layer_deviation[k],
                  r.scaled_identity_error[k], prenorm_implied_angle(layer));
    out << line;
    layers.push_back({{"layer", layer},
                      {"deviation", r.layer_deviation[k]},
                      {"scaled_identity_error", r.scaled_identity_error[k]},
                      {"implied_angle", prenorm_implied_angle(layer)}});
  }
  std::snprintf(line, sizeof line, "max deviation %.3e (tol %.1e), max scaled identity error %.3e\n",
                r.max_deviation, r.tolerance, r.max_scaled_identity_error);
  out << line;
  json report = {{"seed", seed},
                 {"layers", e.layers},
                 {"dim", e.dim},
                 {"heads", e.heads},
                 {"seq", e.seq},
                 {"batch", e.batch},
                 {"precision", std::string(to_string(prec))},
                 {"tolerance", r.tolerance},
                 {"max_deviation", r.max_deviation},
                 {"max_scaled_identity_error", r.max_scaled_identity_error},
                 {"per_layer", layers},
                 {"passed", r.passed}};
  json failure = report;
  std::vector<std::string> args = {"--layers", std::to_string(e.layers), "--dim",   std::to_string(e.dim),
                                   "--heads",  std::to_string(e.heads),  "--seq",   std::to_string(e.seq),
                                   "--batch",  std::to_string(e.batch),  "--seed",  std::to_string(seed),
                                   "--precision", std::string(to_string(prec))};
  if (e.tolerance) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *e.tolerance);
    args.insert(args.end(), {"--tolerance", buf});
  }
  failure["replay"] = replay("equivalence", args);
  return finish_check("equivalence", f, report, r.passed, failure, out, err);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"GeoNorm: geodesic normalization experiments and checks", "geonorm"};
  app.require_subcommand(1);

  TrainFlags train_f, compare_f, ablate_f;
  CLI::App* train_cmd = app.add_subcommand("train", "train one model and log its losses");
  add_run_flags(train_cmd, train_f, true, true);

  CLI::App* compare_cmd = app.add_subcommand("compare", "train several strategies over several seeds");
  add_run_flags(compare_cmd, compare_f, false, false);
  flag(compare_cmd, "--clamp", compare_f.cli.clamp, "GeoNorm clamp for the geonorm runs");
  flag(compare_cmd, "--strategies", compare_f.strategies, "comma-separated list (default: all five)");
  flag(compare_cmd, "--seeds", compare_f.seeds, "comma-separated list (default 1,2,3)");
  flag(compare_cmd, "--jobs", compare_f.cli.jobs, "worker threads (default 1)");

  CLI::App* ablate_cmd = app.add_subcommand("ablate-clamp", "train GeoNorm at clamp pi/2, pi/4 and pi/8");
  add_run_flags(ablate_cmd, ablate_f, false, true);
  flag(ablate_cmd, "--jobs", ablate_f.cli.jobs, "worker threads (default 1)");

  CheckFlags grad_f, geo_f, eq_f;
  std::optional<std::string> grad_case;
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "autodiff against central finite differences");
  flag(grad_cmd, "--seed", grad_f.seed, "suite seed");
  flag(grad_cmd, "--case", grad_case, "run a single case by name");
  flag(grad_cmd, "--out", grad_f.out, "directory for the JSON report");

  std::size_t trials = 10000;
  CLI::App* geo_cmd = app.add_subcommand("geometry-check", "sphere geometry invariants on random inputs");
  geo_cmd->add_option("--trials", trials, "random triples")->capture_default_str();
  flag(geo_cmd, "--seed", geo_f.seed, "suite seed");
  flag(geo_cmd, "--out", geo_f.out, "directory for the JSON report");

  EquivalenceFlags eq;
  CLI::App* eq_cmd = app.add_subcommand("equivalence", "Pre-Norm chain vs rescaled chain after RMSNorm");
  eq_cmd->add_option("--layers", eq.layers, "chain length")->capture_default_str();
  eq_cmd->add_option("--dim", eq.dim, "width")->capture_default_str();
  eq_cmd->add_option("--heads", eq.heads, "attention heads")->capture_default_str();
  eq_cmd->add_option("--seq", eq.seq, "sequence length")->capture_default_str();
  eq_cmd->add_option("--batch", eq.batch, "batch size")->capture_default_str();
  eq_cmd->add_option("--precision", eq.precision, "wide|narrow")->capture_default_str();
  flag(eq_cmd, "--tolerance", eq.tolerance, "deviation bound (default 1e-6 wide, 1e-3 narrow)");
  flag(eq_cmd, "--seed", eq_f.seed, "weights and input seed");
  flag(eq_cmd, "--out", eq_f.out, "directory for the JSON report");

  try {
    // CLI11 consumes a reversed argument vector.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help: show the help of the subcommand it was given to, if any.
      const CLI::App* target = &app;
      for (const CLI::App* sub : app.get_subcommands()) target = sub;
      out << target->help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_f, out, err);
    if (compare_cmd->parsed()) return cmd_compare(compare_f, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_f, out, err);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_f, grad_case, out, err);
    if (geo_cmd->parsed()) return cmd_geometry(geo_f, trials, out, err);
    if (eq_cmd->parsed()) return cmd_equivalence(eq_f, eq, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::logic_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace geonorm::cli
