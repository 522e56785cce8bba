#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "geonorm/training.hpp"
#include "settings.hpp"

namespace fs = std::filesystem;
using geonorm::cli::kExitFailure;
using geonorm::cli::kExitOk;
using geonorm::cli::kExitUsage;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = geonorm::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "geonorm_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small corpus and model so each run takes milliseconds.
fs::path corpus_file() {
  const fs::path p = fs::temp_directory_path() / "geonorm_cli_tests" / "corpus.txt";
  if (!fs::exists(p)) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    for (int i = 0; i < 400; ++i) f << "the whale swam on. ";
  }
  return p;
}

std::vector<std::string> small(const fs::path& out) {
  return {"--corpus", corpus_file().string(), "--dim", "8", "--heads", "2", "--layers", "1", "--seq", "8",
          "--batch", "2", "--steps", "6", "--eval-every", "3", "--eval-batches", "1", "--out", out.string()};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::map<std::string, std::string> files_in(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"fly"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--bogus", "1"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--strategy", "prenorm", "--decay", "harmonic"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--strategy", "geonorm", "--decay", "cubic"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--strategy", "geonorm", "--clamp", "2.0"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--dim", "10", "--heads", "4"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--corpus", "/nonexistent/geonorm.txt"}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--steps", "many"}).code, kExitUsage);
  EXPECT_EQ(cli({"compare", "--strategies", "prenorm"}).code, kExitUsage);
  EXPECT_EQ(cli({"gradcheck", "--case", "no_such_case"}).code, kExitUsage);
  EXPECT_EQ(cli({"ablate-clamp", "--clamp", "0.5"}).code, kExitUsage);
}

TEST(Cli, HelpExitsZero) {
  auto r = cli({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("ablate-clamp"), std::string::npos);
  r = cli({"train", "--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("--decay"), std::string::npos);
}

TEST(Cli, TrainWritesLogAndManifest) {
  const fs::path out = scratch("train");
  auto r = cli(cat({"train", "--strategy", "geonorm", "--decay", "sqrt", "--clamp", "0.5", "--seed", "5"}, small(out)));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const std::string csv = slurp(out / "loss_geonorm_5.csv");
  const auto log = geonorm::LossLog::parse_csv(csv);
  EXPECT_EQ(log.select(geonorm::Split::kTrain).size(), 6u);
  const auto manifest = nlohmann::json::parse(slurp(out / "run_geonorm_5.json"));
  EXPECT_EQ(manifest["model"]["geonorm"]["decay"], "sqrt");
  EXPECT_EQ(manifest["model"]["geonorm"]["clamp"], 0.5);
  EXPECT_EQ(manifest["model"]["dim"], 8);
  EXPECT_EQ(manifest["train"]["seed"], 5);
  EXPECT_EQ(manifest["train"]["precision"], "narrow");
  EXPECT_EQ(manifest["result"]["diverged"], false);
  // The CSV rounds to 6 decimals; the manifest keeps full precision.
  EXPECT_NEAR(manifest["result"]["final_val_loss"].get<double>(), *log.last(geonorm::Split::kValidation), 5e-7);
}

TEST(Cli, TrainTwiceGivesIdenticalFiles) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(cli(cat({"train", "--strategy", "deepnorm"}, small(a))).code, kExitOk);
  ASSERT_EQ(cli(cat({"train", "--strategy", "deepnorm"}, small(b))).code, kExitOk);
  auto fa = files_in(a), fb = files_in(b);
  ASSERT_EQ(fa.size(), 2u);
  for (auto& [name, text] : fa) EXPECT_EQ(text, fb[name]) << name;
}

TEST(Cli, ConfigFilePrecedence) {
  const fs::path out = scratch("config");
  const fs::path cfg = out / "cfg.json";
  std::ofstream(cfg) << R"({"strategy": "prenorm", "steps": 4, "lr": 0.002, "seed": 11, "dim": 12})";
  auto args = small(out / "runs");
  args.insert(args.begin(), {"train", "--config", cfg.string()});
  // --steps 6 and --dim 8 on the command line beat the file; lr and seed come from it.
  ASSERT_EQ(cli(args).code, kExitOk);
  const auto m = nlohmann::json::parse(slurp(out / "runs" / "run_prenorm_11.json"));
  EXPECT_EQ(m["train"]["steps"], 6);
  EXPECT_EQ(m["model"]["dim"], 8);
  EXPECT_EQ(m["train"]["lr"], 0.002);

  std::ofstream(cfg) << R"({"stepz": 4})";
  EXPECT_EQ(cli({"train", "--config", cfg.string()}).code, kExitUsage);
  std::ofstream(cfg) << R"({"steps": "four"})";
  EXPECT_EQ(cli({"train", "--config", cfg.string()}).code, kExitUsage);
  std::ofstream(cfg) << "not json";
  EXPECT_EQ(cli({"train", "--config", cfg.string()}).code, kExitUsage);
}

TEST(Cli, SeedEnvironmentDefault) {
  const fs::path out = scratch("env");
  ::setenv(geonorm::cli::kSeedEnv, "42", 1);
  auto r = cli(cat({"train", "--strategy", "prenorm"}, small(out)));
  ::unsetenv(geonorm::cli::kSeedEnv);
  ASSERT_EQ(r.code, kExitOk);
  EXPECT_TRUE(fs::exists(out / "loss_prenorm_42.csv"));
}

TEST(Cli, CompareSummaryMatchesRecomputation) {
  const fs::path out = scratch("compare");
  auto r = cli(cat({"compare", "--strategies", "prenorm,geonorm,postnorm", "--seeds", "1,2,3", "--jobs", "2"},
                   small(out)));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::istringstream summary(slurp(out / "summary.csv"));
  std::string header, line;
  std::getline(summary, header);
  EXPECT_EQ(header.rfind("strategy,n_seeds,n_diverged,final_train_mean,final_train_std,final_val_mean,final_val_std,"
                         "val_0_mean,val_0_std,val_3_mean,val_3_std,val_6_mean,val_6_std",
                         0),
            0u)
      << header;
  int rows = 0;
  while (std::getline(summary, line)) {
    ++rows;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    ASSERT_EQ(f.size(), 13u);
    // Recompute final validation mean and population std from the per-seed CSVs.
    std::vector<double> finals;
    for (int seed : {1, 2, 3}) {
      auto log = geonorm::LossLog::parse_csv(slurp(out / ("loss_" + f[0] + "_" + std::to_string(seed) + ".csv")));
      finals.push_back(*log.last(geonorm::Split::kValidation));
    }
    double mean = (finals[0] + finals[1] + finals[2]) / 3, var = 0;
    for (double x : finals) var += (x - mean) * (x - mean) / 3;
    EXPECT_EQ(f[1], "3");
    EXPECT_EQ(f[2], "0");
    EXPECT_NEAR(std::stod(f[5]), mean, 1e-6);
    EXPECT_NEAR(std::stod(f[6]), std::sqrt(var), 1e-6);
    EXPECT_EQ(f[11], f[5]);  // last checkpoint is the final evaluation
  }
  EXPECT_EQ(rows, 3);
  int csvs = 0;
  for (const auto& e : fs::directory_iterator(out)) csvs += e.path().filename().string().rfind("loss_", 0) == 0;
  EXPECT_EQ(csvs, 9);
  const auto manifest = nlohmann::json::parse(slurp(out / "compare.json"));
  EXPECT_EQ(manifest["runs"].size(), 9u);
}

TEST(Cli, CompareIndependentOfJobCount) {
  const fs::path a = scratch("jobs_1"), b = scratch("jobs_3");
  ASSERT_EQ(cli(cat({"compare", "--strategies", "sandwichnorm,deepnorm", "--seeds", "4,5", "--jobs", "1"}, small(a))).code,
            kExitOk);
  ASSERT_EQ(cli(cat({"compare", "--strategies", "sandwichnorm,deepnorm", "--seeds", "4,5", "--jobs", "3"}, small(b))).code,
            kExitOk);
  EXPECT_EQ(files_in(a), files_in(b));
}

TEST(Cli, AblateClampRowsInOrder) {
  const fs::path out = scratch("ablate");
  auto r = cli(cat({"ablate-clamp"}, small(out)));
  EXPECT_TRUE(r.code == kExitOk || r.code == kExitFailure) << r.err;
  std::istringstream csv(slurp(out / "ablation_summary.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "clamp_label,clamp,seed,initial_val_loss,final_train_loss,final_val_loss,val_reduction,converged");
  for (const char* label : {"pi/2,1.5707963268", "pi/4,0.7853981634", "pi/8,0.3926990817"}) {
    ASSERT_TRUE(std::getline(csv, line));
    EXPECT_EQ(line.rfind(label, 0), 0u) << line;
  }
  EXPECT_FALSE(std::getline(csv, line));
  for (const char* dir : {"clamp_pi_2", "clamp_pi_4", "clamp_pi_8"}) {
    EXPECT_TRUE(fs::exists(out / dir / "loss_geonorm_1234.csv")) << dir;
  }
}

TEST(Cli, ChecksPassAndWriteReports) {
  const fs::path out = scratch("checks");
  auto g = cli({"geometry-check", "--trials", "500", "--seed", "7", "--out", out.string()});
  EXPECT_EQ(g.code, kExitOk) << g.err;
  EXPECT_TRUE(fs::exists(out / "geometry-check_report.json"));
  auto e = cli({"equivalence", "--layers", "4", "--dim", "16", "--seed", "7", "--out", out.string()});
  EXPECT_EQ(e.code, kExitOk) << e.err;
  const auto report = nlohmann::json::parse(slurp(out / "equivalence_report.json"));
  EXPECT_EQ(report["per_layer"].size(), 4u);
  EXPECT_LT(report["max_deviation"].get<double>(), 1e-6);
  auto c = cli({"gradcheck", "--case", "rmsnorm", "--out", out.string()});
  EXPECT_EQ(c.code, kExitOk) << c.err;
  EXPECT_NE(c.out.find("rmsnorm"), std::string::npos);
}

TEST(Cli, CheckFailureIsSerializedForReplay) {
  const fs::path out = scratch("failure");
  auto r = cli({"equivalence", "--layers", "3", "--dim", "16", "--seed", "9", "--tolerance", "1e-30", "--out",
                out.string()});
  ASSERT_EQ(r.code, kExitFailure);
  const auto failure = nlohmann::json::parse(slurp(out / "equivalence_failure.json"));
  std::vector<std::string> replay = failure["replay"];
  ASSERT_FALSE(replay.empty());
  EXPECT_EQ(replay[0], "equivalence");
  // Replaying reproduces the same failure and the same report.
  const fs::path again = scratch("failure_again");
  replay.insert(replay.end(), {"--out", again.string()});
  EXPECT_EQ(cli(replay).code, kExitFailure);
  EXPECT_EQ(slurp(out / "equivalence_report.json"), slurp(again / "equivalence_report.json"));

  auto printed = cli({"equivalence", "--layers", "2", "--dim", "8", "--heads", "2", "--tolerance", "1e-30"});
  EXPECT_EQ(printed.code, kExitFailure);
  EXPECT_NE(printed.out.find("\"replay\""), std::string::npos);
}

TEST(Cli, CheckCommandsAreDeterministic) {
  const fs::path a = scratch("check_a"), b = scratch("check_b");
  for (const fs::path& dir : {a, b}) {
    ASSERT_EQ(cli({"geometry-check", "--trials", "300", "--seed", "3", "--out", dir.string()}).code, kExitOk);
    ASSERT_EQ(cli({"equivalence", "--layers", "3", "--dim", "8", "--heads", "2", "--seed", "3", "--out", dir.string()}).code,
              kExitOk);
    ASSERT_EQ(cli({"gradcheck", "--seed", "3", "--case", "ffn", "--out", dir.string()}).code, kExitOk);
  }
  EXPECT_EQ(files_in(a), files_in(b));
}

TEST(Settings, ListsAndOverlay) {
  using namespace geonorm::cli;
  EXPECT_EQ(split_list("a,,b,c"), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(parse_seed_list("1,22"), (std::vector<std::uint64_t>{1, 22}));
  EXPECT_THROW(parse_seed_list("1,-2"), UsageError);
  SettingsLayer low, high;
  low.dim = 32;
  low.lr = 0.1;
  high.dim = 48;
  low.overlay(high);
  EXPECT_EQ(low.dim, 48);
  EXPECT_EQ(low.lr, 0.1);
  auto layer = layer_from_json(nlohmann::json::parse(R"({"strategies": ["prenorm", "geonorm"], "seeds": "4,5"})"));
  EXPECT_EQ(layer.strategies->size(), 2u);
  EXPECT_EQ(*layer.seeds, (std::vector<std::uint64_t>{4, 5}));
}
