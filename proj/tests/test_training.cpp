#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "geonorm/errors.hpp"
#include "geonorm/training.hpp"

using namespace geonorm;

namespace {

Corpus text_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> letter('a', 'h');
  std::vector<std::uint8_t> bytes(n);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(letter(rng));
  return split_corpus(std::move(bytes), "synthetic");
}

ModelConfig tiny(const std::string& strategy) {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.layers = 1;
  c.seq_len = 8;
  c.strategy = parse_strategy(strategy);
  return c;
}

TrainConfig short_run(int steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 4;
  t.eval_every = 5;
  t.eval_batches = 2;
  return t;
}

}  // namespace

TEST(Corpus, SplitArithmetic) {
  Corpus c = split_corpus(std::vector<std::uint8_t>(1000, 7), "x");
  EXPECT_EQ(c.train.size(), 900u);
  EXPECT_EQ(c.validation.size(), 100u);
  EXPECT_THROW(split_corpus({}, "empty"), IoError);
}

TEST(Corpus, FileErrorsNameThePath) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto empty = dir / "geonorm_empty_corpus.txt";
  std::ofstream(empty).close();
  try {
    load_corpus(empty);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(empty.string()), std::string::npos);
  }
  EXPECT_THROW(load_corpus(dir / "geonorm_missing_corpus.txt"), IoError);
  std::filesystem::remove(empty);
}

TEST(SampleBatch, ShiftAndDeterminism) {
  Corpus c = text_corpus(500, 1);
  std::mt19937_64 a(5), b(5);
  Batch x = sample_batch(c.train, 16, 8, a), y = sample_batch(c.train, 16, 8, b);
  EXPECT_EQ(x.inputs, y.inputs);
  EXPECT_EQ(x.offsets, y.offsets);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t t = 0; t + 1 < 16; ++t) EXPECT_EQ(x.targets[i * 16 + t], x.inputs[i * 16 + t + 1]);
  std::vector<std::uint8_t> short_split(16);
  EXPECT_THROW(sample_batch(short_split, 16, 1, a), ContractError);
}

TEST(SampleBatch, OffsetsUniformOverValidStarts) {
  std::vector<std::uint8_t> split(30);
  const std::size_t seq = 9;
  // Every start whose window of seq + 1 bytes fits.
  std::vector<std::size_t> valid;
  for (std::size_t o = 0; o + seq + 1 <= split.size(); ++o) valid.push_back(o);
  std::vector<double> hist(split.size(), 0.0);
  std::mt19937_64 rng(123);
  const int draws = 100000;
  for (int i = 0; i < draws / 100; ++i)
    for (std::size_t o : sample_batch(split, seq, 100, rng).offsets) hist.at(o) += 1;
  double chi2 = 0.0;
  const double expected = double(draws) / valid.size();
  for (std::size_t o = 0; o < split.size(); ++o) {
    if (std::find(valid.begin(), valid.end(), o) == valid.end()) {
      EXPECT_EQ(hist[o], 0.0) << "offset " << o;
    } else {
      chi2 += (hist[o] - expected) * (hist[o] - expected) / expected;
    }
  }
  // 20 degrees of freedom; 45.31 is the 0.999 quantile.
  EXPECT_LT(chi2, 45.31);
}

TEST(Adam, HandExamples) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  Parameter p("p", DenseTensor::vector({2.0, -1.0}));
  p.grad = DenseTensor::vector({1.0, 1.0});
  Parameter* ps[] = {&p};
  AdamState st;
  adam_step(ps, st, cfg);
  EXPECT_NEAR(p.value[0], 2.0 - 1e-3, 1e-10);
  EXPECT_NEAR(p.value[1], -1.0 - 1e-3, 1e-10);

  Parameter q("q", DenseTensor::vector({0.5}));
  q.zero_grad();
  Parameter* qs[] = {&q};
  AdamState fresh;
  adam_step(qs, fresh, cfg);
  EXPECT_EQ(q.value[0], 0.5);
}

TEST(Adam, IdenticalGradientSequencesGiveIdenticalParameters) {
  TrainConfig cfg;
  Parameter a("a", DenseTensor::vector({0.1, 0.2, 0.3})), b = a;
  AdamState sa, sb;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int step = 0; step < 20; ++step) {
    a.grad = DenseTensor::vector({n(rng), n(rng), n(rng)});
    b.grad = a.grad;
    Parameter* pa[] = {&a};
    Parameter* pb[] = {&b};
    adam_step(pa, sa, cfg);
    adam_step(pb, sb, cfg);
  }
  EXPECT_EQ(a.value, b.value);
}

TEST(LossLog, CsvRoundTripAndOrdering) {
  LossLog log;
  log.append({0, Split::kValidation, "geonorm", 3, 5.5});
  log.append({1, Split::kTrain, "geonorm", 3, 5.25});
  log.append({2, Split::kTrain, "geonorm", 3, 1.0 / 3.0});
  EXPECT_THROW(log.append({2, Split::kTrain, "geonorm", 3, 1.0}), ContractError);
  const std::string csv = log.to_csv();
  EXPECT_EQ(csv,
            "step,split,strategy,seed,loss\n0,val,geonorm,3,5.500000\n1,train,geonorm,3,5.250000\n"
            "2,train,geonorm,3,0.333333\n");
  EXPECT_EQ(LossLog::parse_csv(csv).to_csv(), csv);
  EXPECT_THROW(LossLog::parse_csv("step,loss\n"), ContractError);
}

TEST(Train, ZeroStepsLogsOnlyInitialEvaluation) {
  Corpus c = text_corpus(2000, 2);
  TrainResult r = train(tiny("prenorm"), short_run(0), c);
  ASSERT_EQ(r.log.records().size(), 1u);
  EXPECT_EQ(r.log.records()[0].step, 0);
  EXPECT_EQ(r.log.records()[0].split, Split::kValidation);
  EXPECT_FALSE(r.final_train_loss);
}

TEST(Train, LogSchedule) {
  Corpus c = text_corpus(2000, 2);
  TrainConfig cfg = short_run(12);
  TrainResult r = train(tiny("postnorm"), cfg, c);
  EXPECT_EQ(r.log.select(Split::kTrain).size(), 12u);
  std::vector<long> val_steps;
  for (const auto& rec : r.log.select(Split::kValidation)) val_steps.push_back(rec.step);
  EXPECT_EQ(val_steps, (std::vector<long>{0, 5, 10, 12}));
}

TEST(Train, SameSeedGivesBitwiseIdenticalLogs) {
  Corpus c = text_corpus(3000, 3);
  for (Precision p : {Precision::kWide, Precision::kNarrow}) {
    TrainConfig cfg = short_run(10);
    cfg.precision = p;
    auto a = train(tiny("geonorm"), cfg, c), b = train(tiny("geonorm"), cfg, c);
    EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
    for (std::size_t i = 0; i < a.log.records().size(); ++i) {
      EXPECT_EQ(a.log.records()[i].loss, b.log.records()[i].loss);
    }
    cfg.seed += 1;
    EXPECT_NE(train(tiny("geonorm"), cfg, c).log.to_csv(), a.log.to_csv());
  }
}

TEST(Train, InjectedInfiniteGradientMarksDivergence) {
  Corpus c = text_corpus(2000, 4);
  TrainHooks hooks;
  hooks.after_backward = [](long step, std::span<Parameter* const> params) {
    if (step == 3) params[0]->grad[0] = std::numeric_limits<double>::infinity();
  };
  TrainResult r = train(tiny("geonorm"), short_run(10), c, hooks);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.diverged_at_step, 3);
  EXPECT_NE(r.divergence_reason.find("gradient"), std::string::npos);
  EXPECT_EQ(r.log.select(Split::kTrain).back().step, 3);
}

TEST(Train, InitialLossNearUniform) {
  Corpus c = text_corpus(4000, 5);
  for (const auto& name : all_strategy_names()) {
    EXPECT_NEAR(train(tiny(name), short_run(0), c).initial_val_loss, std::log(256.0), 0.1) << name;
  }
}

TEST(Train, ConstantCorpusIsLearnedAlmostPerfectly) {
  Corpus c = split_corpus(std::vector<std::uint8_t>(2000, 'z'), "constant");
  TrainConfig cfg = short_run(150);
  cfg.lr = 1e-2;
  cfg.eval_every = 50;
  for (const char* name : {"prenorm", "geonorm"}) {
    TrainResult r = train(tiny(name), cfg, c);
    ASSERT_FALSE(r.diverged) << name;
    EXPECT_LT(*r.final_val_loss, 0.05) << name;
  }
}

TEST(Train, NarrowTracksWide) {
  Corpus c = text_corpus(3000, 6);
  TrainConfig cfg = short_run(20);
  auto wide = train(tiny("sandwichnorm"), cfg, c);
  cfg.precision = Precision::kNarrow;
  auto narrow = train(tiny("sandwichnorm"), cfg, c);
  EXPECT_NEAR(*narrow.final_val_loss, *wide.final_val_loss, 1e-3);
}
