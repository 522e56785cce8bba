#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geonorm/autodiff.hpp"
#include "geonorm/model.hpp"

namespace geonorm {

inline constexpr int kByteVocab = 256;

struct TrainConfig {
  int steps = 2000;
  int batch = 16;
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::uint64_t seed = 1234;
  int eval_every = 100;
  // Fixed validation batches averaged at every evaluation.
  int eval_batches = 8;
  Precision precision = Precision::kWide;

  void validate() const;
};

/// Raw bytes split deterministically: the last 10% (rounded down) is
/// validation, the rest is training data.
struct Corpus {
  std::string source;
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> validation;
};

// Throws IoError naming the path when the file is missing, unreadable or empty.
Corpus load_corpus(const std::filesystem::path& path);
Corpus split_corpus(std::vector<std::uint8_t> bytes, std::string source);

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;   // row-major (batch, seq)
  std::vector<int> targets;  // inputs shifted left by one
  std::vector<std::size_t> offsets;
};

/// `batch` windows of seq_len + 1 bytes with start offsets uniform over every
/// valid position. Throws ContractError if the split is too short.
Batch sample_batch(std::span<const std::uint8_t> split, std::size_t seq_len, std::size_t batch,
                   std::mt19937_64& rng);

struct AdamState {
  std::vector<DenseTensor> m;
  std::vector<DenseTensor> v;
  long step = 0;
};

/// Bias-corrected Adam update of every parameter from its current gradient.
void adam_step(std::span<Parameter* const> params, AdamState& state, const TrainConfig& config);

enum class Split { kTrain, kValidation };
std::string_view to_string(Split split);

struct LossRecord {
  long step = 0;
  Split split = Split::kTrain;
  std::string strategy;
  std::uint64_t seed = 0;
  double loss = 0.0;
};

/// Loss history of one or more runs. Steps must strictly increase within each
/// (strategy, seed, split) stream.
class LossLog {
 public:
  void append(LossRecord record);
  const std::vector<LossRecord>& records() const { return records_; }
  std::vector<LossRecord> select(Split split) const;
  std::optional<double> last(Split split) const;

  // Header "step,split,strategy,seed,loss"; loss with 6 decimals.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
  static LossLog parse_csv(std::string_view text);

 private:
  std::vector<LossRecord> records_;
};

struct TrainResult {
  LossLog log;
  bool diverged = false;
  long diverged_at_step = -1;
  std::string divergence_reason;
  double initial_val_loss = 0.0;
  std::optional<double> final_train_loss;
  std::optional<double> final_val_loss;
  std::size_t parameter_count = 0;
};

struct TrainHooks {
  // Runs after backward, before the optimizer reads the gradients.
  std::function<void(long step, std::span<Parameter* const> params)> after_backward;
  std::function<void(const LossRecord&)> on_record;
};

/// Train-split minibatch loss is logged every step; validation loss at step 0,
/// every eval_every steps and at the last step. A non-finite loss or gradient
/// stops the run and marks it diverged instead of throwing.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Corpus& corpus,
                  const TrainHooks& hooks = {});

/// Mean cross-entropy of the model over the given batches, without gradients.
double evaluate_loss(TransformerModel& model, std::span<const Batch> batches, Precision precision);

}  // namespace geonorm
