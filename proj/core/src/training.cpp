#include "geonorm/training.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <tuple>

#include "geonorm/errors.hpp"
#include "geonorm/ops.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace geonorm {

void TrainConfig::validate() const {
  if (steps < 0) throw ContractError("steps must be non-negative");
  if (batch < 1) throw ContractError("batch must be positive");
  if (!(lr > 0.0)) throw ContractError("lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ContractError("betas must lie strictly between 0 and 1");
  }
  if (!(eps > 0.0)) throw ContractError("eps must be positive");
  if (eval_every < 1) throw ContractError("eval_every must be positive");
  if (eval_batches < 1) throw ContractError("eval_batches must be positive");
}

Corpus split_corpus(std::vector<std::uint8_t> bytes, std::string source) {
  if (bytes.empty()) throw IoError("corpus '" + source + "' is empty");
  const std::size_t val = bytes.size() / 10;
  Corpus c;
  c.source = std::move(source);
  c.validation.assign(bytes.end() - static_cast<long>(val), bytes.end());
  bytes.resize(bytes.size() - val);
  c.train = std::move(bytes);
  return c;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading corpus '" + path.string() + "'");
  return split_corpus(std::move(bytes), path.string());
}

Batch sample_batch(std::span<const std::uint8_t> split, std::size_t seq_len, std::size_t batch,
                   std::mt19937_64& rng) {
  if (seq_len == 0) throw ContractError("sample_batch: seq_len must be positive");
  if (split.size() < seq_len + 1) {
    throw ContractError("sample_batch: split of " + std::to_string(split.size()) +
                        " bytes is shorter than seq_len + 1 = " + std::to_string(seq_len + 1));
  }
  Batch b;
  b.batch = batch;
  b.seq = seq_len;
  b.inputs.resize(batch * seq_len);
  b.targets.resize(batch * seq_len);
  b.offsets.resize(batch);
  std::uniform_int_distribution<std::size_t> start(0, split.size() - seq_len - 1);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t o = start(rng);
    b.offsets[i] = o;
    for (std::size_t t = 0; t < seq_len; ++t) {
      b.inputs[i * seq_len + t] = split[o + t];
      b.targets[i * seq_len + t] = split[o + t + 1];
    }
  }
  return b;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
    state.step = 0;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    DenseTensor& m = state.m[i];
    DenseTensor& v = state.v[i];
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p.value[j] = round_to(config.precision, p.value[j] - config.lr * m_hat / (std::sqrt(v_hat) + config.eps));
    }
  }
}

std::string_view to_string(Split split) { return split == Split::kTrain ? "train" : "val"; }

void LossLog::append(LossRecord record) {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->split == record.split && it->seed == record.seed && it->strategy == record.strategy) {
      if (record.step <= it->step) {
        throw ContractError("loss log steps must increase: step " + std::to_string(record.step) +
                            " after " + std::to_string(it->step));
      }
      break;
    }
  }
  records_.push_back(std::move(record));
}

std::vector<LossRecord> LossLog::select(Split split) const {
  std::vector<LossRecord> out;
  for (const auto& r : records_) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::optional<double> LossLog::last(Split split) const {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->split == split) return it->loss;
  }
  return std::nullopt;
}

std::string LossLog::to_csv() const {
  std::string out = "step,split,strategy,seed,loss\n";
  char buf[64];
  for (const auto& r : records_) {
    out += std::to_string(r.step);
    out += ',';
    out += to_string(r.split);
    out += ',';
    out += r.strategy;
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    std::snprintf(buf, sizeof(buf), "%.6f", r.loss);
    out += buf;
    out += '\n';
  }
  return out;
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write loss log '" + path.string() + "'");
  out << to_csv();
}

LossLog LossLog::parse_csv(std::string_view text) {
  LossLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line != "step,split,strategy,seed,loss") {
        throw ContractError("unexpected loss log header '" + line + "'");
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 5) throw ContractError("malformed loss log line '" + line + "'");
    LossRecord r;
    r.step = std::stol(fields[0]);
    if (fields[1] == "train") {
      r.split = Split::kTrain;
    } else if (fields[1] == "val") {
      r.split = Split::kValidation;
    } else {
      throw ContractError("unknown split '" + fields[1] + "'");
    }
    r.strategy = fields[2];
    r.seed = std::stoull(fields[3]);
    r.loss = std::strtod(fields[4].c_str(), nullptr);
    log.append(std::move(r));
  }
  return log;
}

double evaluate_loss(TransformerModel& model, std::span<const Batch> batches, Precision precision) {
  double total = 0.0;
  for (const Batch& b : batches) {
    Tape tape(precision);
    Var logits = model.forward(tape, b.inputs, b.batch, b.seq);
    total += cross_entropy(logits, b.targets).value().item();
  }
  return total / static_cast<double>(batches.size());
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

}  // namespace

namespace {

// Every step allocates and frees the same few hundred activation buffers, many
// above glibc's mmap threshold. Serving them from the heap instead avoids
// re-faulting fresh pages on every step.
void keep_large_buffers_in_heap() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum on 64-bit
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Corpus& corpus,
                  const TrainHooks& hooks) {
  keep_large_buffers_in_heap();
  model_config.validate();
  config.validate();
  if (model_config.vocab < kByteVocab) {
    throw ContractError("byte-level training needs vocab >= 256");
  }
  const auto seq = static_cast<std::size_t>(model_config.seq_len);
  const auto batch = static_cast<std::size_t>(config.batch);
  const std::string strategy(strategy_name(model_config.strategy));

  TransformerModel model(model_config, config.seed);
  const std::vector<Parameter*> params = model.parameters();
  AdamState adam;

  TrainResult result;
  result.parameter_count = model.parameter_count();

  auto batch_rng = stream(config.seed, 1);
  auto eval_rng = stream(config.seed, 2);
  std::vector<Batch> eval_set;
  for (int i = 0; i < config.eval_batches; ++i) {
    eval_set.push_back(sample_batch(corpus.validation, seq, batch, eval_rng));
  }

  auto log = [&](long step, Split split, double loss) {
    LossRecord r{step, split, strategy, config.seed, loss};
    if (hooks.on_record) hooks.on_record(r);
    result.log.append(std::move(r));
  };
  auto fail = [&](long step, std::string reason) {
    result.diverged = true;
    result.diverged_at_step = step;
    result.divergence_reason = std::move(reason);
  };
  auto evaluate = [&](long step) {
    const double loss = evaluate_loss(model, eval_set, config.precision);
    log(step, Split::kValidation, loss);
    result.final_val_loss = loss;
    if (!std::isfinite(loss)) fail(step, "non-finite validation loss");
  };

  evaluate(0);
  result.initial_val_loss = *result.final_val_loss;

  for (long step = 1; step <= config.steps && !result.diverged; ++step) {
    const Batch b = sample_batch(corpus.train, seq, batch, batch_rng);
    Tape tape(config.precision);
    Var loss = cross_entropy(model.forward(tape, b.inputs, b.batch, b.seq), b.targets);
    const double value = loss.value().item();
    log(step, Split::kTrain, value);
    result.final_train_loss = value;
    if (!std::isfinite(value)) {
      fail(step, "non-finite training loss");
      break;
    }
    model.zero_grad();
    tape.backward(loss);
    if (hooks.after_backward) hooks.after_backward(step, params);
    for (const Parameter* p : params) {
      if (!p->grad.all_finite()) {
        fail(step, "non-finite gradient in " + p->name);
        break;
      }
    }
    if (result.diverged) break;
    adam_step(params, adam, config);
    if (step % config.eval_every == 0 || step == config.steps) evaluate(step);
  }
  return result;
}

}  // namespace geonorm
