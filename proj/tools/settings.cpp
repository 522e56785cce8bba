#include "settings.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include "geonorm/errors.hpp"

#ifndef GEONORM_DEFAULT_CORPUS
#define GEONORM_DEFAULT_CORPUS "data/moby_dick.txt"
#endif

namespace geonorm::cli {
namespace {

template <typename T>
void take(std::optional<T>& dst, const std::optional<T>& src) {
  if (src) dst = src;
}

template <typename T>
std::optional<T> read(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::uint64_t parse_u64(const std::string& text, const char* what) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw UsageError(std::string(what) + ": '" + text + "' is not an unsigned integer");
  }
  return v;
}

}  // namespace

void SettingsLayer::overlay(const SettingsLayer& top) {
  take(corpus, top.corpus);
  take(strategy, top.strategy);
  take(decay, top.decay);
  take(clamp, top.clamp);
  take(dim, top.dim);
  take(layers, top.layers);
  take(heads, top.heads);
  take(seq, top.seq);
  take(steps, top.steps);
  take(batch, top.batch);
  take(lr, top.lr);
  take(beta1, top.beta1);
  take(beta2, top.beta2);
  take(eps, top.eps);
  take(seed, top.seed);
  take(eval_every, top.eval_every);
  take(eval_batches, top.eval_batches);
  take(precision, top.precision);
  take(out, top.out);
  take(strategies, top.strategies);
  take(seeds, top.seeds);
  take(jobs, top.jobs);
}

SettingsLayer layer_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  static const std::vector<std::string> known = {
      "corpus", "strategy", "decay",      "clamp",        "dim",       "layers", "heads", "seq",
      "steps",  "batch",    "lr",         "beta1",        "beta2",     "eps",    "seed",  "eval_every",
      "eval_batches", "precision", "out", "strategies",   "seeds",     "jobs"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw UsageError("unknown config key '" + key + "'");
    }
  }
  SettingsLayer s;
  s.corpus = read<std::string>(j, "corpus");
  s.strategy = read<std::string>(j, "strategy");
  s.decay = read<std::string>(j, "decay");
  s.clamp = read<double>(j, "clamp");
  s.dim = read<int>(j, "dim");
  s.layers = read<int>(j, "layers");
  s.heads = read<int>(j, "heads");
  s.seq = read<int>(j, "seq");
  s.steps = read<int>(j, "steps");
  s.batch = read<int>(j, "batch");
  s.lr = read<double>(j, "lr");
  s.beta1 = read<double>(j, "beta1");
  s.beta2 = read<double>(j, "beta2");
  s.eps = read<double>(j, "eps");
  s.seed = read<std::uint64_t>(j, "seed");
  s.eval_every = read<int>(j, "eval_every");
  s.eval_batches = read<int>(j, "eval_batches");
  s.precision = read<std::string>(j, "precision");
  s.out = read<std::string>(j, "out");
  s.jobs = read<int>(j, "jobs");
  // Lists may be arrays or comma-separated strings.
  if (j.contains("strategies")) {
    const auto& v = j.at("strategies");
    s.strategies = v.is_string() ? split_list(v.get<std::string>())
                                 : *read<std::vector<std::string>>(j, "strategies");
  }
  if (j.contains("seeds")) {
    const auto& v = j.at("seeds");
    s.seeds = v.is_string() ? parse_seed_list(v.get<std::string>())
                            : *read<std::vector<std::uint64_t>>(j, "seeds");
  }
  return s;
}

SettingsLayer load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  try {
    return layer_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& item : split_list(text)) seeds.push_back(parse_u64(item, "seed"));
  return seeds;
}

std::uint64_t default_seed(std::uint64_t fallback) {
  const char* env = std::getenv(kSeedEnv);
  if (env == nullptr || *env == '\0') return fallback;
  return parse_u64(env, kSeedEnv);
}

RunSettings resolve_run(const SettingsLayer& s, const std::string& strategy) {
  RunSettings run;
  run.corpus = s.corpus.value_or(GEONORM_DEFAULT_CORPUS);
  run.out = s.out.value_or("runs");

  GeoNormParams geo;
  if (s.decay) {
    try {
      geo.decay = parse_decay(*s.decay);
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
  }
  if (s.clamp) geo.clamp = *s.clamp;
  try {
    run.model.strategy = parse_strategy(strategy, geo);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (strategy != "geonorm" && (s.decay || s.clamp)) {
    throw UsageError("--decay and --clamp apply only to --strategy geonorm (got " + strategy + ")");
  }

  ModelConfig& m = run.model;
  m.dim = s.dim.value_or(m.dim);
  m.layers = s.layers.value_or(m.layers);
  m.heads = s.heads.value_or(m.heads);
  m.seq_len = s.seq.value_or(m.seq_len);

  TrainConfig& t = run.train;
  t.steps = s.steps.value_or(t.steps);
  t.batch = s.batch.value_or(t.batch);
  t.lr = s.lr.value_or(t.lr);
  t.beta1 = s.beta1.value_or(t.beta1);
  t.beta2 = s.beta2.value_or(t.beta2);
  t.eps = s.eps.value_or(t.eps);
  t.seed = s.seed ? *s.seed : default_seed(t.seed);
  t.eval_every = s.eval_every.value_or(t.eval_every);
  t.eval_batches = s.eval_batches.value_or(t.eval_batches);
  // Training runs default to narrow precision; checks run wide.
  t.precision = Precision::kNarrow;
  try {
    if (s.precision) t.precision = parse_precision(*s.precision);
    m.validate();
    t.validate();
  } catch (const std::logic_error& e) {
    throw UsageError(e.what());
  }
  return run;
}

nlohmann::json to_json(const RunSettings& run) {
  const ModelConfig& m = run.model;
  const TrainConfig& t = run.train;
  nlohmann::json model = {
      {"vocab", m.vocab},     {"dim", m.dim},         {"heads", m.heads},
      {"layers", m.layers},   {"seq_len", m.seq_len}, {"strategy", std::string(strategy_name(m.strategy))},
      {"norm_gain", m.norm_gain},
  };
  if (const auto* geo = std::get_if<GeoNorm>(&m.strategy)) {
    model["geonorm"] = {{"decay", std::string(to_string(geo->params.decay))},
                        {"clamp", geo->params.clamp},
                        {"scale_init", geo->params.scale},
                        {"bias_init", geo->params.bias}};
  }
  return {
      {"corpus", run.corpus.string()},
      {"model", model},
      {"train",
       {{"steps", t.steps},
        {"batch", t.batch},
        {"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"seed", t.seed},
        {"eval_every", t.eval_every},
        {"eval_batches", t.eval_batches},
        {"precision", std::string(to_string(t.precision))}}},
  };
}

}  // namespace geonorm::cli
