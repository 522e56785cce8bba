#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geonorm/model.hpp"
#include "geonorm/training.hpp"

namespace geonorm::cli {

// Bad flags, bad config files, invalid combinations: exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One source of settings (a config file or the command line). Unset fields
/// fall through to the next source.
struct SettingsLayer {
  std::optional<std::string> corpus;
  std::optional<std::string> strategy;
  std::optional<std::string> decay;
  std::optional<double> clamp;
  std::optional<int> dim;
  std::optional<int> layers;
  std::optional<int> heads;
  std::optional<int> seq;
  std::optional<int> steps;
  std::optional<int> batch;
  std::optional<double> lr;
  std::optional<double> beta1;
  std::optional<double> beta2;
  std::optional<double> eps;
  std::optional<std::uint64_t> seed;
  std::optional<int> eval_every;
  std::optional<int> eval_batches;
  std::optional<std::string> precision;
  std::optional<std::string> out;
  std::optional<std::vector<std::string>> strategies;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<int> jobs;

  // Fields set in `top` replace ours.
  void overlay(const SettingsLayer& top);
};

/// Keys are the long flag names with '-' replaced by '_'. Unknown keys and
/// wrongly typed values are usage errors.
SettingsLayer layer_from_json(const nlohmann::json& j);
SettingsLayer load_config_file(const std::filesystem::path& path);

std::vector<std::string> split_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Fully resolved settings for one training run.
struct RunSettings {
  std::filesystem::path corpus;
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path out;
};

inline constexpr const char* kSeedEnv = "GEONORM_SEED";

// Seed default: GEONORM_SEED if set (must parse as an unsigned integer),
// otherwise `fallback`.
std::uint64_t default_seed(std::uint64_t fallback);

/// Applies built-in defaults beneath `s` and validates. Decay or clamp given
/// with a strategy other than geonorm is a usage error.
RunSettings resolve_run(const SettingsLayer& s, const std::string& strategy);

nlohmann::json to_json(const RunSettings& run);

}  // namespace geonorm::cli
