#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "geonorm/autodiff.hpp"
#include "geonorm/norm_layers.hpp"
#include "geonorm/schedules.hpp"

namespace geonorm {

struct PostNorm {};
struct PreNorm {};
struct DeepNorm {};
struct SandwichNorm {};
struct GeoNorm {
  GeoNormParams params;
};

/// Where and how a block normalizes its residual stream.
using NormStrategy = std::variant<PostNorm, PreNorm, DeepNorm, SandwichNorm, GeoNorm>;

// "postnorm", "prenorm", "deepnorm", "sandwichnorm", "geonorm".
std::string_view strategy_name(const NormStrategy& strategy);
NormStrategy parse_strategy(std::string_view name, const GeoNormParams& geo = {});
const std::vector<std::string>& all_strategy_names();

struct ModelConfig {
  int vocab = 256;
  int dim = 64;
  int heads = 4;
  int layers = 2;
  int seq_len = 64;
  NormStrategy strategy = PreNorm{};
  // Learned per-dimension gain on every RMSNorm site. Off by default.
  bool norm_gain = false;

  void validate() const;
};

/// y = x W + b with W stored (in, out).
struct Linear {
  Parameter weight;
  Parameter bias;

  Var forward(Var x);
};

struct AttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  int heads = 1;
};

struct FfnWeights {
  Linear up;    // dim -> 4 dim
  Linear down;  // 4 dim -> dim
};

struct BlockWeights {
  AttentionWeights attention;
  FfnWeights ffn;
  // RMSNorm sites in the order the block applies them (empty for GeoNorm).
  std::vector<RmsNormLayer> norms;
  std::optional<GeoNormLayer> attention_geo;
  std::optional<GeoNormLayer> ffn_geo;
};

struct ModelWeights {
  Parameter token_embedding;     // (vocab, dim)
  Parameter position_embedding;  // (seq_len, dim)
  std::vector<BlockWeights> blocks;
  RmsNormLayer final_norm{1};
  std::optional<RmsNormLayer> input_norm;  // GeoNorm only
  Linear head;                             // dim -> vocab
};

/// Multi-head scaled dot-product attention over x (batch, seq, dim) where
/// position t only attends to positions <= t.
Var causal_self_attention(Var x, AttentionWeights& w);

/// up-projection to 4 dim, GELU, down-projection.
Var ffn(Var x, FfnWeights& w);

/// Residual multiplier used by DeepNorm: (2T)^(1/4).
double deepnorm_residual_scale(int layers);
/// Init gain applied by DeepNorm to value/output/FFN weights: (8T)^(-1/4).
double deepnorm_init_scale(int layers);

/// One transformer layer: attention sub-step, then FFN sub-step, combined
/// with the residual stream according to strategy.
Var block_forward(Var x, LayerContext ctx, const NormStrategy& strategy, BlockWeights& w);

/// Embedding + positions, [input RMSNorm for GeoNorm], T blocks, final
/// RMSNorm, vocabulary head. tokens is row-major (batch, seq). Returns
/// logits (batch, seq, vocab).
Var model_forward(Tape& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                  const ModelConfig& config, ModelWeights& weights);

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

class TransformerModel {
 public:
  TransformerModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelWeights& weights() { return weights_; }

  Var forward(Tape& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq);
  std::vector<Parameter*> parameters();
  std::size_t parameter_count();
  void zero_grad();

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

}  // namespace geonorm
