#include "geonorm/model.hpp"

#include <cmath>
#include <random>

#include "geonorm/errors.hpp"
#include "geonorm/ops.hpp"

namespace geonorm {
namespace {

constexpr double kInitStd = 0.02;

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

DenseTensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  DenseTensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Linear make_linear(const std::string& name, std::size_t in, std::size_t out, double stddev,
                   std::mt19937_64& rng) {
  return Linear{Parameter(name + ".weight", normal_tensor({in, out}, stddev, rng)),
                Parameter(name + ".bias", DenseTensor({out}))};
}

std::size_t norm_sites(const NormStrategy& strategy) {
  return std::visit(Overloaded{[](const SandwichNorm&) -> std::size_t { return 4; },
                               [](const GeoNorm&) -> std::size_t { return 0; },
                               [](const auto&) -> std::size_t { return 2; }},
                    strategy);
}

}  // namespace

std::string_view strategy_name(const NormStrategy& strategy) {
  return std::visit(Overloaded{[](const PostNorm&) { return std::string_view("postnorm"); },
                               [](const PreNorm&) { return std::string_view("prenorm"); },
                               [](const DeepNorm&) { return std::string_view("deepnorm"); },
                               [](const SandwichNorm&) { return std::string_view("sandwichnorm"); },
                               [](const GeoNorm&) { return std::string_view("geonorm"); }},
                    strategy);
}

NormStrategy parse_strategy(std::string_view name, const GeoNormParams& geo) {
  if (name == "postnorm") return PostNorm{};
  if (name == "prenorm") return PreNorm{};
  if (name == "deepnorm") return DeepNorm{};
  if (name == "sandwichnorm") return SandwichNorm{};
  if (name == "geonorm") {
    geo.validate();
    return GeoNorm{geo};
  }
  throw ContractError("unknown strategy '" + std::string(name) +
                      "' (expected postnorm|prenorm|deepnorm|sandwichnorm|geonorm)");
}

const std::vector<std::string>& all_strategy_names() {
  static const std::vector<std::string> names = {"postnorm", "prenorm", "deepnorm",
                                                 "sandwichnorm", "geonorm"};
  return names;
}

void ModelConfig::validate() const {
  if (vocab < 1) throw ContractError("vocab must be positive");
  if (dim < 1 || heads < 1) throw ContractError("dim and heads must be positive");
  if (dim % heads != 0) {
    throw ContractError("dim " + std::to_string(dim) + " is not divisible by heads " +
                        std::to_string(heads));
  }
  if (layers < 1) throw ContractError("layers must be at least 1");
  if (seq_len < 1) throw ContractError("seq_len must be at least 1");
  if (const auto* g = std::get_if<GeoNorm>(&strategy)) g->params.validate();
}

Var Linear::forward(Var x) {
  Tape& tape = x.tape();
  return linear(x, tape.parameter(weight), tape.parameter(bias));
}

Var causal_self_attention(Var x, AttentionWeights& w) {
  if (x.value().rank() != 3) {
    throw DimensionError("attention expects (batch, seq, dim), got " + to_string(x.shape()));
  }
  const std::size_t dim = x.shape()[2];
  const auto heads = static_cast<std::size_t>(w.heads);
  if (heads == 0 || dim % heads != 0 || w.query.weight.value.dim(0) != dim) {
    throw DimensionError("attention weights do not match input " + to_string(x.shape()));
  }
  Var context = causal_attention(w.query.forward(x), w.key.forward(x), w.value.forward(x), heads);
  return w.output.forward(context);
}

Var ffn(Var x, FfnWeights& w) { return w.down.forward(gelu(w.up.forward(x))); }

double deepnorm_residual_scale(int layers) { return std::pow(2.0 * layers, 0.25); }

double deepnorm_init_scale(int layers) { return std::pow(8.0 * layers, -0.25); }

Var block_forward(Var x, LayerContext ctx, const NormStrategy& strategy, BlockWeights& w) {
  auto norm = [&](std::size_t site, Var v) { return w.norms.at(site).forward(v); };
  return std::visit(
      Overloaded{
          [&](const PostNorm&) {
            Var mid = norm(0, x + causal_self_attention(x, w.attention));
            return norm(1, mid + ffn(mid, w.ffn));
          },
          [&](const PreNorm&) {
            Var mid = x + causal_self_attention(norm(0, x), w.attention);
            return mid + ffn(norm(1, mid), w.ffn);
          },
          [&](const DeepNorm&) {
            const double beta = deepnorm_residual_scale(ctx.layer_total);
            Var mid = norm(0, scale(x, beta) + causal_self_attention(x, w.attention));
            return norm(1, scale(mid, beta) + ffn(mid, w.ffn));
          },
          [&](const SandwichNorm&) {
            Var mid = x + norm(1, causal_self_attention(norm(0, x), w.attention));
            return mid + norm(3, ffn(norm(2, mid), w.ffn));
          },
          [&](const GeoNorm&) {
            if (!w.attention_geo || !w.ffn_geo) {
              throw ContractError("GeoNorm block is missing its GeoNorm sites");
            }
            Var mid = w.attention_geo->forward(x, causal_self_attention(x, w.attention), ctx);
            return w.ffn_geo->forward(mid, ffn(mid, w.ffn), ctx);
          }},
      strategy);
}

Var model_forward(Tape& tape, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                  const ModelConfig& config, ModelWeights& weights) {
  if (tokens.size() != batch * seq) {
    throw DimensionError("model_forward: " + std::to_string(tokens.size()) +
                         " tokens for a (" + std::to_string(batch) + ", " + std::to_string(seq) +
                         ") batch");
  }
  if (seq == 0 || seq > static_cast<std::size_t>(config.seq_len)) {
    throw DimensionError("model_forward: sequence length " + std::to_string(seq) +
                         " outside [1, " + std::to_string(config.seq_len) + "]");
  }
  Var x = embedding(tape.parameter(weights.token_embedding), tokens, {batch, seq});
  std::vector<int> positions(seq);
  for (std::size_t t = 0; t < seq; ++t) positions[t] = static_cast<int>(t);
  x = x + embedding(tape.parameter(weights.position_embedding), positions, {seq});

  // GeoNorm moves on a sphere; put the embeddings on the radius sqrt(D) one first.
  if (weights.input_norm) x = weights.input_norm->forward(x);

  for (std::size_t k = 0; k < weights.blocks.size(); ++k) {
    const LayerContext ctx{static_cast<int>(k), config.layers};
    x = block_forward(x, ctx, config.strategy, weights.blocks[k]);
  }
  x = weights.final_norm.forward(x);
  return weights.head.forward(x);
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto dim = static_cast<std::size_t>(config.dim);
  const auto vocab = static_cast<std::size_t>(config.vocab);
  const bool deep = std::holds_alternative<DeepNorm>(config.strategy);
  const double sub_std = deep ? kInitStd * deepnorm_init_scale(config.layers) : kInitStd;

  ModelWeights w;
  w.token_embedding = Parameter("token_embedding", normal_tensor({vocab, dim}, kInitStd, rng));
  w.position_embedding = Parameter(
      "position_embedding",
      normal_tensor({static_cast<std::size_t>(config.seq_len), dim}, kInitStd, rng));
  for (int k = 0; k < config.layers; ++k) {
    const std::string p = "blocks." + std::to_string(k);
    BlockWeights b;
    b.attention.query = make_linear(p + ".attn.query", dim, dim, kInitStd, rng);
    b.attention.key = make_linear(p + ".attn.key", dim, dim, kInitStd, rng);
    b.attention.value = make_linear(p + ".attn.value", dim, dim, sub_std, rng);
    b.attention.output = make_linear(p + ".attn.output", dim, dim, sub_std, rng);
    b.attention.heads = config.heads;
    b.ffn.up = make_linear(p + ".ffn.up", dim, 4 * dim, sub_std, rng);
    b.ffn.down = make_linear(p + ".ffn.down", 4 * dim, dim, sub_std, rng);
    for (std::size_t s = 0; s < norm_sites(config.strategy); ++s) {
      b.norms.emplace_back(dim, config.norm_gain, p + ".norm" + std::to_string(s));
    }
    if (const auto* g = std::get_if<GeoNorm>(&config.strategy)) {
      b.attention_geo.emplace(g->params, p + ".attn_geo");
      b.ffn_geo.emplace(g->params, p + ".ffn_geo");
    }
    w.blocks.push_back(std::move(b));
  }
  if (std::holds_alternative<GeoNorm>(config.strategy)) {
    w.input_norm.emplace(dim, config.norm_gain, "input_norm");
  }
  w.final_norm = RmsNormLayer(dim, config.norm_gain, "final_norm");
  w.head = make_linear("head", dim, vocab, kInitStd, rng);
  return w;
}

TransformerModel::TransformerModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), weights_(init_weights(config_, seed)) {}

Var TransformerModel::forward(Tape& tape, std::span<const int> tokens, std::size_t batch,
                              std::size_t seq) {
  return model_forward(tape, tokens, batch, seq, config_, weights_);
}

std::vector<Parameter*> TransformerModel::parameters() {
  std::vector<Parameter*> out;
  auto add_linear = [&](Linear& l) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  };
  auto add_all = [&](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  out.push_back(&weights_.token_embedding);
  out.push_back(&weights_.position_embedding);
  if (weights_.input_norm) add_all(weights_.input_norm->parameters());
  for (auto& b : weights_.blocks) {
    add_linear(b.attention.query);
    add_linear(b.attention.key);
    add_linear(b.attention.value);
    add_linear(b.attention.output);
    add_linear(b.ffn.up);
    add_linear(b.ffn.down);
    for (auto& n : b.norms) add_all(n.parameters());
    if (b.attention_geo) add_all(b.attention_geo->parameters());
    if (b.ffn_geo) add_all(b.ffn_geo->parameters());
  }
  add_all(weights_.final_norm.parameters());
  add_linear(weights_.head);
  return out;
}

std::size_t TransformerModel::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

void TransformerModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

}  // namespace geonorm
