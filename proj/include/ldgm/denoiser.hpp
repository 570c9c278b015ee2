#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"
#include "ldgm/autograd.hpp"
#include "ldgm/diffusion.hpp"
#include "ldgm/layout.hpp"

namespace ldgm {

struct ModelConfig {
  int d_model = 256;
  int n_heads = 8;
  int n_layers = 8;
  int d_ffn = 2048;
  std::array<int, kNumKinds> vocab{};  // clean-value counts; embeddings have one extra MASK row
  int max_elements = 25;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  /// Desk-scale defaults: d=64, 2 layers, ffn 128.
  static ModelConfig toy(std::array<int, kNumKinds> vocab, int max_elements = 25);
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& doc);

/// Segment boundaries and token-pair relation labels for a batch of sequences.
/// A token pair takes the label of its parent elements; tokens of the same
/// element get "unavailable".
struct AttentionLayout {
  std::vector<std::size_t> offsets;                // size = sequences + 1
  std::vector<std::vector<std::uint8_t>> labels;   // per sequence, len x len
};
AttentionLayout attention_layout(std::span<const TokenSequence> batch);

/// Multi-head self-attention within each segment with additive relation
/// embeddings on both the query and key side:
///   e_ij = (q_i + Rq[r_ij]) . (k_j + Rk[r_ij]) / sqrt(d_head)
/// `rel_q` / `rel_k` are [9, d_head], shared across heads.
nn::Var relation_attention(nn::Graph& g, nn::Var q, nn::Var k, nn::Var v, nn::Var rel_q, nn::Var rel_k,
                           std::shared_ptr<const AttentionLayout> layout, int heads);

struct DenoiserForward {
  std::array<nn::Var, kNumKinds> log_probs{};      // [tokens of kind, K_kind]
  std::vector<std::pair<int, int>> slot;           // global token -> (kind, row)
  std::vector<std::size_t> offsets;                // sequence starts in global token order
};

/// Per sequence, per token: probability over that token's K clean values.
using TokenDistributions = std::vector<std::vector<double>>;

class Denoiser {
 public:
  Denoiser(ModelConfig cfg, std::uint64_t seed, nn::Precision precision = nn::Precision::F32);

  const ModelConfig& config() const { return cfg_; }
  nn::Precision precision() const { return precision_; }
  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }

  /// value_emb[kind][value] + kind_emb[kind] + position_emb[element] + flag_emb[flag].
  nn::Var embed_tokens(nn::Graph& g, std::span<const TokenSequence> batch);
  DenoiserForward forward(nn::Graph& g, std::span<const TokenSequence> batch);

  /// Gradient-free forward; safe to call concurrently.
  std::vector<TokenDistributions> predict(std::span<const TokenSequence> batch) const;

 private:
  void check_batch(std::span<const TokenSequence> batch) const;
  nn::Var p(nn::Graph& g, const std::string& name);

  ModelConfig cfg_;
  nn::Precision precision_;
  nn::ParameterStore params_;
  std::array<int, kNumKinds> value_offset_{};
};

/// p(x_{t-1} | x_t) = sum_x0 q(x_{t-1} | x_t, x0) p(x0), over the x0 that can
/// reach x_t; weights are renormalized over those components.
std::vector<double> reverse_distribution(std::span<const double> p_x0, int x_t, int t, const TransitionStack& stack);

}  // namespace ldgm
