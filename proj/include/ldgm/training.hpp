#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldgm/denoiser.hpp"
#include "ldgm/diffusion.hpp"
#include "ldgm/optim.hpp"

namespace ldgm {

struct TrainConfig {
  Schedule schedule;                 // schedule.steps is T
  double lambda = 0.1;
  int batch_size = 128;
  double learning_rate = 5e-5;
  double warmup_proportion = 0.1;
  long total_steps = 10000;
  std::uint64_t seed = 0;
  CorruptionStrategy strategy;
  DecouplingLevel level = DecouplingLevel::TypeGroup;
  NoiseAssignment noise;
  double select_prob = 0.9;
  /// Fraction of training sequences carrying a sampled relation subset.
  double relation_prob = 0.5;
  double relation_fraction = 0.1;
  double clip_norm = 1.0;
  long validation_every = 500;
  int validation_batches = 4;
  // Trunk shape; vocabulary sizes come from the corpus quantizer.
  int d_model = 256;
  int n_heads = 8;
  int n_layers = 8;
  int d_ffn = 2048;

  void validate() const;
  nn::AdamWConfig optimizer() const;
  ModelConfig model(const QuantizerConfig& quantizer) const;
  /// Desk-scale settings used by the acceptance run and the ablation sweep.
  static TrainConfig toy();
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Fields absent from `doc` keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& doc);

struct LossBreakdown {
  double l_vlb = 0.0;
  double l_rec = 0.0;
  double l_total = 0.0;
  double l_prior = 0.0;  // D_KL(q(x_T | x0) || p(x_T)), mean over tokens; not differentiated
  long count_t0 = 0;
  long count_t1 = 0;
  long count_tgt1 = 0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

/// Per-token loss on a clean-value distribution `p` (size K).
///   t = 0: -log p[x0]
///   t = 1: -log p(x0 | x1), the mixture at x0
///   t > 1: KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t))
/// When `grad` is non-null it receives d loss / d p.
double token_loss(std::span<const double> p, int x0, int x_t, int t, const TransitionStack& stack,
                  std::vector<double>* grad = nullptr);

/// KL(q(x_T | x0) || p(x_T)) with the reference prior p(x_T) = Q-bar_T applied to a uniform x0.
double prior_kl(int x0, const TransitionStack& stack);

struct LossResult {
  nn::Var total;  // 1x1, differentiable in the model output
  LossBreakdown breakdown;
};

/// Loss over a batch: the sums per case are divided by the total token count,
/// l_total = l_vlb + lambda * l_rec.
LossResult compute_loss(nn::Graph& g, std::span<const TokenSequence> clean, std::span<const TokenSequence> corrupted,
                        std::span<const CorruptionPlan> plans, const DenoiserForward& out, const StackSet& stacks,
                        double lambda);

/// Tokenized, corrupted training examples for one batch. Each sequence uses
/// its own stream derived from (seed, step, index).
struct PreparedBatch {
  std::vector<TokenSequence> clean;
  std::vector<TokenSequence> corrupted;
  std::vector<CorruptionPlan> plans;
};
PreparedBatch prepare_batch(std::span<const Layout> layouts, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                            const StackSet& stacks, std::uint64_t seed, long step);

/// plan -> corrupt -> forward -> loss -> backward -> AdamW update.
LossBreakdown train_step(std::span<const Layout> batch, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                         const StackSet& stacks, Denoiser& model, nn::AdamW& opt);

/// Loss without an update, on a batch prepared with the given stream index.
LossBreakdown evaluate_loss(std::span<const Layout> batch, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                            const StackSet& stacks, const Denoiser& model, long stream);

struct TrainLogEntry {
  long step = 0;
  LossBreakdown loss;
};

/// Owns the optimizer and corpus sampling for a training run. Batch indices
/// are drawn from a stream derived from (seed, step), so resuming from a
/// checkpoint continues the exact trajectory.
class Trainer {
 public:
  Trainer(TrainConfig cfg, QuantizerConfig quantizer, Denoiser& model);

  const TrainConfig& config() const { return cfg_; }
  const StackSet& stacks() const { return stacks_; }
  nn::AdamW& optimizer() { return opt_; }
  long step() const { return opt_.steps_taken(); }

  std::vector<Layout> sample_batch(std::span<const Layout> corpus, long step) const;
  LossBreakdown step_on(std::span<const Layout> corpus);
  /// Mean validation loss over a fixed set of batches.
  LossBreakdown validate(std::span<const Layout> corpus) const;

  struct Callbacks {
    std::ostream* log = nullptr;                                // JSON lines
    std::function<void(long step, const LossBreakdown&)> on_validation;
    std::function<void(long step)> on_step;
  };
  /// Runs until total_steps; returns per-step losses.
  std::vector<TrainLogEntry> fit(std::span<const Layout> train, std::span<const Layout> val, const Callbacks& cb);

 private:
  TrainConfig cfg_;
  QuantizerConfig quantizer_;
  Denoiser& model_;
  StackSet stacks_;
  nn::AdamW opt_;
};

}  // namespace ldgm
