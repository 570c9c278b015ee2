#pragma once

#include <array>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "ldgm/layout.hpp"
#include "ldgm/rng.hpp"

namespace ldgm {

/// Dense row-major square matrix used for transition kernels.
class Matrix {
 public:
  Matrix() = default;
  explicit Matrix(std::size_t n, double fill = 0.0) : n_(n), data_(n * n, fill) {}
  static Matrix identity(std::size_t n);

  std::size_t size() const { return n_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * n_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * n_, n_}; }

 private:
  std::size_t n_ = 0;
  std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);

enum class NoiseKind { Uniform, DiscretizedGaussian, BandDiagonal };

struct NoiseType {
  NoiseKind kind = NoiseKind::Uniform;
  /// Band half-width for BandDiagonal; 0 selects max(1, round(0.05 K)).
  int band_half_width = 0;

  static NoiseType uniform() { return {NoiseKind::Uniform, 0}; }
  static NoiseType gaussian() { return {NoiseKind::DiscretizedGaussian, 0}; }
  static NoiseType band(int v = 0) { return {NoiseKind::BandDiagonal, v}; }
  bool operator==(const NoiseType&) const = default;
};

std::string_view to_string(NoiseKind kind);
NoiseType noise_from_string(std::string_view name);

/// Linear schedules evaluated as end * t / T for t in [1, T].
struct Schedule {
  int steps = 100;
  double category_beta_end = 0.02;  // divided by K_c when used
  double category_gamma_end = 0.032;
  double geometry_sigma_end = 0.02;
  double geometry_gamma_end = 0.032;

  double gamma(AttributeKind kind, int t) const;
  /// Off-diagonal replacement probability for uniform noise.
  double beta(AttributeKind kind, int t, int vocab) const;
  /// Gaussian / band width parameter.
  double sigma(AttributeKind kind, int t) const;
  bool operator==(const Schedule&) const = default;
};

/// Column-stochastic (K+1)x(K+1) kernel, [Q]_{ij} = q(x_t = i | x_{t-1} = j),
/// absorbing MASK at index K.
Matrix build_transition_matrix(const NoiseType& noise, AttributeKind kind, int t, const Schedule& sched, int vocab);

/// Uniform-noise matrix from explicit (beta, gamma).
Matrix uniform_transition_matrix(int vocab, double beta, double gamma);

class TransitionStack {
 public:
  /// Q-bar_t = Q_t * Q-bar_{t-1}, Q-bar_0 = I.
  static TransitionStack accumulate(std::vector<Matrix> steps);

  int vocab() const { return vocab_; }
  int steps() const { return static_cast<int>(steps_.size()); }
  /// Q_t for t in [1, T].
  const Matrix& step(int t) const;
  /// Q-bar_t for t in [0, T].
  const Matrix& cumulative(int t) const;

 private:
  int vocab_ = 0;
  std::vector<Matrix> steps_;
  std::vector<Matrix> cumulative_;
};

TransitionStack build_stack(const NoiseType& noise, AttributeKind kind, const Schedule& sched, int vocab);

/// Column x0 of Q-bar_t.
std::vector<double> forward_marginal(int x0, int t, const TransitionStack& stack);
int sample_forward(int x0, int t, const TransitionStack& stack, Rng& rng);
/// q(x_{t-1} | x_t, x0).
std::vector<double> posterior(int x_t, int x0, int t, const TransitionStack& stack);

/// All posteriors for one observed x_t: column x0 holds q(x_{t-1} | x_t, x0)
/// for every x0 with Q-bar_t[x_t, x0] > 0; impossible columns are zero and
/// flagged in `possible`.
struct PosteriorTable {
  int vocab = 0;                  // K; rows are K + 1
  std::vector<double> values;     // (K + 1) x K row-major
  std::vector<std::uint8_t> possible;
  double at(int k, int x0) const { return values[static_cast<std::size_t>(k) * vocab + x0]; }
};
PosteriorTable posterior_table(int x_t, int t, const TransitionStack& stack);

// ---------------------------------------------------------------------------
// Corruption planning

enum class StrategyKind { ParallelDecoupled, SequentialDecoupled, PartialDecoupled, NonDecoupled };

struct CorruptionStrategy {
  StrategyKind kind = StrategyKind::ParallelDecoupled;
  double overlap = 0.3;  // PartialDecoupled only, in (0, 1)
  bool operator==(const CorruptionStrategy&) const = default;
};

enum class DecouplingLevel { None, Element, Token, TypeGroup };

std::string_view to_string(StrategyKind kind);
std::string_view to_string(DecouplingLevel level);
CorruptionStrategy strategy_from_string(std::string_view name);
DecouplingLevel level_from_string(std::string_view name);

/// Semantic attribute groups: category, position (x, y), size (w, h).
enum class AttributeGroup { Category, Position, Size };
AttributeGroup group_of(AttributeKind kind);

/// Largest master timestep drawn by a strategy (T, 1.6T-style, 3T).
int master_range(const CorruptionStrategy& strategy, int steps);
/// Per-group timestep from a master timestep, clipped to [1, T].
int window_timestep(const CorruptionStrategy& strategy, AttributeGroup group, int master, int steps);

struct CorruptionPlan {
  std::vector<std::uint8_t> selected;
  std::vector<int> timestep;  // 0 when unselected, else in [1, T]
};

CorruptionPlan plan_corruption(const TokenSequence& seq, const CorruptionStrategy& strategy, DecouplingLevel level,
                               double select_prob, int steps, Rng& rng);

/// One transition stack per attribute kind (shared when identical).
struct StackSet {
  std::array<std::shared_ptr<const TransitionStack>, kNumKinds> per_kind;
  const TransitionStack& operator[](AttributeKind kind) const { return *per_kind[index_of(kind)]; }
  int steps() const { return per_kind[0]->steps(); }
};

struct NoiseAssignment {
  NoiseType category = NoiseType::uniform();
  NoiseType geometry = NoiseType::gaussian();
  bool operator==(const NoiseAssignment&) const = default;
};

StackSet build_stacks(const QuantizerConfig& quantizer, const Schedule& sched, const NoiseAssignment& noise);

/// Selected tokens are resampled at their planned t and flagged as corrupted;
/// unselected tokens are kept and flagged precise.
TokenSequence corrupt(const TokenSequence& seq, const CorruptionPlan& plan, const StackSet& stacks, Rng& rng);

/// A uniform sample of round(fraction * N(N-1)) ordered pairs of the derived
/// mixed-mode relation map.
RelationMap sample_relations(const Layout& layout, const QuantizerConfig& cfg, double fraction, Rng& rng);

}  // namespace ldgm
