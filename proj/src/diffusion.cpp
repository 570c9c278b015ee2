#include "ldgm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "ldgm/error.hpp"

namespace ldgm {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Shape, "matrix dimension mismatch");
  const std::size_t n = a.size();
  Matrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

std::string_view to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::Uniform: return "Uniform";
    case NoiseKind::DiscretizedGaussian: return "DiscretizedGaussian";
    case NoiseKind::BandDiagonal: return "BandDiagonal";
  }
  return "?";
}

NoiseType noise_from_string(std::string_view name) {
  if (name == "Uniform") return NoiseType::uniform();
  if (name == "DiscretizedGaussian") return NoiseType::gaussian();
  if (name == "BandDiagonal") return NoiseType::band();
  throw Error(ErrorCode::Usage, "unknown noise type '" + std::string(name) + "'");
}

double Schedule::gamma(AttributeKind kind, int t) const {
  const double end = kind == AttributeKind::Category ? category_gamma_end : geometry_gamma_end;
  return end * t / steps;
}

double Schedule::beta(AttributeKind kind, int t, int vocab) const {
  if (kind == AttributeKind::Category) return category_beta_end / vocab * t / steps;
  return sigma(kind, t) / vocab;
}

double Schedule::sigma(AttributeKind, int t) const { return geometry_sigma_end * t / steps; }

Matrix uniform_transition_matrix(int vocab, double beta, double gamma) {
  const auto K = static_cast<std::size_t>(vocab);
  Matrix q(K + 1);
  const double diag = 1.0 - gamma - (vocab - 1) * beta;
  if (diag < 0.0)
    throw Error(ErrorCode::Schedule, "uniform noise leaves a negative diagonal (" + std::to_string(diag) + ")");
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t i = 0; i < K; ++i) q(i, j) = i == j ? diag : beta;
    q(K, j) = gamma;
  }
  q(K, K) = 1.0;
  return q;
}

Matrix build_transition_matrix(const NoiseType& noise, AttributeKind kind, int t, const Schedule& sched, int vocab) {
  if (vocab < 2) throw Error(ErrorCode::Schedule, "vocabulary must have at least 2 values");
  if (t < 1 || t > sched.steps)
    throw Error(ErrorCode::Schedule, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps) + "]");
  const double gamma = sched.gamma(kind, t);
  if (gamma < 0.0 || gamma > 1.0) throw Error(ErrorCode::Schedule, "gamma outside [0, 1]");

  if (noise.kind == NoiseKind::Uniform) return uniform_transition_matrix(vocab, sched.beta(kind, t, vocab), gamma);

  const auto K = static_cast<std::size_t>(vocab);
  const double sigma = sched.sigma(kind, t);
  if (!(sigma > 0.0)) throw Error(ErrorCode::Schedule, "sigma must be positive for t >= 1");
  Matrix q(K + 1);

  if (noise.kind == NoiseKind::DiscretizedGaussian) {
    const double denom = static_cast<double>((vocab - 1) * (vocab - 1)) * sigma;
    std::vector<double> kernel(K);  // kernel[d] = exp(-4 d^2 / ((K-1)^2 sigma))
    for (std::size_t d = 0; d < K; ++d) kernel[d] = std::exp(-4.0 * static_cast<double>(d * d) / denom);
    double normalizer = kernel[0];
    for (std::size_t d = 1; d < K; ++d) normalizer += 2.0 * kernel[d];
    for (std::size_t j = 0; j < K; ++j) {
      double off = 0.0;
      for (std::size_t i = 0; i < K; ++i) {
        if (i == j) continue;
        const std::size_t d = i > j ? i - j : j - i;
        q(i, j) = (1.0 - gamma) * kernel[d] / normalizer;
        off += q(i, j);
      }
      q(j, j) = 1.0 - gamma - off;
      q(K, j) = gamma;
    }
  } else {
    const int band = noise.band_half_width > 0
                         ? noise.band_half_width
                         : std::max(1, static_cast<int>(std::lround(0.05 * vocab)));
    const double beta = sigma / vocab;
    for (std::size_t j = 0; j < K; ++j) {
      double off = 0.0;
      for (std::size_t i = 0; i < K; ++i) {
        const auto d = static_cast<int>(i > j ? i - j : j - i);
        if (d == 0 || d > band) continue;
        q(i, j) = beta;
        off += beta;
      }
      q(j, j) = 1.0 - gamma - off;
      q(K, j) = gamma;
    }
  }
  for (std::size_t j = 0; j < K; ++j)
    if (q(j, j) < 0.0) throw Error(ErrorCode::Schedule, "noise parameters leave a negative diagonal");
  q(K, K) = 1.0;
  return q;
}

TransitionStack TransitionStack::accumulate(std::vector<Matrix> steps) {
  if (steps.empty()) throw Error(ErrorCode::Shape, "empty transition stack");
  TransitionStack stack;
  const std::size_t n = steps.front().size();
  stack.vocab_ = static_cast<int>(n) - 1;
  stack.cumulative_.reserve(steps.size() + 1);
  stack.cumulative_.push_back(Matrix::identity(n));
  for (const auto& q : steps) {
    if (q.size() != n) throw Error(ErrorCode::Shape, "transition matrices have different sizes");
    stack.cumulative_.push_back(q * stack.cumulative_.back());
  }
  stack.steps_ = std::move(steps);
  return stack;
}

const Matrix& TransitionStack::step(int t) const {
  if (t < 1 || t > steps()) throw Error(ErrorCode::Domain, "step index " + std::to_string(t) + " out of range");
  return steps_[static_cast<std::size_t>(t - 1)];
}

const Matrix& TransitionStack::cumulative(int t) const {
  if (t < 0 || t > steps()) throw Error(ErrorCode::Domain, "cumulative index " + std::to_string(t) + " out of range");
  return cumulative_[static_cast<std::size_t>(t)];
}

TransitionStack build_stack(const NoiseType& noise, AttributeKind kind, const Schedule& sched, int vocab) {
  std::vector<Matrix> steps;
  steps.reserve(static_cast<std::size_t>(sched.steps));
  for (int t = 1; t <= sched.steps; ++t) steps.push_back(build_transition_matrix(noise, kind, t, sched, vocab));
  return TransitionStack::accumulate(std::move(steps));
}

namespace {

void check_clean(int x0, const TransitionStack& stack) {
  if (x0 < 0 || x0 >= stack.vocab())
    throw Error(ErrorCode::Domain, "clean value " + std::to_string(x0) + " must lie in [0, K)");
}

}  // namespace

std::vector<double> forward_marginal(int x0, int t, const TransitionStack& stack) {
  check_clean(x0, stack);
  const auto& qbar = stack.cumulative(t);
  std::vector<double> out(qbar.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = qbar(i, static_cast<std::size_t>(x0));
  return out;
}

int sample_forward(int x0, int t, const TransitionStack& stack, Rng& rng) {
  if (t == 0) {
    check_clean(x0, stack);
    return x0;
  }
  const auto dist = forward_marginal(x0, t, stack);
  return rng.categorical(dist);
}

std::vector<double> posterior(int x_t, int x0, int t, const TransitionStack& stack) {
  check_clean(x0, stack);
  if (t < 1) throw Error(ErrorCode::Domain, "posterior requires t >= 1");
  const auto& q = stack.step(t);
  const auto& prev = stack.cumulative(t - 1);
  const auto n = q.size();
  if (x_t < 0 || static_cast<std::size_t>(x_t) >= n) throw Error(ErrorCode::Domain, "x_t out of range");
  const auto xt = static_cast<std::size_t>(x_t);
  const auto c = static_cast<std::size_t>(x0);
  const double denom = stack.cumulative(t)(xt, c);
  if (!(denom > 0.0))
    throw Error(ErrorCode::ImpossibleTransition,
                "x_t=" + std::to_string(x_t) + " unreachable from x0=" + std::to_string(x0) + " at t=" + std::to_string(t));
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = q(xt, k) * prev(k, c) / denom;
  return out;
}

PosteriorTable posterior_table(int x_t, int t, const TransitionStack& stack) {
  if (t < 1) throw Error(ErrorCode::Domain, "posterior requires t >= 1");
  const auto& q = stack.step(t);
  const auto& prev = stack.cumulative(t - 1);
  const auto& cur = stack.cumulative(t);
  const int K = stack.vocab();
  const auto n = static_cast<std::size_t>(K) + 1;
  if (x_t < 0 || x_t > K) throw Error(ErrorCode::Domain, "x_t out of range");
  const auto xt = static_cast<std::size_t>(x_t);

  PosteriorTable table;
  table.vocab = K;
  table.values.assign(n * static_cast<std::size_t>(K), 0.0);
  table.possible.assign(static_cast<std::size_t>(K), 0);
  const auto qrow = q.row(xt);
  const auto currow = cur.row(xt);
  for (std::size_t k = 0; k < n; ++k) {
    if (qrow[k] == 0.0) continue;
    const auto prow = prev.row(k);
    for (std::size_t c = 0; c < static_cast<std::size_t>(K); ++c) {
      if (currow[c] > 0.0) table.values[k * K + c] = qrow[k] * prow[c] / currow[c];
    }
  }
  for (std::size_t c = 0; c < static_cast<std::size_t>(K); ++c) table.possible[c] = currow[c] > 0.0;
  return table;
}

// ---------------------------------------------------------------------------

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::ParallelDecoupled: return "ParallelDecoupled";
    case StrategyKind::SequentialDecoupled: return "SequentialDecoupled";
    case StrategyKind::PartialDecoupled: return "PartialDecoupled";
    case StrategyKind::NonDecoupled: return "NonDecoupled";
  }
  return "?";
}

std::string_view to_string(DecouplingLevel level) {
  switch (level) {
    case DecouplingLevel::None: return "None";
    case DecouplingLevel::Element: return "Element";
    case DecouplingLevel::Token: return "Token";
    case DecouplingLevel::TypeGroup: return "TypeGroup";
  }
  return "?";
}

CorruptionStrategy strategy_from_string(std::string_view name) {
  for (auto kind : {StrategyKind::ParallelDecoupled, StrategyKind::SequentialDecoupled, StrategyKind::PartialDecoupled,
                    StrategyKind::NonDecoupled})
    if (to_string(kind) == name) return {kind, 0.3};
  throw Error(ErrorCode::Usage, "unknown corruption strategy '" + std::string(name) + "'");
}

DecouplingLevel level_from_string(std::string_view name) {
  for (auto level : {DecouplingLevel::None, DecouplingLevel::Element, DecouplingLevel::Token, DecouplingLevel::TypeGroup})
    if (to_string(level) == name) return level;
  throw Error(ErrorCode::Usage, "unknown decoupling level '" + std::string(name) + "'");
}

AttributeGroup group_of(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::Category: return AttributeGroup::Category;
    case AttributeKind::X:
    case AttributeKind::Y: return AttributeGroup::Position;
    default: return AttributeGroup::Size;
  }
}

namespace {

struct Offsets {
  int position;  // delay of the position window
  int category;  // delay of the category window
};

Offsets partial_offsets(const CorruptionStrategy& s, int steps) {
  const int pos = static_cast<int>(std::lround(s.overlap * steps));
  const int cat = static_cast<int>(std::lround(2.0 * s.overlap * steps));
  return {pos, cat};
}

}  // namespace

int master_range(const CorruptionStrategy& strategy, int steps) {
  switch (strategy.kind) {
    case StrategyKind::PartialDecoupled: return steps + partial_offsets(strategy, steps).category;
    case StrategyKind::SequentialDecoupled: return 3 * steps;
    default: return steps;
  }
}

int window_timestep(const CorruptionStrategy& strategy, AttributeGroup group, int master, int steps) {
  auto clip = [steps](int t) { return std::clamp(t, 1, steps); };
  switch (strategy.kind) {
    case StrategyKind::ParallelDecoupled:
    case StrategyKind::NonDecoupled: return clip(master);
    case StrategyKind::PartialDecoupled: {
      const auto off = partial_offsets(strategy, steps);
      switch (group) {
        case AttributeGroup::Category: return master < off.category ? 1 : clip(master - off.category);
        case AttributeGroup::Position:
          if (master < off.position) return 1;
          if (master > steps + off.position) return steps;
          return clip(master - off.position);
        case AttributeGroup::Size: return master < steps ? clip(master) : steps;
      }
      break;
    }
    case StrategyKind::SequentialDecoupled:
      switch (group) {
        case AttributeGroup::Category: return master < 2 * steps ? 1 : clip(master - 2 * steps);
        case AttributeGroup::Position:
          if (master <= steps) return 1;
          if (master < 2 * steps + 1) return clip(master - steps);
          return steps;
        case AttributeGroup::Size: return master < steps ? clip(master) : steps;
      }
      break;
  }
  return clip(master);
}

CorruptionPlan plan_corruption(const TokenSequence& seq, const CorruptionStrategy& strategy, DecouplingLevel level,
                               double select_prob, int steps, Rng& rng) {
  if (steps < 1) throw Error(ErrorCode::Domain, "T must be >= 1");
  const std::size_t n = seq.tokens.size();
  CorruptionPlan plan;
  plan.selected.resize(n);
  plan.timestep.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) plan.selected[i] = rng.bernoulli(select_prob) ? 1 : 0;

  // Clock key per token: tokens sharing a key share one master draw.
  auto clock_key = [&](std::size_t i) -> std::size_t {
    const auto& tok = seq.tokens[i];
    if (strategy.kind == StrategyKind::NonDecoupled) return 0;
    switch (level) {
      case DecouplingLevel::None: return 0;
      case DecouplingLevel::Element: return static_cast<std::size_t>(tok.element_index);
      case DecouplingLevel::Token: return i;
      case DecouplingLevel::TypeGroup:
        // Window strategies decouple groups through their windows over one master clock.
        if (strategy.kind != StrategyKind::ParallelDecoupled) return 0;
        return static_cast<std::size_t>(group_of(tok.kind));
    }
    return 0;
  };

  const int range = master_range(strategy, steps);
  std::map<std::size_t, int> masters;
  for (std::size_t i = 0; i < n; ++i) {
    const auto key = clock_key(i);
    auto it = masters.find(key);
    if (it == masters.end()) it = masters.emplace(key, rng.uniform_int(1, range)).first;
    if (plan.selected[i]) plan.timestep[i] = window_timestep(strategy, group_of(seq.tokens[i].kind), it->second, steps);
  }
  return plan;
}

StackSet build_stacks(const QuantizerConfig& quantizer, const Schedule& sched, const NoiseAssignment& noise) {
  StackSet set;
  std::vector<std::pair<int, std::shared_ptr<const TransitionStack>>> geometry_cache;
  set.per_kind[0] = std::make_shared<const TransitionStack>(
      build_stack(noise.category, AttributeKind::Category, sched, quantizer.category_count));
  for (std::size_t g = 1; g < kNumKinds; ++g) {
    const int vocab = quantizer.vocab(kAllKinds[g]);
    std::shared_ptr<const TransitionStack> stack;
    for (const auto& [k, s] : geometry_cache)
      if (k == vocab) stack = s;
    if (!stack) {
      stack = std::make_shared<const TransitionStack>(build_stack(noise.geometry, kAllKinds[g], sched, vocab));
      geometry_cache.emplace_back(vocab, stack);
    }
    set.per_kind[g] = std::move(stack);
  }
  return set;
}

TokenSequence corrupt(const TokenSequence& seq, const CorruptionPlan& plan, const StackSet& stacks, Rng& rng) {
  if (plan.selected.size() != seq.tokens.size() || plan.timestep.size() != seq.tokens.size())
    throw Error(ErrorCode::Shape, "corruption plan does not match the token sequence");
  TokenSequence out = seq;
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    auto& tok = out.tokens[i];
    if (!plan.selected[i]) {
      tok.condition = true;
      continue;
    }
    tok.value = sample_forward(seq.tokens[i].value, plan.timestep[i], stacks[tok.kind], rng);
    tok.condition = false;
  }
  return out;
}

RelationMap sample_relations(const Layout& layout, const QuantizerConfig& cfg, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error(ErrorCode::Domain, "relation fraction must be in [0, 1]");
  const RelationMap all = derive_relations(layout, cfg, RelationMode::Mixed);
  std::vector<std::pair<std::pair<int, int>, RelationLabel>> pairs(all.begin(), all.end());
  const auto n = static_cast<double>(layout.elements.size());
  const auto count = std::min(pairs.size(), static_cast<std::size_t>(std::llround(fraction * n * (n - 1.0))));
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i), static_cast<int>(pairs.size()) - 1));
    std::swap(pairs[i], pairs[j]);
  }
  RelationMap out;
  for (std::size_t i = 0; i < count; ++i) out.insert(pairs[i]);
  return out;
}

}  // namespace ldgm
