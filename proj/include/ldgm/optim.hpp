#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ldgm/autograd.hpp"

namespace ldgm::nn {

struct AdamWConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  long warmup_steps = 1;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

/// AdamW with decoupled weight decay, bias correction and linear warmup.
class AdamW {
 public:
  AdamW(const ParameterStore& params, AdamWConfig cfg, Precision precision = Precision::F32);

  /// base * min(1, step / warmup) for the 1-based update number `step`.
  double learning_rate(long step) const;
  /// Applies update number steps_taken() + 1; returns the learning rate used.
  double step(ParameterStore& params);

  long steps_taken() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }

  // Moment accumulators in parameter registration order, for checkpoints.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps_taken(long steps) { steps_ = steps; }

 private:
  AdamWConfig cfg_;
  Precision precision_;
  long steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed() const;
  double worst() const;
};

/// Compares reverse-mode gradients of `loss` with central differences.
/// `loss` is evaluated in 64-bit graphs. Per entry the relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const std::function<Var(Graph&)>& loss, ParameterStore& params, double tolerance,
                           double eps = 1e-5, double floor = 1e-6);

}  // namespace ldgm::nn
