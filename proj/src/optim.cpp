#include "ldgm/optim.hpp"

#include <algorithm>
#include <cmath>

namespace ldgm::nn {

AdamW::AdamW(const ParameterStore& params, AdamWConfig cfg, Precision precision) : cfg_(cfg), precision_(precision) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.rows(), p.value.cols());
    v_.emplace_back(p.value.rows(), p.value.cols());
  }
}

double AdamW::learning_rate(long step) const {
  const long warmup = std::max(1L, cfg_.warmup_steps);
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
  return cfg_.learning_rate * frac;
}

double AdamW::step(ParameterStore& params) {
  ++steps_;
  const double lr = learning_rate(steps_);
  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    const double norm = params.grad_norm();
    if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  std::size_t idx = 0;
  for (auto& p : params) {
    auto& m = m_[idx];
    auto& v = v_[idx];
    ++idx;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] * clip_scale;
      m[i] = round_to(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g, precision_);
      v[i] = round_to(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g, precision_);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double w = p.value[i] * (1.0 - lr * cfg_.weight_decay);
      w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      p.value[i] = round_to(w, precision_);
    }
  }
  return lr;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(),
                     [this](const GradCheckEntry& e) { return e.max_relative_error < tolerance; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_relative_error);
  return w;
}

GradCheckReport grad_check(const std::function<Var(Graph&)>& loss, ParameterStore& params, double tolerance,
                           double eps, double floor) {
  params.zero_grad();
  {
    Graph g(Precision::F64, true);
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph g(Precision::F64, false);
    return g.value(loss(g))[0];
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& p : params) {
    GradCheckEntry entry{p.name, 0.0};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = evaluate();
      p.value[i] = saved - eps;
      const double down = evaluate();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      entry.max_relative_error = std::max(entry.max_relative_error, std::abs(analytic - numeric) / denom);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ldgm::nn
