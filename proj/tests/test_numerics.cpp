#include <cmath>

#include "doctest.h"
#include "ldgm/autograd.hpp"
#include "ldgm/optim.hpp"
#include "ldgm/rng.hpp"
#include "support/oracles.hpp"

using namespace ldgm;
using namespace ldgm::nn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double std = 0.5) { return random_normal(r, c, std, rng); }

}  // namespace

TEST_CASE("backward of simple sums") {
  ParameterStore params;
  auto& p = params.add("p", Tensor(1, 2, {1.0, 2.0}));
  {
    Graph g(Precision::F64);
    g.backward(g.sum(g.param(p)));
    CHECK(p.grad[0] == 1.0);
    CHECK(p.grad[1] == 1.0);
  }
  params.zero_grad();
  {
    Graph g(Precision::F64);
    const Var v = g.param(p);
    g.backward(g.sum(g.mul(v, v)));
    CHECK(p.grad[0] == 2.0);
    CHECK(p.grad[1] == 4.0);
  }
}

TEST_CASE("grad_check on a linear layer") {
  Rng rng(1, "linear");
  ParameterStore params;
  auto& w = params.add("w", random_tensor(4, 3, rng));
  auto& b = params.add("b", random_tensor(1, 3, rng));
  const Tensor x = random_tensor(5, 4, rng);
  auto loss = [&](Graph& g) { return g.sum(g.add_row(g.matmul(g.constant(x), g.param(w)), g.param(b))); };
  CHECK(grad_check(loss, params, 1e-6).passed());
}

TEST_CASE("grad_check on softmax cross-entropy") {
  Rng rng(2, "xent");
  ParameterStore params;
  auto& w = params.add("w", random_tensor(4, 6, rng));
  const Tensor x = random_tensor(3, 4, rng);
  auto loss = [&](Graph& g) { return g.nll(g.log_softmax_rows(g.matmul(g.constant(x), g.param(w))), {0, 5, 2}); };
  CHECK(grad_check(loss, params, 1e-4).passed());
}

TEST_CASE("grad_check on a random two-layer network with every primitive") {
  Rng rng(3, "mlp");
  ParameterStore params;
  auto& table = params.add("table", random_tensor(7, 5, rng));
  auto& w1 = params.add("w1", random_tensor(5, 8, rng));
  auto& b1 = params.add("b1", random_tensor(1, 8, rng));
  auto& gain = params.add("gain", random_tensor(1, 8, rng, 1.0));
  auto& bias = params.add("bias", random_tensor(1, 8, rng));
  auto& w2 = params.add("w2", random_tensor(8, 4, rng));
  Tensor target(4, 4);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += target(r, c) = rng.uniform() + 0.1;
    for (std::size_t c = 0; c < 4; ++c) target(r, c) /= s;
  }
  auto loss = [&](Graph& g) {
    const Var e = g.gather_rows(g.param(table), {0, 3, 6, 3});
    Var h = g.gelu(g.add_row(g.matmul(e, g.param(w1)), g.param(b1)));
    h = g.layer_norm(h, g.param(gain), g.param(bias));
    const Var logits = g.matmul(h, g.param(w2));
    const Var kl = g.kl_divergence(g.log_softmax_rows(logits), target);
    const Var extra = g.mean(g.mean_rows(g.scale(g.softmax_rows(logits), 3.0)));
    return g.add(kl, extra);
  };
  const auto report = grad_check(loss, params, 1e-4);
  CHECK(report.passed());
  CHECK(report.entries.size() == params.size());
}

TEST_CASE("grad_check detects a wrong backward rule") {
  ParameterStore params;
  auto& p = params.add("p", Tensor(1, 3, {0.5, -1.0, 2.0}));
  auto loss = [&](Graph& g) {
    const Var v = g.param(p);
    Tensor out = g.value(v);
    for (auto& x : out.values()) x = x * x;
    const Tensor in = g.value(v);
    const Var sq = g.custom({v}, out, [in](const Tensor& og, std::span<Tensor* const> grads) {
      if (!grads[0]) return;
      for (std::size_t i = 0; i < in.size(); ++i) (*grads[0])[i] += og[i] * 3.0 * in[i];
    });
    return g.sum(sq);
  };
  CHECK_FALSE(grad_check(loss, params, 1e-4).passed());
}

TEST_CASE("AdamW warmup, weight decay and a quadratic") {
  SUBCASE("first warmup step is below the base rate") {
    ParameterStore params;
    params.add("p", Tensor(1, 1, 1.0));
    AdamWConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.warmup_steps = 10;
    AdamW opt(params, cfg, Precision::F64);
    CHECK(opt.learning_rate(1) == doctest::Approx(1e-3));
    CHECK(opt.learning_rate(1) < cfg.learning_rate);
    CHECK(opt.learning_rate(10) == doctest::Approx(1e-2));
  }
  SUBCASE("zero gradient applies only weight decay") {
    ParameterStore params;
    auto& p = params.add("p", Tensor(1, 2, {2.0, -4.0}));
    AdamWConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.05;
    AdamW opt(params, cfg, Precision::F64);
    params.zero_grad();
    const double lr = opt.step(params);
    CHECK(p.value[0] == doctest::Approx(2.0 * (1.0 - lr * 0.05)).epsilon(1e-14));
    CHECK(p.value[1] == doctest::Approx(-4.0 * (1.0 - lr * 0.05)).epsilon(1e-14));
  }
  SUBCASE("quadratic loss decreases monotonically after warmup") {
    ParameterStore params;
    auto& p = params.add("p", Tensor(1, 1, 0.0));
    AdamWConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 10;
    AdamW opt(params, cfg, Precision::F64);
    double prev = std::numeric_limits<double>::infinity();
    for (int s = 1; s <= 200; ++s) {
      params.zero_grad();
      const double loss = (p.value[0] - 3.0) * (p.value[0] - 3.0);
      p.grad[0] = 2.0 * (p.value[0] - 3.0);
      if (s > 10) CHECK(loss < prev);
      prev = loss;
      opt.step(params);
    }
    CHECK(prev < 9.0);
  }
  SUBCASE("gradient clipping bounds the norm") {
    ParameterStore params;
    auto& p = params.add("p", Tensor(1, 2, {0.0, 0.0}));
    AdamWConfig cfg;
    cfg.clip_norm = 1.0;
    AdamW opt(params, cfg, Precision::F64);
    p.grad[0] = 30.0;
    p.grad[1] = 40.0;
    opt.step(params);
    CHECK(opt.first_moments()[0][0] == doctest::Approx(0.1 * 0.6));
  }
}

TEST_CASE("seeded streams") {
  Rng a(42, "data"), b(42, "data"), c(42, "model");
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
}

TEST_CASE("uniform draws pass a chi-square test") {
  Rng rng(123, "chi");
  std::vector<double> counts(100, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(rng.uniform() * 100)] += 1.0;
  double chi = 0.0;
  for (double c : counts) chi += (c - n / 100.0) * (c - n / 100.0) / (n / 100.0);
  CHECK(chi < oracle::kChiSquare99At001);
}

TEST_CASE("normal and categorical draws have the right moments") {
  Rng rng(5, "moments");
  double s = 0.0, s2 = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(std::abs(s2 / n - 1.0) < 0.03);
  const std::vector<double> w = {1.0, 3.0};
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += rng.categorical(w);
  CHECK(std::abs(double(ones) / n - 0.75) < 0.01);
}
