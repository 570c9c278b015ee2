#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "ldgm/checkpoint.hpp"
#include "ldgm/error.hpp"
#include "ldgm/training.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace ldgm;
using namespace ldgm::nn;
namespace fs = std::filesystem;

namespace {

/// Loss for one token, built from enumerated-path posteriors.
double oracle_token_loss(const std::vector<double>& p, int x0, int xt, int t, const TransitionStack& stack) {
  std::vector<oracle::Grid> grids;
  for (int s = 1; s <= stack.steps(); ++s) grids.push_back(oracle::to_grid(stack.step(s)));
  const int K = stack.vocab();
  if (t == 0) return -std::log(p[x0]);
  std::vector<double> mix(static_cast<std::size_t>(K + 1), 0.0);
  double w = 0.0;
  for (int c = 0; c < K; ++c) {
    if (oracle::path_probability(grids, t, xt, c) <= 0.0) continue;
    w += p[c];
    const auto post = oracle::brute_posterior(grids, xt, c, t);
    for (int k = 0; k <= K; ++k) mix[k] += p[c] * post[k];
  }
  for (auto& m : mix) m /= w;
  if (t == 1) return -std::log(mix[x0]);
  const auto q = oracle::brute_posterior(grids, xt, x0, t);
  double kl = 0.0;
  for (int k = 0; k <= K; ++k)
    if (q[k] > 0) kl += q[k] * std::log(q[k] / mix[k]);
  return kl;
}

TrainConfig tiny_config() {
  TrainConfig cfg = TrainConfig::toy();
  cfg.schedule.steps = 6;
  cfg.batch_size = 4;
  cfg.total_steps = 10;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ffn = 32;
  cfg.validation_every = 0;
  return cfg;
}

std::vector<Layout> tiny_corpus(const QuantizerConfig& q, int n, std::uint64_t seed) {
  Rng rng(seed, "corpus");
  std::vector<Layout> out;
  for (int i = 0; i < n; ++i) out.push_back(fixture::random_layout(q, 2 + i % 4, rng));
  return out;
}

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ldgm_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("token loss identities") {
  const auto stack = build_stack(NoiseType::uniform(), AttributeKind::Category, fixture::schedule(5, 0.3), 4);
  SUBCASE("one-hot output zeroes the t = 1 term") {
    for (int x0 = 0; x0 < 4; ++x0)
      for (int x1 = 0; x1 <= 4; ++x1) {
        std::vector<double> p(4, 0.0);
        p[x0] = 1.0;
        CHECK(std::abs(token_loss(p, x0, x1, 1, stack)) < 1e-6);
      }
  }
  SUBCASE("exact posterior zeroes the KL terms") {
    for (int t = 2; t <= 5; ++t)
      for (int x0 = 0; x0 < 4; ++x0)
        for (int xt = 0; xt <= 4; ++xt) {
          if (stack.cumulative(t)(xt, x0) <= 0.0) continue;
          std::vector<double> p(4, 0.0);
          p[x0] = 1.0;
          CHECK(std::abs(token_loss(p, x0, xt, t, stack)) < 1e-8);
        }
  }
}

TEST_CASE("token loss equals an enumerated evaluation on K = 3, T = 3") {
  const auto stack = build_stack(NoiseType::uniform(), AttributeKind::Category, fixture::schedule(3, 0.4), 3);
  const std::vector<double> p = {0.15, 0.6, 0.25};
  for (int t = 0; t <= 3; ++t)
    for (int x0 = 0; x0 < 3; ++x0)
      for (int xt = 0; xt <= 3; ++xt) {
        if (t > 0 && stack.cumulative(t)(xt, x0) <= 0.0) continue;
        if (t == 0 && xt != x0) continue;
        CHECK(token_loss(p, x0, xt, t, stack) == doctest::Approx(oracle_token_loss(p, x0, xt, t, stack)).epsilon(1e-10));
      }
}

TEST_CASE("token loss gradient matches finite differences") {
  const auto stack = build_stack(NoiseType::gaussian(), AttributeKind::X, fixture::schedule(4, 0.3), 5);
  const std::vector<double> p = {0.1, 0.3, 0.2, 0.25, 0.15};
  for (int t = 1; t <= 4; ++t)
    for (int xt : {1, 5}) {
      std::vector<double> grad;
      token_loss(p, 2, xt, t, stack, &grad);
      for (int j = 0; j < 5; ++j) {
        auto up = p, down = p;
        up[j] += 1e-6;
        down[j] -= 1e-6;
        const double fd = (token_loss(up, 2, xt, t, stack) - token_loss(down, 2, xt, t, stack)) / 2e-6;
        CHECK(grad[j] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
}

TEST_CASE("batch loss breakdown") {
  const auto q = fixture::quantizer();
  TrainConfig cfg = tiny_config();
  cfg.select_prob = 0.7;
  const auto stacks = build_stacks(q, cfg.schedule, cfg.noise);
  Denoiser model(cfg.model(q), 3);
  const auto corpus = tiny_corpus(q, 6, 1);
  const auto batch = prepare_batch(corpus, cfg, q, stacks, 5, 1);

  std::size_t tokens = 0;
  for (const auto& s : batch.clean) tokens += s.tokens.size();

  Graph g;
  const auto out = model.forward(g, batch.corrupted);
  const auto zero = compute_loss(g, batch.clean, batch.corrupted, batch.plans, out, stacks, 0.0);
  CHECK(zero.breakdown.l_total == zero.breakdown.l_vlb);
  CHECK(static_cast<std::size_t>(zero.breakdown.count_t0 + zero.breakdown.count_t1 + zero.breakdown.count_tgt1) ==
        tokens);
  CHECK(zero.breakdown.count_t0 > 0);
  CHECK(zero.breakdown.count_tgt1 > 0);

  const auto with = compute_loss(g, batch.clean, batch.corrupted, batch.plans, out, stacks, 0.1);
  CHECK(with.breakdown.l_total == doctest::Approx(with.breakdown.l_vlb + 0.1 * with.breakdown.l_rec).epsilon(1e-6));
}

TEST_CASE("full denoiser gradient check in 64-bit mode") {
  QuantizerConfig q;
  q.category_count = 5;
  q.geometry_bins = {5, 5, 5, 5};
  TrainConfig cfg = tiny_config();
  cfg.schedule.steps = 4;
  cfg.relation_prob = 1.0;
  cfg.relation_fraction = 0.5;
  cfg.select_prob = 0.8;
  const auto stacks = build_stacks(q, cfg.schedule, cfg.noise);
  ModelConfig mc = fixture::small_model(q, 8, 2, 1, 16);
  Denoiser model(mc, 11, Precision::F64);
  Rng rng(2, "gc");
  std::vector<Layout> layouts = {fixture::random_layout(q, 3, rng), fixture::random_layout(q, 3, rng)};
  const auto batch = prepare_batch(layouts, cfg, q, stacks, 9, 1);
  for (auto& p : model.parameters())
    if (p.name.rfind("relation.", 0) == 0) p.value = random_normal(p.value.rows(), p.value.cols(), 0.3, rng);

  auto loss = [&](Graph& g) {
    const auto out = model.forward(g, batch.corrupted);
    return compute_loss(g, batch.clean, batch.corrupted, batch.plans, out, stacks, 0.1).total;
  };
  const auto report = grad_check(loss, model.parameters(), 1e-3);
  for (const auto& e : report.entries) CHECK_MESSAGE(e.max_relative_error < 1e-3, e.name);
  CHECK(report.entries.size() == model.parameters().size());
}

TEST_CASE("train_step is deterministic and finite") {
  const auto q = fixture::quantizer();
  const TrainConfig cfg = tiny_config();
  const auto stacks = build_stacks(q, cfg.schedule, cfg.noise);
  const auto corpus = tiny_corpus(q, 8, 2);
  auto run = [&] {
    Denoiser model(cfg.model(q), 4);
    AdamW opt(model.parameters(), cfg.optimizer());
    std::vector<double> totals;
    for (int s = 0; s < 3; ++s) totals.push_back(train_step(corpus, cfg, q, stacks, model, opt).l_total);
    return totals;
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
  Denoiser model(cfg.model(q), 4);
  AdamW opt(model.parameters(), cfg.optimizer());
  const auto first = train_step(corpus, cfg, q, stacks, model, opt);
  CHECK(std::isfinite(first.grad_norm));
  CHECK(first.grad_norm > 0.0);
}

TEST_CASE("train config JSON") {
  TrainConfig cfg = tiny_config();
  cfg.strategy = {StrategyKind::PartialDecoupled, 0.4};
  cfg.noise.geometry = NoiseType::band(3);
  cfg.level = DecouplingLevel::Element;
  const auto back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  auto doc = to_json(cfg);
  doc["bogus"] = 1;
  try {
    train_config_from_json(doc);
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(e.path() == "$.bogus");
  }
}

TEST_CASE("checkpoint round trip preserves forward outputs") {
  const auto q = fixture::quantizer();
  const TrainConfig cfg = tiny_config();
  Denoiser model(cfg.model(q), 8);
  const CategoryVocabulary vocab({"a", "b", "c", "d", "e"});
  const auto path = temp_path("roundtrip.ldgm");
  save_checkpoint(path, model, q, vocab, nullptr, {{"note", "x"}});
  const auto ck = load_checkpoint(path);
  CHECK(ck.quantizer == q);
  CHECK(ck.vocabulary.names() == vocab.names());
  CHECK(ck.extra["note"] == "x");
  CHECK_FALSE(ck.optimizer.has_value());
  const auto corpus = tiny_corpus(q, 3, 3);
  std::vector<TokenSequence> seqs;
  for (const auto& l : corpus) seqs.push_back(tokenize(l));
  CHECK(ck.model->predict(seqs) == model.predict(seqs));
  CHECK(load_checkpoint(path).model_version == ck.model_version);
}

TEST_CASE("checkpoint rejects other versions and damaged files") {
  const auto q = fixture::quantizer();
  Denoiser model(tiny_config().model(q), 9);
  const auto path = temp_path("damaged.ldgm");
  save_checkpoint(path, model, q, CategoryVocabulary({"a", "b", "c", "d", "e"}));
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  auto manifest = nlohmann::json::parse(bytes.substr(16, len));
  const std::string payload = bytes.substr(16 + len);

  auto write = [&](const nlohmann::json& m, const std::string& body) {
    const std::string text = m.dump();
    const std::uint64_t n = text.size();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write("LDGMCKPT", 8);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out << text << body;
  };
  auto bumped = manifest;
  bumped["format_version"] = kCheckpointFormatVersion + 1;
  write(bumped, payload);
  CHECK_THROWS_AS(load_checkpoint(path), Error);

  write(manifest, payload.substr(0, payload.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(path), Error);

  std::string flipped = payload;
  flipped[flipped.size() / 3] ^= 0x5a;
  write(manifest, flipped);
  CHECK_THROWS_AS(load_checkpoint(path), Error);

  write(manifest, payload);
  CHECK_NOTHROW(load_checkpoint(path));
}

TEST_CASE("resuming from a checkpoint continues the run exactly") {
  const auto q = fixture::quantizer();
  const TrainConfig cfg = tiny_config();
  const auto corpus = tiny_corpus(q, 10, 4);
  const CategoryVocabulary vocab({"a", "b", "c", "d", "e"});
  const auto path = temp_path("resume.ldgm");

  Denoiser straight(cfg.model(q), 5);
  Trainer a(cfg, q, straight);
  for (int s = 0; s < 3; ++s) a.step_on(corpus);
  save_checkpoint(path, straight, q, vocab, &a.optimizer());
  const auto next = a.step_on(corpus);

  auto ck = load_checkpoint(path);
  REQUIRE(ck.optimizer.has_value());
  Trainer b(cfg, q, *ck.model);
  restore_optimizer(b.optimizer(), *ck.optimizer);
  CHECK(b.step() == 3);
  const auto resumed = b.step_on(corpus);
  CHECK(resumed.l_total == next.l_total);
  auto it = ck.model->parameters().begin();
  for (const auto& p : straight.parameters()) {
    CHECK_MESSAGE(p.value == it->value, p.name);
    ++it;
  }
}

TEST_CASE("trainer fit logs and validates") {
  const auto q = fixture::quantizer();
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 4;
  cfg.validation_every = 2;
  cfg.validation_batches = 1;
  const auto corpus = tiny_corpus(q, 10, 5);
  Denoiser model(cfg.model(q), 6);
  Trainer trainer(cfg, q, model);
  std::ostringstream log;
  std::vector<long> validated;
  Trainer::Callbacks cb;
  cb.log = &log;
  cb.on_validation = [&](long step, const LossBreakdown&) { validated.push_back(step); };
  const auto history = trainer.fit(corpus, corpus, cb);
  CHECK(history.size() == 4);
  CHECK(validated == std::vector<long>{2, 4});
  std::istringstream lines(log.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto doc = nlohmann::json::parse(line);
    CHECK(doc.contains("l_vlb"));
    CHECK(doc.contains("lr"));
    ++count;
  }
  CHECK(count == 4);
}
