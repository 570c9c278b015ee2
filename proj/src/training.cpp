#include "ldgm/training.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <set>

#include "ldgm/error.hpp"

namespace ldgm {

using nlohmann::json;

void TrainConfig::validate() const {
  if (schedule.steps < 1) throw Error(ErrorCode::Validation, "T must be >= 1", "$.T");
  if (!(lambda >= 0.0)) throw Error(ErrorCode::Validation, "lambda must be >= 0", "$.lambda");
  if (batch_size < 1) throw Error(ErrorCode::Validation, "batch must be >= 1", "$.batch");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::Validation, "lr must be > 0", "$.lr");
  if (!(warmup_proportion >= 0.0 && warmup_proportion <= 1.0))
    throw Error(ErrorCode::Validation, "warmup_proportion must be in [0, 1]", "$.warmup_proportion");
  if (total_steps < 0) throw Error(ErrorCode::Validation, "total_steps must be >= 0", "$.total_steps");
  if (!(select_prob >= 0.0 && select_prob <= 1.0))
    throw Error(ErrorCode::Validation, "select_prob must be in [0, 1]", "$.select_prob");
  if (!(relation_prob >= 0.0 && relation_prob <= 1.0))
    throw Error(ErrorCode::Validation, "relation_prob must be in [0, 1]", "$.relation_prob");
  if (!(relation_fraction >= 0.0 && relation_fraction <= 1.0))
    throw Error(ErrorCode::Validation, "relation_fraction must be in [0, 1]", "$.relation_fraction");
  if (strategy.kind == StrategyKind::PartialDecoupled && !(strategy.overlap > 0.0 && strategy.overlap < 1.0))
    throw Error(ErrorCode::Validation, "overlap must be in (0, 1)", "$.overlap");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw Error(ErrorCode::Validation, "d_model must be a positive multiple of n_heads", "$.model");
}

nn::AdamWConfig TrainConfig::optimizer() const {
  nn::AdamWConfig opt;
  opt.learning_rate = learning_rate;
  opt.warmup_steps = std::max<long>(1, std::lround(warmup_proportion * static_cast<double>(total_steps)));
  opt.clip_norm = clip_norm;
  return opt;
}

ModelConfig TrainConfig::model(const QuantizerConfig& quantizer) const {
  ModelConfig m;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.n_layers = n_layers;
  m.d_ffn = d_ffn;
  m.vocab = quantizer.vocab_sizes();
  m.max_elements = quantizer.max_elements;
  return m;
}

TrainConfig TrainConfig::toy() {
  TrainConfig cfg;
  cfg.schedule.steps = 20;
  cfg.schedule.category_gamma_end = 0.16;
  cfg.schedule.geometry_gamma_end = 0.16;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-3;
  cfg.warmup_proportion = 0.05;
  cfg.total_steps = 2000;
  cfg.d_model = 64;
  cfg.n_heads = 8;
  cfg.n_layers = 2;
  cfg.d_ffn = 128;
  return cfg;
}

json to_json(const TrainConfig& cfg) {
  return {
      {"T", cfg.schedule.steps},
      {"lambda", cfg.lambda},
      {"batch", cfg.batch_size},
      {"lr", cfg.learning_rate},
      {"warmup_proportion", cfg.warmup_proportion},
      {"total_steps", cfg.total_steps},
      {"seed", cfg.seed},
      {"strategy", std::string(to_string(cfg.strategy.kind))},
      {"overlap", cfg.strategy.overlap},
      {"level", std::string(to_string(cfg.level))},
      {"noise",
       {{"category", std::string(to_string(cfg.noise.category.kind))},
        {"geometry", std::string(to_string(cfg.noise.geometry.kind))},
        {"band_half_width", cfg.noise.geometry.band_half_width}}},
      {"schedule",
       {{"category_beta_end", cfg.schedule.category_beta_end},
        {"category_gamma_end", cfg.schedule.category_gamma_end},
        {"geometry_sigma_end", cfg.schedule.geometry_sigma_end},
        {"geometry_gamma_end", cfg.schedule.geometry_gamma_end}}},
      {"select_prob", cfg.select_prob},
      {"relation_prob", cfg.relation_prob},
      {"relation_fraction", cfg.relation_fraction},
      {"clip_norm", cfg.clip_norm},
      {"validation_every", cfg.validation_every},
      {"validation_batches", cfg.validation_batches},
      {"model", {{"d_model", cfg.d_model}, {"n_heads", cfg.n_heads}, {"n_layers", cfg.n_layers}, {"d_ffn", cfg.d_ffn}}},
  };
}

namespace {

template <class T>
void read(const json& doc, const char* key, T& out, const std::string& path) {
  if (!doc.contains(key) || doc.at(key).is_null()) return;
  try {
    out = doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::Parse, std::string("wrong type for '") + key + "'", path + "." + key);
  }
}

void reject_unknown(const json& doc, std::initializer_list<const char*> known, const std::string& path) {
  if (!doc.is_object()) throw Error(ErrorCode::Parse, "expected an object", path);
  for (const auto& [key, _] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw Error(ErrorCode::Parse, "unknown field '" + key + "'", path + "." + key);
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& doc) {
  TrainConfig cfg;
  reject_unknown(doc,
                 {"T", "lambda", "batch", "lr", "warmup_proportion", "total_steps", "seed", "strategy", "overlap",
                  "level", "noise", "schedule", "select_prob", "relation_prob", "relation_fraction", "clip_norm",
                  "validation_every", "validation_batches", "model"},
                 "$");
  read(doc, "T", cfg.schedule.steps, "$");
  read(doc, "lambda", cfg.lambda, "$");
  read(doc, "batch", cfg.batch_size, "$");
  read(doc, "lr", cfg.learning_rate, "$");
  read(doc, "warmup_proportion", cfg.warmup_proportion, "$");
  read(doc, "total_steps", cfg.total_steps, "$");
  read(doc, "seed", cfg.seed, "$");
  auto named = [](const json& obj, const char* key, const std::string& path) -> std::optional<std::string> {
    std::optional<std::string> out;
    if (obj.contains(key) && !obj.at(key).is_null()) {
      std::string v;
      read(obj, key, v, path);
      out = v;
    }
    return out;
  };
  try {
    if (auto v = named(doc, "strategy", "$")) cfg.strategy.kind = strategy_from_string(*v).kind;
    read(doc, "overlap", cfg.strategy.overlap, "$");
    if (auto v = named(doc, "level", "$")) cfg.level = level_from_string(*v);
    if (doc.contains("noise")) {
      const auto& noise = doc.at("noise");
      reject_unknown(noise, {"category", "geometry", "band_half_width"}, "$.noise");
      if (auto v = named(noise, "category", "$.noise")) cfg.noise.category = noise_from_string(*v);
      if (auto v = named(noise, "geometry", "$.noise")) cfg.noise.geometry = noise_from_string(*v);
      read(noise, "band_half_width", cfg.noise.geometry.band_half_width, "$.noise");
    }
  } catch (const Error& e) {
    if (!e.path().empty()) throw;
    throw Error(e.code(), e.what(), "$");
  }
  if (doc.contains("schedule")) {
    const auto& s = doc.at("schedule");
    reject_unknown(s, {"category_beta_end", "category_gamma_end", "geometry_sigma_end", "geometry_gamma_end"},
                   "$.schedule");
    read(s, "category_beta_end", cfg.schedule.category_beta_end, "$.schedule");
    read(s, "category_gamma_end", cfg.schedule.category_gamma_end, "$.schedule");
    read(s, "geometry_sigma_end", cfg.schedule.geometry_sigma_end, "$.schedule");
    read(s, "geometry_gamma_end", cfg.schedule.geometry_gamma_end, "$.schedule");
  }
  read(doc, "select_prob", cfg.select_prob, "$");
  read(doc, "relation_prob", cfg.relation_prob, "$");
  read(doc, "relation_fraction", cfg.relation_fraction, "$");
  read(doc, "clip_norm", cfg.clip_norm, "$");
  read(doc, "validation_every", cfg.validation_every, "$");
  read(doc, "validation_batches", cfg.validation_batches, "$");
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    reject_unknown(m, {"d_model", "n_heads", "n_layers", "d_ffn"}, "$.model");
    read(m, "d_model", cfg.d_model, "$.model");
    read(m, "n_heads", cfg.n_heads, "$.model");
    read(m, "n_layers", cfg.n_layers, "$.model");
    read(m, "d_ffn", cfg.d_ffn, "$.model");
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

double token_loss(std::span<const double> p, int x0, int x_t, int t, const TransitionStack& stack,
                  std::vector<double>* grad) {
  const int K = stack.vocab();
  if (static_cast<int>(p.size()) != K) throw Error(ErrorCode::Shape, "distribution size does not match vocabulary");
  if (x0 < 0 || x0 >= K) throw Error(ErrorCode::Data, "supervised token has no clean value");
  constexpr double tiny = 1e-300;
  if (grad) grad->assign(static_cast<std::size_t>(K), 0.0);
  if (t == 0) {
    const double px = std::max(p[static_cast<std::size_t>(x0)], tiny);
    if (grad) (*grad)[static_cast<std::size_t>(x0)] = -1.0 / px;
    return -std::log(px);
  }

  const auto table = posterior_table(x_t, t, stack);
  if (!table.possible[static_cast<std::size_t>(x0)])
    throw Error(ErrorCode::ImpossibleTransition, "x_t is unreachable from the clean value");
  double weight = 0.0;
  for (int c = 0; c < K; ++c)
    if (table.possible[static_cast<std::size_t>(c)]) weight += p[static_cast<std::size_t>(c)];
  weight = std::max(weight, tiny);

  double loss = 0.0;
  std::vector<double> coeff(static_cast<std::size_t>(K) + 1, 0.0);  // q_k / A_k
  for (int k = 0; k <= K; ++k) {
    const double q = table.at(k, x0);
    if (q <= 0.0) continue;
    double a = 0.0;
    for (int c = 0; c < K; ++c) a += table.at(k, c) * p[static_cast<std::size_t>(c)];
    a = std::max(a, tiny);
    // At t = 1 the target is a delta and this reduces to -log of the mixture.
    loss += q * (std::log(q) - std::log(a / weight));
    coeff[static_cast<std::size_t>(k)] = q / a;
  }
  if (grad) {
    for (int j = 0; j < K; ++j) {
      double acc = table.possible[static_cast<std::size_t>(j)] ? 1.0 / weight : 0.0;
      for (int k = 0; k <= K; ++k) acc -= coeff[static_cast<std::size_t>(k)] * table.at(k, j);
      (*grad)[static_cast<std::size_t>(j)] = acc;
    }
  }
  return std::max(loss, 0.0);
}

double prior_kl(int x0, const TransitionStack& stack) {
  const int K = stack.vocab();
  const int T = stack.steps();
  const auto& qbar = stack.cumulative(T);
  double kl = 0.0;
  for (int k = 0; k <= K; ++k) {
    const double q = qbar(static_cast<std::size_t>(k), static_cast<std::size_t>(x0));
    if (q <= 0.0) continue;
    double prior = 0.0;
    for (int c = 0; c < K; ++c) prior += qbar(static_cast<std::size_t>(k), static_cast<std::size_t>(c));
    prior /= K;
    kl += q * std::log(q / prior);
  }
  return std::max(kl, 0.0);
}

LossResult compute_loss(nn::Graph& g, std::span<const TokenSequence> clean, std::span<const TokenSequence> corrupted,
                        std::span<const CorruptionPlan> plans, const DenoiserForward& out, const StackSet& stacks,
                        double lambda) {
  if (clean.size() != corrupted.size() || clean.size() != plans.size() || out.offsets.size() != clean.size() + 1)
    throw Error(ErrorCode::Shape, "loss inputs disagree on batch size");
  if (clean.empty()) throw Error(ErrorCode::Data, "empty batch");

  std::vector<nn::Var> inputs;
  std::array<int, kNumKinds> input_of{};
  std::array<nn::Tensor, kNumKinds> dlogp;
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    input_of[k] = -1;
    if (out.log_probs[k].id < 0) continue;
    input_of[k] = static_cast<int>(inputs.size());
    inputs.push_back(out.log_probs[k]);
    const auto& v = g.value(out.log_probs[k]);
    dlogp[k] = nn::Tensor(v.rows(), v.cols());
  }

  const double total_tokens = static_cast<double>(out.slot.size());
  LossBreakdown b;
  double sum_vlb = 0.0, sum_rec = 0.0, sum_prior = 0.0;
  std::vector<double> p, gp;
  std::map<std::pair<std::size_t, int>, double> prior_cache;
  for (std::size_t s = 0; s < clean.size(); ++s) {
    const auto& cs = clean[s].tokens;
    const auto& xs = corrupted[s].tokens;
    const auto& plan = plans[s];
    if (xs.size() != cs.size() || plan.timestep.size() != cs.size() || out.offsets[s + 1] - out.offsets[s] != cs.size())
      throw Error(ErrorCode::Shape, "plan inconsistent with sequences");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      const auto [kind, row] = out.slot[out.offsets[s] + i];
      const auto ki = static_cast<std::size_t>(kind);
      const auto& stack = *stacks.per_kind[ki];
      const auto lp = g.value(out.log_probs[ki]).row(static_cast<std::size_t>(row));
      p.resize(lp.size());
      for (std::size_t c = 0; c < lp.size(); ++c) p[c] = std::exp(lp[c]);
      const int t = plan.timestep[i];
      const int x0 = cs[i].value;
      if (x0 < 0 || x0 >= stack.vocab()) throw Error(ErrorCode::Data, "supervised token has no clean value");
      const double loss = token_loss(p, x0, xs[i].value, t, stack, &gp);
      double weight = 1.0;
      if (t == 0) {
        weight = lambda;
        sum_rec += loss;
        ++b.count_t0;
      } else {
        sum_vlb += loss;
        ++(t == 1 ? b.count_t1 : b.count_tgt1);
      }
      auto it = prior_cache.find({ki, x0});
      if (it == prior_cache.end()) it = prior_cache.emplace(std::make_pair(ki, x0), prior_kl(x0, stack)).first;
      sum_prior += it->second;
      auto grow = dlogp[ki].row(static_cast<std::size_t>(row));
      for (std::size_t c = 0; c < p.size(); ++c) grow[c] += weight / total_tokens * gp[c] * p[c];
    }
  }

  const auto prec = g.precision();
  b.l_vlb = nn::round_to(sum_vlb / total_tokens, prec);
  b.l_rec = nn::round_to(sum_rec / total_tokens, prec);
  b.l_total = nn::round_to(b.l_vlb + lambda * b.l_rec, prec);
  b.l_prior = sum_prior / total_tokens;

  auto grads = std::make_shared<std::array<nn::Tensor, kNumKinds>>(std::move(dlogp));
  const nn::Var total = g.custom(inputs, nn::Tensor(1, 1, b.l_total),
                                 [grads, input_of](const nn::Tensor& og, std::span<nn::Tensor* const> in) {
                                   const double scale = og(0, 0);
                                   for (std::size_t k = 0; k < kNumKinds; ++k) {
                                     if (input_of[k] < 0 || !in[static_cast<std::size_t>(input_of[k])]) continue;
                                     auto& dst = *in[static_cast<std::size_t>(input_of[k])];
                                     const auto& src = (*grads)[k];
                                     for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
                                   }
                                 });
  return {total, b};
}

// ---------------------------------------------------------------------------

PreparedBatch prepare_batch(std::span<const Layout> layouts, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                            const StackSet& stacks, std::uint64_t seed, long step) {
  if (layouts.empty()) throw Error(ErrorCode::Data, "empty batch");
  PreparedBatch batch;
  const std::uint64_t step_seed = derive_seed(seed, "train-step", static_cast<std::uint64_t>(step));
  for (std::size_t b = 0; b < layouts.size(); ++b) {
    Rng rng(derive_seed(step_seed, "item", b));
    Layout layout = layouts[b];
    layout.relations.clear();
    if (has_mask(layout, quantizer)) throw Error(ErrorCode::Data, "training layout has missing attributes");
    if (rng.bernoulli(cfg.relation_prob))
      layout.relations = sample_relations(layout, quantizer, cfg.relation_fraction, rng);
    TokenSequence seq = tokenize(layout);
    CorruptionPlan plan =
        plan_corruption(seq, cfg.strategy, cfg.level, cfg.select_prob, cfg.schedule.steps, rng);
    batch.corrupted.push_back(corrupt(seq, plan, stacks, rng));
    batch.clean.push_back(std::move(seq));
    batch.plans.push_back(std::move(plan));
  }
  return batch;
}

LossBreakdown train_step(std::span<const Layout> batch, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                         const StackSet& stacks, Denoiser& model, nn::AdamW& opt) {
  const long step = opt.steps_taken() + 1;
  const auto prepared = prepare_batch(batch, cfg, quantizer, stacks, cfg.seed, step);
  auto& params = model.parameters();
  params.zero_grad();
  nn::Graph g(model.precision());
  const auto fwd = model.forward(g, prepared.corrupted);
  auto result = compute_loss(g, prepared.clean, prepared.corrupted, prepared.plans, fwd, stacks, cfg.lambda);
  g.backward(result.total);
  result.breakdown.grad_norm = params.grad_norm();
  if (!std::isfinite(result.breakdown.grad_norm)) throw Error(ErrorCode::Domain, "non-finite gradient");
  result.breakdown.learning_rate = opt.step(params);
  return result.breakdown;
}

LossBreakdown evaluate_loss(std::span<const Layout> batch, const TrainConfig& cfg, const QuantizerConfig& quantizer,
                            const StackSet& stacks, const Denoiser& model, long stream) {
  const auto prepared = prepare_batch(batch, cfg, quantizer, stacks, derive_seed(cfg.seed, "validation"), stream);
  nn::Graph g(model.precision(), false);
  const auto fwd = const_cast<Denoiser&>(model).forward(g, prepared.corrupted);
  return compute_loss(g, prepared.clean, prepared.corrupted, prepared.plans, fwd, stacks, cfg.lambda).breakdown;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, QuantizerConfig quantizer, Denoiser& model)
    : cfg_(std::move(cfg)),
      quantizer_(quantizer),
      model_(model),
      stacks_(build_stacks(quantizer_, cfg_.schedule, cfg_.noise)),
      opt_(model.parameters(), cfg_.optimizer(), model.precision()) {
  cfg_.validate();
}

std::vector<Layout> Trainer::sample_batch(std::span<const Layout> corpus, long step) const {
  if (corpus.empty()) throw Error(ErrorCode::Data, "empty training corpus");
  Rng rng(derive_seed(cfg_.seed, "batch-index", static_cast<std::uint64_t>(step)));
  std::vector<Layout> batch;
  batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
  for (int i = 0; i < cfg_.batch_size; ++i)
    batch.push_back(corpus[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))]);
  return batch;
}

LossBreakdown Trainer::step_on(std::span<const Layout> corpus) {
  const auto batch = sample_batch(corpus, step() + 1);
  return train_step(batch, cfg_, quantizer_, stacks_, model_, opt_);
}

LossBreakdown Trainer::validate(std::span<const Layout> corpus) const {
  if (corpus.empty()) throw Error(ErrorCode::Data, "empty validation corpus");
  LossBreakdown mean;
  const int batches = std::max(1, cfg_.validation_batches);
  for (int b = 0; b < batches; ++b) {
    std::vector<Layout> batch;
    for (int j = 0; j < cfg_.batch_size; ++j)
      batch.push_back(corpus[static_cast<std::size_t>(b * cfg_.batch_size + j) % corpus.size()]);
    const auto l = evaluate_loss(batch, cfg_, quantizer_, stacks_, model_, b);
    mean.l_vlb += l.l_vlb / batches;
    mean.l_rec += l.l_rec / batches;
    mean.l_total += l.l_total / batches;
    mean.l_prior += l.l_prior / batches;
    mean.count_t0 += l.count_t0;
    mean.count_t1 += l.count_t1;
    mean.count_tgt1 += l.count_tgt1;
  }
  return mean;
}

std::vector<TrainLogEntry> Trainer::fit(std::span<const Layout> train, std::span<const Layout> val,
                                        const Callbacks& cb) {
  std::vector<TrainLogEntry> history;
  while (step() < cfg_.total_steps) {
    const auto loss = step_on(train);
    const long s = step();
    history.push_back({s, loss});
    if (cb.log) {
      *cb.log << json{{"step", s},          {"l_vlb", loss.l_vlb},          {"l_rec", loss.l_rec},
                      {"l_total", loss.l_total}, {"lr", loss.learning_rate}}
                     .dump()
              << '\n';
      cb.log->flush();
    }
    if (cb.on_step) cb.on_step(s);
    const bool at_cadence = cfg_.validation_every > 0 && s % cfg_.validation_every == 0;
    if (!val.empty() && cb.on_validation && (at_cadence || s == cfg_.total_steps)) cb.on_validation(s, validate(val));
  }
  return history;
}

}  // namespace ldgm
