#include "ldgm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldgm/error.hpp"

namespace ldgm {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 10> kTaskNames = {"u-gen",      "gen-t",  "gen-ts", "gen-tr", "refinement",
                                                         "completion", "gen-pm", "gen-cm", "gen-pc", "gen-pcm"};
constexpr std::array<std::string_view, 3> kDecoderNames = {"confidence-topk", "autoregressive", "non-autoregressive"};

}  // namespace

std::string_view to_string(TaskKind task) { return kTaskNames[static_cast<std::size_t>(task)]; }

TaskKind task_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i)
    if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
  throw Error(ErrorCode::Usage, "unknown task '" + std::string(name) + "'");
}

bool is_conditional(TaskKind task) { return task != TaskKind::UGen; }

std::string_view to_string(DecoderKind decoder) { return kDecoderNames[static_cast<std::size_t>(decoder)]; }

DecoderKind decoder_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kDecoderNames.size(); ++i)
    if (kDecoderNames[i] == name) return static_cast<DecoderKind>(i);
  throw Error(ErrorCode::Usage, "unknown decoding strategy '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (!(relation_fraction >= 0.0 && relation_fraction <= 1.0))
    throw Error(ErrorCode::Validation, "relation fraction must be in [0, 1]");
  if (!(coarse_std >= 0.0)) throw Error(ErrorCode::Validation, "coarse std must be >= 0");
}

// ---------------------------------------------------------------------------

Layout blank_layout(int n, CanvasSpec canvas, const QuantizerConfig& cfg) {
  if (n < 1) throw Error(ErrorCode::Domain, "element count must be >= 1");
  Layout out;
  out.canvas = canvas;
  out.elements.resize(static_cast<std::size_t>(n));
  for (auto& e : out.elements)
    for (auto kind : kAllKinds) e[kind] = {cfg.mask(kind), AttributeStatus::Missing};
  return out;
}

Layout synthesize_coarse(const Layout& layout, const QuantizerConfig& cfg, double std, Rng& rng) {
  Layout out = layout;
  for (auto& e : out.elements) {
    for (std::size_t g = 1; g < kNumKinds; ++g) {
      const auto kind = kAllKinds[g];
      auto& attr = e[kind];
      const int K = cfg.vocab(kind);
      if (attr.bin < 0 || attr.bin >= K) throw Error(ErrorCode::Data, "coarse synthesis needs precise geometry");
      double v = static_cast<double>(attr.bin) / (K - 1);
      if (std > 0.0) v += std * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      attr.bin = std::clamp(static_cast<int>(std::floor(v * (K - 1) + 0.5)), 0, K - 1);
      attr.status = AttributeStatus::Coarse;
    }
  }
  return out;
}

Layout build_task(const Layout& source, const TaskSpec& spec, const QuantizerConfig& cfg, Rng& rng) {
  spec.validate();
  const int n = static_cast<int>(source.elements.size());
  if (n < 1) throw Error(ErrorCode::Data, "source layout has no elements");
  if (spec.task == TaskKind::UGen) return blank_layout(n, source.canvas, cfg);
  if (has_mask(source, cfg)) throw Error(ErrorCode::Data, "task '" + std::string(to_string(spec.task)) +
                                                              "' needs a complete source layout");

  Layout out = source;
  out.relations.clear();
  auto set = [&](Element& e, AttributeKind kind, AttributeStatus st) {
    e[kind].status = st;
    if (st == AttributeStatus::Missing) e[kind].bin = cfg.mask(kind);
  };
  auto set_all = [&](AttributeStatus st) {
    for (auto& e : out.elements)
      for (auto kind : kAllKinds) set(e, kind, st);
  };
  set_all(AttributeStatus::Precise);

  switch (spec.task) {
    case TaskKind::UGen: break;
    case TaskKind::GenT:
    case TaskKind::GenTR:
      for (auto& e : out.elements)
        for (std::size_t g = 1; g < kNumKinds; ++g) set(e, kAllKinds[g], AttributeStatus::Missing);
      if (spec.task == TaskKind::GenTR) out.relations = sample_relations(source, cfg, spec.relation_fraction, rng);
      break;
    case TaskKind::GenTS:
      for (auto& e : out.elements) {
        set(e, AttributeKind::X, AttributeStatus::Missing);
        set(e, AttributeKind::Y, AttributeStatus::Missing);
      }
      break;
    case TaskKind::Refinement: {
      const Layout coarse = synthesize_coarse(source, cfg, spec.coarse_std, rng);
      for (std::size_t i = 0; i < out.elements.size(); ++i)
        for (std::size_t g = 1; g < kNumKinds; ++g) out.elements[i].attrs[g] = coarse.elements[i].attrs[g];
      break;
    }
    case TaskKind::Completion: {
      const int keep = n > 1 ? rng.uniform_int(1, n - 1) : n;
      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      for (int i = 0; i < keep; ++i) std::swap(order[static_cast<std::size_t>(i)],
                                               order[static_cast<std::size_t>(rng.uniform_int(i, n - 1))]);
      for (int i = keep; i < n; ++i)
        for (auto kind : kAllKinds) set(out.elements[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], kind,
                                        AttributeStatus::Missing);
      break;
    }
    case TaskKind::GenPM:
    case TaskKind::GenCM:
    case TaskKind::GenPC:
    case TaskKind::GenPCM: {
      std::vector<AttributeStatus> allowed;
      if (spec.task != TaskKind::GenCM) allowed.push_back(AttributeStatus::Precise);
      if (spec.task != TaskKind::GenPM) allowed.push_back(AttributeStatus::Coarse);
      if (spec.task != TaskKind::GenPC) allowed.push_back(AttributeStatus::Missing);
      const Layout coarse = synthesize_coarse(source, cfg, spec.coarse_std, rng);
      for (std::size_t i = 0; i < out.elements.size(); ++i) {
        for (auto kind : kAllKinds) {
          const auto st = allowed[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(allowed.size()) - 1))];
          if (st == AttributeStatus::Coarse && kind != AttributeKind::Category)
            out.elements[i][kind] = coarse.elements[i][kind];
          set(out.elements[i], kind, st);
        }
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int commits_per_step(int missing, int steps) {
  if (steps < 1) throw Error(ErrorCode::Domain, "steps must be >= 1");
  return (missing + steps - 1) / steps;
}

namespace {

/// Index drawn from `probs` at the given temperature; 0 means argmax with the
/// lowest index winning ties.
int sample_tempered(std::span<const double> probs, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
  if (temperature == 1.0) return rng.categorical(probs);
  std::vector<double> w(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) w[i] = probs[i] > 0.0 ? std::pow(probs[i], 1.0 / temperature) : 0.0;
  return rng.categorical(w);
}

/// Step index -> diffusion timestep, mapping [0, S) monotonically onto [T, 1].
int timestep_for(int s, int total, int steps) {
  return 1 + static_cast<int>((static_cast<long>(total - 1 - s) * (steps - 1)) / std::max(total - 1, 1));
}

}  // namespace

DecodeResult decode(const GenerationRequest& req, const Denoiser& model, const StackSet& stacks,
                    const QuantizerConfig& cfg, const StepCallback& on_step) {
  if (req.steps < 1) throw Error(ErrorCode::Domain, "steps must be >= 1");
  if (stacks.steps() != req.steps) throw Error(ErrorCode::Domain, "transition stacks built for a different T");
  if (!(req.temperature >= 0.0)) throw Error(ErrorCode::Domain, "temperature must be >= 0");
  if (req.layout.elements.empty()) throw Error(ErrorCode::Data, "layout has no elements");
  for (const auto& v : validate(req.layout, cfg))
    if (v.code != "status-mismatch") throw Error(ErrorCode::Validation, v.message);

  Rng rng(req.seed, "decode");
  const auto statuses = token_statuses(req.layout);
  TokenSequence seq = tokenize(req.layout);
  const std::size_t n = seq.tokens.size();
  std::vector<int> input(n);
  std::vector<std::uint8_t> missing(n, 0), committed(n, 0);
  int n_missing = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& tok = seq.tokens[i];
    input[i] = tok.value;
    if (statuses[i] == AttributeStatus::Missing) {
      missing[i] = 1;
      ++n_missing;
      tok.value = cfg.mask(tok.kind);
    } else if (tok.value >= cfg.mask(tok.kind)) {
      throw Error(ErrorCode::Validation, "non-missing attribute holds the MASK value");
    }
    tok.condition = statuses[i] == AttributeStatus::Precise;
  }

  const int T = req.steps;
  int total_steps = T;
  int k = 0;
  switch (req.decoder) {
    case DecoderKind::ConfidenceTopK: k = commits_per_step(n_missing, T); break;
    case DecoderKind::NonAutoregressive: k = n_missing; break;
    case DecoderKind::Autoregressive:
      k = 1;
      total_steps = std::max(T, n_missing);
      break;
  }

  DecodeResult result;
  result.missing = n_missing;
  std::vector<int> proposal(n);
  std::vector<double> confidence(n, 0.0);
  std::vector<double> renorm;

  for (int s = 0; s < total_steps; ++s) {
    const int t = req.decoder == DecoderKind::Autoregressive ? timestep_for(s, total_steps, T) : T - s;
    const auto probs = model.predict(std::span<const TokenSequence>(&seq, 1))[0];

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tok = seq.tokens[i];
      const auto& stack = stacks[tok.kind];
      const int K = stack.vocab();
      const auto& p = probs[i];
      if (statuses[i] == AttributeStatus::Precise) {
        proposal[i] = req.clamp_conditions ? input[i] : sample_tempered(p, req.temperature, rng);
      } else if (!missing[i] || committed[i]) {
        if (req.freeze_on_commit && committed[i]) {
          proposal[i] = tok.value;
          continue;
        }
        const auto rd = reverse_distribution(p, tok.value, t, stack);
        proposal[i] = sample_tempered(std::span<const double>(rd.data(), static_cast<std::size_t>(K)),
                                      req.temperature, rng);
      } else {
        const auto rd = reverse_distribution(p, tok.value, t, stack);
        renorm.assign(rd.begin(), rd.begin() + K);
        const double mass = std::accumulate(renorm.begin(), renorm.end(), 0.0);
        if (!(mass > 0.0)) {
          // Reverse step keeps the token absorbed; fall back to the clean-value head.
          renorm.assign(p.begin(), p.end());
        } else {
          for (auto& v : renorm) v /= mass;
        }
        proposal[i] = sample_tempered(renorm, req.temperature, rng);
        confidence[i] = renorm[static_cast<std::size_t>(proposal[i])];
        candidates.push_back(i);
      }
    }

    // Commit policy over still-missing tokens.
    std::vector<std::size_t> chosen;
    if (req.decoder == DecoderKind::Autoregressive) {
      if (!candidates.empty()) chosen.push_back(candidates.front());
    } else {
      chosen = candidates;
      std::stable_sort(chosen.begin(), chosen.end(),
                       [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });
      if (chosen.size() > static_cast<std::size_t>(k)) chosen.resize(static_cast<std::size_t>(k));
      std::sort(chosen.begin(), chosen.end());
    }
    if (s == total_steps - 1 && chosen.size() != candidates.size() && !candidates.empty())
      throw Error(ErrorCode::Decoding, "MASK tokens would remain after the final step");

    TrajectoryStep step;
    step.t = t;
    for (std::size_t i = 0; i < n; ++i) {
      auto& tok = seq.tokens[i];
      if (missing[i] && !committed[i]) continue;
      tok.value = proposal[i];
    }
    for (std::size_t i : chosen) {
      seq.tokens[i].value = proposal[i];
      committed[i] = 1;
      step.committed.push_back({seq.tokens[i].element_index, seq.tokens[i].kind});
    }

    std::vector<AttributeStatus> shown(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (missing[i] && !committed[i])
        shown[i] = AttributeStatus::Missing;
      else
        shown[i] = statuses[i] == AttributeStatus::Coarse ? AttributeStatus::Coarse : AttributeStatus::Precise;
    }
    step.layout = detokenize(seq, shown, req.layout.canvas);
    if (on_step) on_step(step);
    result.trajectory.steps.push_back(std::move(step));
  }

  for (std::size_t i = 0; i < n; ++i)
    if (seq.tokens[i].value >= cfg.mask(seq.tokens[i].kind))
      throw Error(ErrorCode::Decoding, "decoder finished with MASK tokens");
  std::vector<AttributeStatus> final_status(n, AttributeStatus::Precise);
  result.layout = detokenize(seq, final_status, req.layout.canvas);
  return result;
}

// ---------------------------------------------------------------------------

json step_to_json(const TrajectoryStep& step, const QuantizerConfig& cfg, const CategoryVocabulary* vocab) {
  json committed = json::array();
  for (const auto& c : step.committed)
    committed.push_back({{"element", c.element}, {"attribute", std::string(to_string(c.kind))}});
  return {{"step", step.t}, {"layout", layout_to_json(step.layout, cfg, vocab)}, {"committed", std::move(committed)}};
}

json trajectory_to_json(const Trajectory& trajectory, const QuantizerConfig& cfg, const CategoryVocabulary* vocab) {
  json out = json::array();
  for (const auto& s : trajectory.steps) out.push_back(step_to_json(s, cfg, vocab));
  return out;
}

}  // namespace ldgm
