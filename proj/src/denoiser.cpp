#include "ldgm/denoiser.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "ldgm/error.hpp"

namespace ldgm {

using nn::Graph;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw Error(ErrorCode::Validation, "d_model must be a positive multiple of n_heads");
  if (n_layers < 0 || d_ffn < 1 || max_elements < 1) throw Error(ErrorCode::Validation, "invalid model dimensions");
  for (int k : vocab)
    if (k < 2) throw Error(ErrorCode::Validation, "every vocabulary needs at least 2 values");
}

ModelConfig ModelConfig::toy(std::array<int, kNumKinds> vocab, int max_elements) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 8;
  cfg.n_layers = 2;
  cfg.d_ffn = 128;
  cfg.vocab = vocab;
  cfg.max_elements = max_elements;
  return cfg;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"d_model", cfg.d_model}, {"n_heads", cfg.n_heads},   {"n_layers", cfg.n_layers},
          {"d_ffn", cfg.d_ffn},     {"vocab", cfg.vocab},       {"max_elements", cfg.max_elements}};
}

ModelConfig model_config_from_json(const nlohmann::json& doc) {
  ModelConfig cfg;
  try {
    cfg.d_model = doc.at("d_model").get<int>();
    cfg.n_heads = doc.at("n_heads").get<int>();
    cfg.n_layers = doc.at("n_layers").get<int>();
    cfg.d_ffn = doc.at("d_ffn").get<int>();
    cfg.vocab = doc.at("vocab").get<std::array<int, kNumKinds>>();
    cfg.max_elements = doc.at("max_elements").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("bad model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

AttentionLayout attention_layout(std::span<const TokenSequence> batch) {
  AttentionLayout layout;
  layout.offsets.push_back(0);
  for (const auto& seq : batch) {
    const std::size_t n = seq.tokens.size();
    layout.offsets.push_back(layout.offsets.back() + n);
    std::vector<std::uint8_t> labels(n * n, static_cast<std::uint8_t>(RelationLabel::Unavailable));
    if (!seq.relations.empty()) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const int ei = seq.tokens[i].element_index;
          const int ej = seq.tokens[j].element_index;
          if (ei == ej) continue;
          if (auto it = seq.relations.find({ei, ej}); it != seq.relations.end())
            labels[i * n + j] = static_cast<std::uint8_t>(it->second);
        }
      }
    }
    layout.labels.push_back(std::move(labels));
  }
  return layout;
}

Var relation_attention(Graph& g, Var q, Var k, Var v, Var rel_q, Var rel_k,
                       std::shared_ptr<const AttentionLayout> layout_ptr, int heads) {
  const AttentionLayout& layout = *layout_ptr;
  const Tensor& Q = g.value(q);
  const Tensor& K = g.value(k);
  const Tensor& V = g.value(v);
  const Tensor& RQ = g.value(rel_q);
  const Tensor& RK = g.value(rel_k);
  const std::size_t n = Q.rows();
  const std::size_t d = Q.cols();
  const auto H = static_cast<std::size_t>(heads);
  const std::size_t dh = d / H;
  if (!K.same_shape(Q) || !V.same_shape(Q) || d % H != 0 || layout.offsets.back() != n || RQ.cols() != dh ||
      !RK.same_shape(RQ) || RQ.rows() != static_cast<std::size_t>(kNumRelationLabels))
    throw Error(ErrorCode::Shape, "relation_attention: inconsistent shapes");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights per (segment, head), stored contiguously for backward.
  auto weights = std::make_shared<std::vector<double>>();
  std::size_t total = 0;
  for (std::size_t s = 0; s + 1 < layout.offsets.size(); ++s) {
    const std::size_t len = layout.offsets[s + 1] - layout.offsets[s];
    total += len * len * H;
  }
  weights->resize(total);

  Tensor out(n, d);
  std::size_t wpos = 0;
  std::vector<double> qt(dh);
  for (std::size_t s = 0; s + 1 < layout.offsets.size(); ++s) {
    const std::size_t o = layout.offsets[s];
    const std::size_t len = layout.offsets[s + 1] - o;
    const auto& labels = layout.labels[s];
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        double* a = weights->data() + wpos + i * len;
        double mx = -1e300;
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t lab = labels[i * len + j];
          double e = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            e += (Q(o + i, c0 + c) + RQ(lab, c)) * (K(o + j, c0 + c) + RK(lab, c));
          a[j] = e * scale;
          mx = std::max(mx, a[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < len; ++j) sum += a[j] = std::exp(a[j] - mx);
        for (std::size_t j = 0; j < len; ++j) {
          a[j] /= sum;
          for (std::size_t c = 0; c < dh; ++c) out(o + i, c0 + c) += a[j] * V(o + j, c0 + c);
        }
      }
      wpos += len * len;
    }
  }

  return g.custom(
      {q, k, v, rel_q, rel_k}, std::move(out),
      [&g, q, k, v, rel_q, rel_k, layout_ptr, weights, H, dh, scale](const Tensor& grad, std::span<Tensor* const> grads) {
        const AttentionLayout& layout = *layout_ptr;
        const Tensor& Q = g.value(q);
        const Tensor& K = g.value(k);
        const Tensor& V = g.value(v);
        const Tensor& RQ = g.value(rel_q);
        const Tensor& RK = g.value(rel_k);
        Tensor* dQ = grads[0];
        Tensor* dK = grads[1];
        Tensor* dV = grads[2];
        Tensor* dRQ = grads[3];
        Tensor* dRK = grads[4];
        std::size_t wpos = 0;
        std::vector<double> da;
        std::vector<double> de;
        for (std::size_t s = 0; s + 1 < layout.offsets.size(); ++s) {
          const std::size_t o = layout.offsets[s];
          const std::size_t len = layout.offsets[s + 1] - o;
          const auto& labels = layout.labels[s];
          da.resize(len);
          de.resize(len);
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const double* a = weights->data() + wpos + i * len;
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += grad(o + i, c0 + c) * V(o + j, c0 + c);
                  if (dV) (*dV)(o + j, c0 + c) += a[j] * grad(o + i, c0 + c);
                }
                da[j] = acc;
                dot += a[j] * acc;
              }
              for (std::size_t j = 0; j < len; ++j) de[j] = a[j] * (da[j] - dot) * scale;
              for (std::size_t j = 0; j < len; ++j) {
                const std::size_t lab = labels[i * len + j];
                for (std::size_t c = 0; c < dh; ++c) {
                  const double qv = Q(o + i, c0 + c) + RQ(lab, c);
                  const double kv = K(o + j, c0 + c) + RK(lab, c);
                  if (dQ) (*dQ)(o + i, c0 + c) += de[j] * kv;
                  if (dRQ) (*dRQ)(lab, c) += de[j] * kv;
                  if (dK) (*dK)(o + j, c0 + c) += de[j] * qv;
                  if (dRK) (*dRK)(lab, c) += de[j] * qv;
                }
              }
            }
            wpos += len * len;
          }
        }
      });
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(ModelConfig cfg, std::uint64_t seed, nn::Precision precision)
    : cfg_(cfg), precision_(precision) {
  cfg_.validate();
  Rng rng(seed, "denoiser-init");
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ffn = static_cast<std::size_t>(cfg_.d_ffn);
  const auto dh = static_cast<std::size_t>(cfg_.d_head());
  auto init = [&](std::size_t r, std::size_t c, double stddev) {
    Tensor t = nn::random_normal(r, c, stddev, rng);
    t.round_to(precision_);
    return t;
  };
  const double embed_std = 0.1;

  std::size_t value_rows = 0;
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    value_offset_[k] = static_cast<int>(value_rows);
    value_rows += static_cast<std::size_t>(cfg_.vocab[k]) + 1;
  }
  params_.add("embed.value", init(value_rows, d, embed_std));
  params_.add("embed.kind", init(kNumKinds, d, embed_std));
  params_.add("embed.position", init(static_cast<std::size_t>(cfg_.max_elements), d, embed_std));
  params_.add("embed.flag", init(2, d, embed_std));

  // Relation tables; the "unavailable" row starts at zero.
  for (const char* side : {"relation.query", "relation.key"}) {
    Tensor t = init(kNumRelationLabels, dh, 0.02);
    for (std::size_t c = 0; c < dh; ++c) t(static_cast<std::size_t>(RelationLabel::Unavailable), c) = 0.0;
    params_.add(side, std::move(t));
  }

  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double residual_std = in_std / std::sqrt(2.0 * std::max(1, cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    params_.add(pre + "ln1.gain", Tensor(1, d, 1.0));
    params_.add(pre + "ln1.bias", Tensor(1, d, 0.0));
    params_.add(pre + "attn.wq", init(d, d, in_std));
    params_.add(pre + "attn.wk", init(d, d, in_std));
    params_.add(pre + "attn.wv", init(d, d, in_std));
    params_.add(pre + "attn.wo", init(d, d, residual_std));
    params_.add(pre + "attn.bo", Tensor(1, d, 0.0));
    params_.add(pre + "ln2.gain", Tensor(1, d, 1.0));
    params_.add(pre + "ln2.bias", Tensor(1, d, 0.0));
    params_.add(pre + "ffn.w1", init(d, ffn, in_std));
    params_.add(pre + "ffn.b1", Tensor(1, ffn, 0.0));
    params_.add(pre + "ffn.w2", init(ffn, d, residual_std * std::sqrt(static_cast<double>(d) / ffn)));
    params_.add(pre + "ffn.b2", Tensor(1, d, 0.0));
  }
  params_.add("final_ln.gain", Tensor(1, d, 1.0));
  params_.add("final_ln.bias", Tensor(1, d, 0.0));
  for (auto kind : kAllKinds) {
    const auto K = static_cast<std::size_t>(cfg_.vocab[index_of(kind)]);
    const std::string pre = "head." + std::string(to_string(kind)) + ".";
    params_.add(pre + "weight", init(d, K, in_std));
    params_.add(pre + "bias", Tensor(1, K, 0.0));
  }
}

Var Denoiser::p(Graph& g, const std::string& name) { return g.param(params_.get(name)); }

void Denoiser::check_batch(std::span<const TokenSequence> batch) const {
  for (const auto& seq : batch) {
    if (seq.tokens.size() > static_cast<std::size_t>(cfg_.max_elements) * kNumKinds)
      throw Error(ErrorCode::Domain, "sequence longer than 5 * N_max");
    for (const auto& tok : seq.tokens) {
      if (tok.element_index < 0 || tok.element_index >= cfg_.max_elements)
        throw Error(ErrorCode::Domain, "element index " + std::to_string(tok.element_index) + " >= N_max");
      if (tok.value < 0 || tok.value > cfg_.vocab[index_of(tok.kind)])
        throw Error(ErrorCode::Domain, "token value out of range for " + std::string(to_string(tok.kind)));
    }
  }
}

Var Denoiser::embed_tokens(Graph& g, std::span<const TokenSequence> batch) {
  check_batch(batch);
  std::vector<int> value_idx, kind_idx, pos_idx, flag_idx;
  for (const auto& seq : batch) {
    for (const auto& tok : seq.tokens) {
      value_idx.push_back(value_offset_[index_of(tok.kind)] + tok.value);
      kind_idx.push_back(static_cast<int>(index_of(tok.kind)));
      pos_idx.push_back(tok.element_index);
      flag_idx.push_back(tok.condition ? 1 : 0);
    }
  }
  Var h = g.gather_rows(p(g, "embed.value"), std::move(value_idx));
  h = g.add(h, g.gather_rows(p(g, "embed.kind"), std::move(kind_idx)));
  h = g.add(h, g.gather_rows(p(g, "embed.position"), std::move(pos_idx)));
  return g.add(h, g.gather_rows(p(g, "embed.flag"), std::move(flag_idx)));
}

DenoiserForward Denoiser::forward(Graph& g, std::span<const TokenSequence> batch) {
  auto layout = std::make_shared<const AttentionLayout>(attention_layout(batch));
  Var h = embed_tokens(g, batch);
  const Var rel_q = p(g, "relation.query");
  const Var rel_k = p(g, "relation.key");
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const Var a = g.layer_norm(h, p(g, pre + "ln1.gain"), p(g, pre + "ln1.bias"));
    const Var q = g.matmul(a, p(g, pre + "attn.wq"));
    const Var k = g.matmul(a, p(g, pre + "attn.wk"));
    const Var v = g.matmul(a, p(g, pre + "attn.wv"));
    const Var att = relation_attention(g, q, k, v, rel_q, rel_k, layout, cfg_.n_heads);
    h = g.add(h, g.add_row(g.matmul(att, p(g, pre + "attn.wo")), p(g, pre + "attn.bo")));
    const Var f = g.layer_norm(h, p(g, pre + "ln2.gain"), p(g, pre + "ln2.bias"));
    const Var hidden = g.gelu(g.add_row(g.matmul(f, p(g, pre + "ffn.w1")), p(g, pre + "ffn.b1")));
    h = g.add(h, g.add_row(g.matmul(hidden, p(g, pre + "ffn.w2")), p(g, pre + "ffn.b2")));
  }
  const Var hf = g.layer_norm(h, p(g, "final_ln.gain"), p(g, "final_ln.bias"));

  DenoiserForward out;
  std::array<std::vector<int>, kNumKinds> rows;
  std::size_t global = 0;
  for (const auto& seq : batch) {
    out.offsets.push_back(global);
    for (const auto& tok : seq.tokens) {
      auto& r = rows[index_of(tok.kind)];
      out.slot.emplace_back(static_cast<int>(index_of(tok.kind)), static_cast<int>(r.size()));
      r.push_back(static_cast<int>(global++));
    }
  }
  out.offsets.push_back(global);
  for (auto kind : kAllKinds) {
    const auto ki = index_of(kind);
    if (rows[ki].empty()) continue;
    const std::string pre = "head." + std::string(to_string(kind)) + ".";
    const Var sel = g.gather_rows(hf, std::move(rows[ki]));
    const Var logits = g.add_row(g.matmul(sel, p(g, pre + "weight")), p(g, pre + "bias"));
    out.log_probs[ki] = g.log_softmax_rows(logits);
  }
  return out;
}

std::vector<TokenDistributions> Denoiser::predict(std::span<const TokenSequence> batch) const {
  Graph g(precision_, false);
  // No gradient is recorded, so parameters are only read.
  auto& self = const_cast<Denoiser&>(*this);
  const auto fwd = self.forward(g, batch);
  std::vector<TokenDistributions> out(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (std::size_t t = fwd.offsets[s]; t < fwd.offsets[s + 1]; ++t) {
      const auto [kind, row] = fwd.slot[t];
      const auto lp = g.value(fwd.log_probs[static_cast<std::size_t>(kind)]).row(static_cast<std::size_t>(row));
      std::vector<double> probs(lp.size());
      for (std::size_t c = 0; c < lp.size(); ++c) probs[c] = std::exp(lp[c]);
      out[s].push_back(std::move(probs));
    }
  }
  return out;
}

std::vector<double> reverse_distribution(std::span<const double> p_x0, int x_t, int t, const TransitionStack& stack) {
  const int K = stack.vocab();
  if (static_cast<int>(p_x0.size()) != K) throw Error(ErrorCode::Shape, "x0 distribution has the wrong size");
  const auto table = posterior_table(x_t, t, stack);
  double weight = 0.0;
  for (int c = 0; c < K; ++c)
    if (table.possible[static_cast<std::size_t>(c)]) weight += p_x0[static_cast<std::size_t>(c)];
  if (!(weight > 0.0))
    throw Error(ErrorCode::Degenerate, "no x0 with positive mass can reach x_t=" + std::to_string(x_t));
  std::vector<double> out(static_cast<std::size_t>(K) + 1, 0.0);
  for (int k = 0; k <= K; ++k) {
    double acc = 0.0;
    for (int c = 0; c < K; ++c) acc += table.at(k, c) * p_x0[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(k)] = acc / weight;
  }
  return out;
}

}  // namespace ldgm
