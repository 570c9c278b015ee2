#include "ldgm/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ldgm/denoiser.hpp"
#include "ldgm/error.hpp"

namespace ldgm {

using nlohmann::json;

std::vector<int> hungarian(std::span<const double> cost, int n) {
  if (n < 0 || cost.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n))
    throw Error(ErrorCode::Shape, "hungarian: cost matrix must be n x n");
  if (n == 0) return {};
  // Shortest augmenting paths with potentials; 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  const auto N = static_cast<std::size_t>(n);
  std::vector<double> u(N + 1, 0.0), v(N + 1, 0.0);
  std::vector<std::size_t> p(N + 1, 0), way(N + 1, 0);
  auto a = [&](std::size_t i, std::size_t j) { return cost[(i - 1) * N + (j - 1)]; };
  for (std::size_t i = 1; i <= N; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(N + 1, inf);
    std::vector<char> used(N + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= N; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= N; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(N, -1);
  for (std::size_t j = 1; j <= N; ++j) assignment[p[j] - 1] = static_cast<int>(j - 1);
  return assignment;
}

double iou(const NormalizedBox& a, const NormalizedBox& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

void require_complete(const Layout& layout, const QuantizerConfig& cfg) {
  if (has_mask(layout, cfg)) throw Error(ErrorCode::IncompleteLayout, "metric needs a complete layout");
}

std::vector<int> category_multiset(const Layout& layout) {
  std::vector<int> cats;
  for (const auto& e : layout.elements) cats.push_back(e[AttributeKind::Category].bin);
  std::sort(cats.begin(), cats.end());
  return cats;
}

}  // namespace

double max_iou_pair(const Layout& generated, const Layout& reference, const QuantizerConfig& cfg) {
  require_complete(generated, cfg);
  require_complete(reference, cfg);
  if (reference.elements.empty()) throw Error(ErrorCode::Domain, "reference layout is empty");
  std::map<int, std::pair<std::vector<NormalizedBox>, std::vector<NormalizedBox>>> by_cat;
  for (const auto& e : generated.elements)
    by_cat[e[AttributeKind::Category].bin].first.push_back(normalized_box(e, cfg));
  for (const auto& e : reference.elements)
    by_cat[e[AttributeKind::Category].bin].second.push_back(normalized_box(e, cfg));
  double total = 0.0;
  for (const auto& [cat, boxes] : by_cat) {
    const auto& [gen, ref] = boxes;
    const int n = static_cast<int>(std::max(gen.size(), ref.size()));
    if (gen.empty() || ref.empty()) continue;
    std::vector<double> cost(static_cast<std::size_t>(n * n), 0.0);
    for (std::size_t i = 0; i < gen.size(); ++i)
      for (std::size_t j = 0; j < ref.size(); ++j) cost[i * static_cast<std::size_t>(n) + j] = -iou(gen[i], ref[j]);
    const auto match = hungarian(cost, n);
    for (std::size_t i = 0; i < gen.size(); ++i) {
      const auto j = static_cast<std::size_t>(match[i]);
      if (j < ref.size()) total += -cost[i * static_cast<std::size_t>(n) + j];
    }
  }
  return total / static_cast<double>(reference.elements.size());
}

double max_iou(std::span<const Layout> generated, std::span<const Layout> references, const QuantizerConfig& cfg,
               IouPairing pairing) {
  if (generated.empty() || references.empty()) throw Error(ErrorCode::Domain, "max_iou needs non-empty sets");
  double sum = 0.0;
  if (pairing == IouPairing::BySource) {
    if (generated.size() != references.size())
      throw Error(ErrorCode::Shape, "source pairing needs equally sized collections");
    for (std::size_t i = 0; i < generated.size(); ++i) sum += max_iou_pair(generated[i], references[i], cfg);
  } else {
    std::map<std::vector<int>, std::vector<std::size_t>> index;
    for (std::size_t j = 0; j < references.size(); ++j) index[category_multiset(references[j])].push_back(j);
    for (const auto& g : generated) {
      auto it = index.find(category_multiset(g));
      double best = 0.0;
      if (it != index.end())
        for (std::size_t j : it->second) best = std::max(best, max_iou_pair(g, references[j], cfg));
      sum += best;
    }
  }
  return sum / static_cast<double>(generated.size());
}

double alignment(const Layout& layout, const QuantizerConfig& cfg) {
  require_complete(layout, cfg);
  const std::size_t n = layout.elements.size();
  if (n < 2) return 0.0;
  std::vector<std::array<double, 6>> items;
  for (const auto& e : layout.elements) {
    const auto b = normalized_box(e, cfg);
    items.push_back({b.x0, (b.x0 + b.x1) / 2, b.x1, b.y0, (b.y0 + b.y1) / 2, b.y1});
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      for (std::size_t k = 0; k < 6; ++k) best = std::min(best, std::abs(items[i][k] - items[j][k]));
    }
    sum += best;
  }
  return 100.0 * sum / static_cast<double>(n);
}

double overlap(const Layout& layout, const QuantizerConfig& cfg) {
  require_complete(layout, cfg);
  const std::size_t n = layout.elements.size();
  if (n == 0) return 0.0;
  std::vector<NormalizedBox> boxes;
  for (const auto& e : layout.elements) boxes.push_back(normalized_box(e, cfg));
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double area = boxes[i].area();
    if (area <= 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double iw = std::max(0.0, std::min(boxes[i].x1, boxes[j].x1) - std::max(boxes[i].x0, boxes[j].x0));
      const double ih = std::max(0.0, std::min(boxes[i].y1, boxes[j].y1) - std::max(boxes[i].y0, boxes[j].y0));
      sum += iw * ih / area;
    }
  }
  return 100.0 * sum / static_cast<double>(n);
}

RetentionCount retention_count(const Layout& input, const Layout& output) {
  if (input.elements.size() != output.elements.size())
    throw Error(ErrorCode::Shape, "retention needs aligned element lists");
  RetentionCount rc;
  for (std::size_t i = 0; i < input.elements.size(); ++i) {
    for (auto kind : kAllKinds) {
      if (input.elements[i][kind].status != AttributeStatus::Precise) continue;
      ++rc.precise;
      if (output.elements[i][kind].bin == input.elements[i][kind].bin) ++rc.kept;
    }
  }
  return rc;
}

std::optional<double> retention(const Layout& input, const Layout& output) {
  return retention_count(input, output).percent();
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::Domain, "frechet_distance needs non-empty feature sets");
  const std::size_t dim = a.front().size();
  auto to_matrix = [dim](const std::vector<std::vector<double>>& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != dim) throw Error(ErrorCode::Shape, "feature dimensions differ");
      for (std::size_t j = 0; j < dim; ++j) {
        if (!std::isfinite(rows[i][j])) throw Error(ErrorCode::Domain, "non-finite feature");
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
      }
    }
    return m;
  };
  auto stats = [dim](const Eigen::MatrixXd& m) {
    const Eigen::VectorXd mu = m.colwise().mean().transpose();
    const Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
    const double denom = m.rows() > 1 ? static_cast<double>(m.rows() - 1) : 1.0;
    Eigen::MatrixXd cov = centered.transpose() * centered / denom;
    if (static_cast<std::size_t>(m.rows()) < dim + 1)
      cov += 1e-6 * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    return std::make_pair(mu, cov);
  };
  const auto [mu_a, cov_a] = stats(to_matrix(a));
  const auto [mu_b, cov_b] = stats(to_matrix(b));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd sqrt_eval = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * sqrt_eval.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(d)) throw Error(ErrorCode::Domain, "non-finite Frechet distance");
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(FeatureExtractorConfig cfg, QuantizerConfig quantizer)
    : cfg_(cfg), quantizer_(quantizer) {
  if (cfg_.d_model % cfg_.n_heads != 0) throw Error(ErrorCode::Validation, "d_model must divide into heads");
  Rng rng(cfg_.seed, "feature-extractor-init");
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ffn = static_cast<std::size_t>(cfg_.d_ffn);
  const auto fd = static_cast<std::size_t>(cfg_.feature_dim);
  auto init = [&](std::size_t r, std::size_t c, double s) {
    auto t = nn::random_normal(r, c, s, rng);
    t.round_to(nn::Precision::F32);
    return t;
  };
  std::size_t rows = 0;
  for (std::size_t k = 0; k < kNumKinds; ++k) {
    value_offset_[k] = static_cast<int>(rows);
    rows += static_cast<std::size_t>(quantizer_.vocab(kAllKinds[k])) + 1;
  }
  params_.add("embed.value", init(rows, d, 0.1));
  params_.add("embed.kind", init(kNumKinds, d, 0.1));
  params_.add("embed.position", init(static_cast<std::size_t>(quantizer_.max_elements), d, 0.1));
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    params_.add(pre + "ln1.gain", nn::Tensor(1, d, 1.0));
    params_.add(pre + "ln1.bias", nn::Tensor(1, d, 0.0));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) params_.add(pre + w, init(d, d, s));
    params_.add(pre + "ln2.gain", nn::Tensor(1, d, 1.0));
    params_.add(pre + "ln2.bias", nn::Tensor(1, d, 0.0));
    params_.add(pre + "ffn.w1", init(d, ffn, s));
    params_.add(pre + "ffn.b1", nn::Tensor(1, ffn, 0.0));
    params_.add(pre + "ffn.w2", init(ffn, d, 1.0 / std::sqrt(static_cast<double>(ffn))));
    params_.add(pre + "ffn.b2", nn::Tensor(1, d, 0.0));
  }
  params_.add("final_ln.gain", nn::Tensor(1, d, 1.0));
  params_.add("final_ln.bias", nn::Tensor(1, d, 0.0));
  params_.add("feature.weight", init(d, fd, s));
  params_.add("feature.bias", nn::Tensor(1, fd, 0.0));
  params_.add("classifier.weight", init(fd, 2, 1.0 / std::sqrt(static_cast<double>(fd))));
  params_.add("classifier.bias", nn::Tensor(1, 2, 0.0));
}

FeatureExtractor::Outputs FeatureExtractor::forward(nn::Graph& g, std::span<const Layout> layouts) {
  auto P = [&](const std::string& name) { return g.param(params_.get(name)); };
  std::vector<TokenSequence> seqs;
  std::vector<int> value_idx, kind_idx, pos_idx;
  for (const auto& l : layouts) {
    require_complete(l, quantizer_);
    if (l.elements.empty() || l.elements.size() > static_cast<std::size_t>(quantizer_.max_elements))
      throw Error(ErrorCode::Domain, "layout element count outside [1, N_max]");
    TokenSequence seq = tokenize(l);
    seq.relations.clear();
    for (const auto& tok : seq.tokens) {
      value_idx.push_back(value_offset_[index_of(tok.kind)] + tok.value);
      kind_idx.push_back(static_cast<int>(index_of(tok.kind)));
      pos_idx.push_back(tok.element_index);
    }
    seqs.push_back(std::move(seq));
  }
  auto layout = std::make_shared<const AttentionLayout>(attention_layout(seqs));
  const auto dh = static_cast<std::size_t>(cfg_.d_model / cfg_.n_heads);
  const nn::Var zero_rel = g.constant(nn::Tensor(kNumRelationLabels, dh));

  nn::Var h = g.gather_rows(P("embed.value"), std::move(value_idx));
  h = g.add(h, g.gather_rows(P("embed.kind"), std::move(kind_idx)));
  h = g.add(h, g.gather_rows(P("embed.position"), std::move(pos_idx)));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const auto a = g.layer_norm(h, P(pre + "ln1.gain"), P(pre + "ln1.bias"));
    const auto att = relation_attention(g, g.matmul(a, P(pre + "attn.wq")), g.matmul(a, P(pre + "attn.wk")),
                                        g.matmul(a, P(pre + "attn.wv")), zero_rel, zero_rel, layout, cfg_.n_heads);
    h = g.add(h, g.matmul(att, P(pre + "attn.wo")));
    const auto f = g.layer_norm(h, P(pre + "ln2.gain"), P(pre + "ln2.bias"));
    const auto hid = g.gelu(g.add_row(g.matmul(f, P(pre + "ffn.w1")), P(pre + "ffn.b1")));
    h = g.add(h, g.add_row(g.matmul(hid, P(pre + "ffn.w2")), P(pre + "ffn.b2")));
  }
  h = g.layer_norm(h, P("final_ln.gain"), P("final_ln.bias"));
  nn::Tensor pool(layouts.size(), layout->offsets.back());
  for (std::size_t s = 0; s < layouts.size(); ++s) {
    const auto lo = layout->offsets[s];
    const auto hi = layout->offsets[s + 1];
    for (auto t = lo; t < hi; ++t) pool(s, t) = 1.0 / static_cast<double>(hi - lo);
  }
  const auto pooled = g.matmul(g.constant(std::move(pool)), h);
  const auto feat = g.gelu(g.add_row(g.matmul(pooled, P("feature.weight")), P("feature.bias")));
  const auto logits = g.add_row(g.matmul(feat, P("classifier.weight")), P("classifier.bias"));
  return {feat, logits};
}

std::vector<std::vector<double>> FeatureExtractor::features(std::span<const Layout> layouts) const {
  std::vector<std::vector<double>> out;
  auto& self = const_cast<FeatureExtractor&>(*this);
  for (std::size_t start = 0; start < layouts.size(); start += 64) {
    const auto chunk = layouts.subspan(start, std::min<std::size_t>(64, layouts.size() - start));
    nn::Graph g(nn::Precision::F32, false);
    const auto o = self.forward(g, chunk);
    const auto& f = g.value(o.features);
    for (std::size_t r = 0; r < f.rows(); ++r) out.emplace_back(f.row(r).begin(), f.row(r).end());
  }
  return out;
}

std::vector<double> FeatureExtractor::real_probability(std::span<const Layout> layouts) const {
  std::vector<double> out;
  auto& self = const_cast<FeatureExtractor&>(*this);
  for (std::size_t start = 0; start < layouts.size(); start += 64) {
    const auto chunk = layouts.subspan(start, std::min<std::size_t>(64, layouts.size() - start));
    nn::Graph g(nn::Precision::F32, false);
    const auto o = self.forward(g, chunk);
    const auto& lp = g.value(g.log_softmax_rows(o.logits));
    for (std::size_t r = 0; r < lp.rows(); ++r) out.push_back(std::exp(lp(r, 1)));
  }
  return out;
}

Layout FeatureExtractor::corrupt(const Layout& layout, Rng& rng) const {
  Layout out = layout;
  bool changed = false;
  while (!changed) {
    for (auto& e : out.elements) {
      if (!rng.bernoulli(0.5)) continue;
      if (rng.bernoulli(0.2) && quantizer_.category_count > 1) {
        auto& c = e[AttributeKind::Category].bin;
        c = (c + rng.uniform_int(1, quantizer_.category_count - 1)) % quantizer_.category_count;
        changed = true;
        continue;
      }
      const auto kind = kAllKinds[static_cast<std::size_t>(rng.uniform_int(1, 4))];
      const int K = quantizer_.vocab(kind);
      const int span = std::max(1, K / 8);
      auto& bin = e[kind].bin;
      const int moved = std::clamp(bin + rng.uniform_int(-span, span), 0, K - 1);
      changed = changed || moved != bin;
      bin = moved;
    }
  }
  return out;
}

double FeatureExtractor::train(std::span<const Layout> corpus) {
  if (corpus.size() < static_cast<std::size_t>(2 * cfg_.batch_size))
    throw Error(ErrorCode::Data, "feature extractor corpus smaller than two batches");
  bool degenerate = true;
  for (const auto& l : corpus) degenerate = degenerate && l == corpus.front();
  if (degenerate) throw Error(ErrorCode::Data, "degenerate corpus: all layouts identical");

  const std::size_t held = std::max<std::size_t>(1, corpus.size() / 10);
  const auto train_set = corpus.subspan(held);
  const auto test_set = corpus.first(held);

  nn::AdamWConfig oc;
  oc.learning_rate = cfg_.learning_rate;
  oc.warmup_steps = std::max(1, cfg_.steps / 20);
  oc.clip_norm = 1.0;
  nn::AdamW opt(params_, oc);
  const int half = std::max(1, cfg_.batch_size / 2);
  for (int step = 1; step <= cfg_.steps; ++step) {
    Rng rng(derive_seed(cfg_.seed, "feature-extractor-step", static_cast<std::uint64_t>(step)));
    std::vector<Layout> batch;
    std::vector<int> labels;
    for (int i = 0; i < half; ++i) {
      const auto& real = train_set[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(train_set.size()) - 1))];
      batch.push_back(real);
      labels.push_back(1);
      batch.push_back(corrupt(real, rng));
      labels.push_back(0);
    }
    params_.zero_grad();
    nn::Graph g(nn::Precision::F32);
    const auto o = forward(g, batch);
    g.backward(g.nll(g.log_softmax_rows(o.logits), labels));
    opt.step(params_);
  }

  Rng rng(cfg_.seed, "feature-extractor-heldout");
  std::vector<Layout> eval;
  std::vector<int> labels;
  for (const auto& l : test_set) {
    eval.push_back(l);
    labels.push_back(1);
    eval.push_back(corrupt(l, rng));
    labels.push_back(0);
  }
  const auto probs = real_probability(eval);
  int correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) correct += ((probs[i] >= 0.5) == (labels[i] == 1)) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------

json to_json(const MetricReport& r) {
  return {{"max_iou", r.max_iou},
          {"fid", r.fid ? json(*r.fid) : json(nullptr)},
          {"alignment", r.alignment},
          {"overlap", r.overlap},
          {"retention", r.retention ? json(*r.retention) : json(nullptr)},
          {"n_layouts", r.n_layouts}};
}

MetricReport evaluate(std::span<const Layout> generated, std::span<const Layout> references,
                      std::span<const Layout> inputs, const QuantizerConfig& cfg, IouPairing pairing,
                      const FeatureExtractor* extractor) {
  if (generated.empty()) throw Error(ErrorCode::Domain, "no generated layouts");
  MetricReport r;
  r.n_layouts = static_cast<long>(generated.size());
  r.max_iou = max_iou(generated, references, cfg, pairing);
  for (const auto& l : generated) {
    r.alignment += alignment(l, cfg);
    r.overlap += overlap(l, cfg);
  }
  r.alignment /= static_cast<double>(generated.size());
  r.overlap /= static_cast<double>(generated.size());
  if (!inputs.empty()) {
    if (inputs.size() != generated.size()) throw Error(ErrorCode::Shape, "inputs and outputs differ in count");
    RetentionCount total;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto rc = retention_count(inputs[i], generated[i]);
      total.kept += rc.kept;
      total.precise += rc.precise;
    }
    r.retention = total.percent();
  }
  if (extractor) r.fid = frechet_distance(extractor->features(generated), extractor->features(references));
  return r;
}

}  // namespace ldgm
