#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "ldgm/autograd.hpp"
#include "ldgm/layout.hpp"
#include "ldgm/optim.hpp"

namespace ldgm {

/// Minimum-cost assignment on a square cost matrix (row-major n x n).
/// Returns column assigned to each row.
std::vector<int> hungarian(std::span<const double> cost, int n);

double iou(const NormalizedBox& a, const NormalizedBox& b);

/// Per-category optimal IoU matching, summed over matches and divided by the
/// reference element count.
double max_iou_pair(const Layout& generated, const Layout& reference, const QuantizerConfig& cfg);

enum class IouPairing { BySource, BestWithinCategoryMultiset };

/// Mean over generated layouts. BySource pairs generated[i] with
/// references[i]; otherwise each generated layout takes its best reference
/// among those with the same category multiset (0 when none exists).
double max_iou(std::span<const Layout> generated, std::span<const Layout> references, const QuantizerConfig& cfg,
               IouPairing pairing);

double alignment(const Layout& layout, const QuantizerConfig& cfg);
double overlap(const Layout& layout, const QuantizerConfig& cfg);

struct RetentionCount {
  long kept = 0;
  long precise = 0;
  std::optional<double> percent() const {
    if (precise == 0) return std::nullopt;
    return 100.0 * static_cast<double>(kept) / static_cast<double>(precise);
  }
};
RetentionCount retention_count(const Layout& input, const Layout& output);
std::optional<double> retention(const Layout& input, const Layout& output);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); rows are samples.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// ---------------------------------------------------------------------------

struct FeatureExtractorConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 2;
  int d_ffn = 256;
  int feature_dim = 256;
  int batch_size = 32;
  int steps = 300;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Layout encoder trained to tell real layouts from corrupted ones; the
/// feature is the penultimate (pooled, projected) activation.
class FeatureExtractor {
 public:
  FeatureExtractor(FeatureExtractorConfig cfg, QuantizerConfig quantizer);

  const FeatureExtractorConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return params_; }

  std::vector<std::vector<double>> features(std::span<const Layout> layouts) const;
  /// P(real) per layout.
  std::vector<double> real_probability(std::span<const Layout> layouts) const;

  /// Returns held-out accuracy on a 10% split of `corpus`.
  double train(std::span<const Layout> corpus);

  /// Status-preserving perturbation of geometry and categories.
  Layout corrupt(const Layout& layout, Rng& rng) const;

 private:
  struct Outputs {
    nn::Var features;
    nn::Var logits;
  };
  Outputs forward(nn::Graph& g, std::span<const Layout> layouts);

  FeatureExtractorConfig cfg_;
  QuantizerConfig quantizer_;
  nn::ParameterStore params_;
  std::array<int, kNumKinds> value_offset_{};
};

struct MetricReport {
  double max_iou = 0.0;
  std::optional<double> fid;
  double alignment = 0.0;
  double overlap = 0.0;
  std::optional<double> retention;
  long n_layouts = 0;
};

nlohmann::json to_json(const MetricReport& report);

/// Corpus-level report. `inputs` (same length as generated, may be empty)
/// drive retention; `extractor` may be null to skip FID.
MetricReport evaluate(std::span<const Layout> generated, std::span<const Layout> references,
                      std::span<const Layout> inputs, const QuantizerConfig& cfg, IouPairing pairing,
                      const FeatureExtractor* extractor);

}  // namespace ldgm
