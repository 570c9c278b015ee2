#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldgm/data.hpp"
#include "ldgm/eval.hpp"
#include "ldgm/inference.hpp"
#include "ldgm/runtime.hpp"

namespace ldgm {

struct GenerateOptions {
  TaskKind task = TaskKind::GenT;
  DecoderKind decoder = DecoderKind::ConfidenceTopK;
  int steps = 0;  // 0 uses the checkpoint's T
  std::uint64_t seed = 0;
  double temperature = 1.0;
  bool clamp = false;
  bool trajectory = false;
  int threads = 1;
};

struct GeneratedItem {
  std::string source_id;
  Layout source;
  Layout input;
  DecodeResult result;
};

/// Builds one task per source (seeded per index) and decodes them, fanning
/// out over `options.threads` workers; results keep source order.
std::vector<GeneratedItem> generate_many(const ModelBundle& bundle, std::span<const Layout> sources,
                                         std::span<const std::string> ids, const GenerateOptions& options);

/// {"header": ..., "results": [{"source_id", "source", "input", "output", "trajectory"?}]}
nlohmann::json generation_to_json(const std::vector<GeneratedItem>& items, const ModelBundle& bundle,
                                  const nlohmann::json& header);

struct GenerationFile {
  nlohmann::json header;
  QuantizerConfig quantizer;
  CategoryVocabulary vocabulary;
  TaskKind task = TaskKind::GenT;
  std::vector<Layout> sources;
  std::vector<Layout> inputs;
  std::vector<Layout> outputs;
};
GenerationFile read_generation(const std::filesystem::path& path);

/// Metrics for a generation run; conditional tasks pair by source.
MetricReport evaluate_generation(const GenerationFile& file, const FeatureExtractor* extractor);

// ---------------------------------------------------------------------------

struct AblationOptions {
  long train_steps = 2000;
  int eval_count = 100;
  std::uint64_t seed = 0;
  TaskKind eval_task = TaskKind::GenPCM;
  int fid_steps = 200;  // 0 disables FID
  int threads = 1;
  std::ostream* progress = nullptr;
};

struct AblationRow {
  std::string section;  // "strategy-noise", "level", "decoder"
  StrategyKind strategy = StrategyKind::ParallelDecoupled;
  NoiseKind noise = NoiseKind::DiscretizedGaussian;
  DecouplingLevel level = DecouplingLevel::TypeGroup;
  DecoderKind decoder = DecoderKind::ConfidenceTopK;
  MetricReport metrics;
  double final_l_vlb = 0.0;
  double train_seconds = 0.0;
};

/// 12 strategy x noise rows, 4 decoupling-level rows and 3 decoder rows;
/// configurations that coincide share one trained model.
std::vector<AblationRow> run_ablation(const Corpus& corpus, const TrainConfig& base, const AblationOptions& options);

nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);
std::string ablation_to_csv(const std::vector<AblationRow>& rows);

}  // namespace ldgm
