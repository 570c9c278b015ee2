#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldgm/layout.hpp"
#include "ldgm/rng.hpp"

namespace ldgm {

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Deterministic seeded shuffle of [0, n) cut by `fractions`.
Splits make_splits(std::size_t n, std::array<double, 3> fractions = {0.85, 0.05, 0.10}, std::uint64_t seed = 0);

struct DatasetManifest {
  std::string name;
  CategoryVocabulary vocabulary;
  QuantizerConfig quantizer;
  std::string canvas_convention = "top-left origin, device units";
  std::size_t files_read = 0;
  std::size_t total = 0;
  std::array<std::size_t, 3> split_counts{};
  std::map<std::string, std::size_t> drops;  // reason -> count
  nlohmann::json filters = nlohmann::json::object();
  std::uint64_t split_seed = 0;
};

nlohmann::json to_json(const DatasetManifest& manifest);

struct Corpus {
  std::vector<Layout> layouts;
  std::vector<std::string> ids;
  Splits splits;
  DatasetManifest manifest;

  const QuantizerConfig& quantizer() const { return manifest.quantizer; }
  const CategoryVocabulary& vocabulary() const { return manifest.vocabulary; }
  std::vector<Layout> subset(const std::vector<std::size_t>& index) const;
};

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  int n_layouts = 1000;
  int category_count = 5;
  int grid_bins = 32;
  double jitter_std = 0.003;
  int min_elements = 2;
  int max_elements = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Body categories are drawn from these weights; element 0 is always a title.
inline constexpr std::array<double, 4> kSynthBodyWeights = {0.4, 0.3, 0.2, 0.1};
inline constexpr std::array<const char*, 5> kSynthCategoryNames = {"title", "text", "image", "button", "icon"};

/// Expected fraction of elements per category under the generator rules.
std::vector<double> synth_category_distribution(const SynthConfig& cfg);
ContinuousLayout synth_layout(const SynthConfig& cfg, Rng& rng);
Corpus synth_corpus(const SynthConfig& cfg);

// ---------------------------------------------------------------------------
// Ingestion

enum class SourceFormat { Json, Rico, Coco };
SourceFormat format_from_string(std::string_view name);

enum class VocabPolicy { TopK, Strict };

struct IngestOptions {
  SourceFormat format = SourceFormat::Json;
  VocabPolicy policy = VocabPolicy::TopK;
  int top_k = 13;
  int max_elements = 25;
  std::array<int, 4> geometry_bins{128, 128, 128, 128};
  std::optional<CategoryVocabulary> vocabulary;  // fixed vocabulary instead of top-k
  std::uint64_t split_seed = 0;
  std::string name = "corpus";
};

/// Reads a file or a directory of files (sorted by name; manifest.json is skipped).
Corpus ingest(const std::filesystem::path& path, const IngestOptions& options);

/// Adapter output: continuous layouts with category names.
std::vector<ContinuousLayout> parse_source(const nlohmann::json& doc, SourceFormat format);

// ---------------------------------------------------------------------------
// Corpus directories: one layout JSON per file plus manifest.json.

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace ldgm
