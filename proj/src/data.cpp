#include "ldgm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ldgm/error.hpp"
#include "ldgm/eval.hpp"
#include "ldgm/rng.hpp"

namespace ldgm {

using nlohmann::json;
namespace fs = std::filesystem;

Splits make_splits(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  if (n < 3) throw Error(ErrorCode::Data, "corpus smaller than 3 cannot be split");
  const double total = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions)
    if (f < 0.0) throw Error(ErrorCode::Validation, "split fractions must be non-negative");
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::Validation, "split fractions must sum to 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, "splits");
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  Splits s;
  s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  s.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
  return s;
}

json to_json(const DatasetManifest& m) {
  json drops = json::object();
  for (const auto& [reason, count] : m.drops) drops[reason] = count;
  return {{"name", m.name},
          {"vocabulary", vocabulary_to_json(m.vocabulary)},
          {"quantizer", quantizer_to_json(m.quantizer)},
          {"canvas_convention", m.canvas_convention},
          {"files_read", m.files_read},
          {"total", m.total},
          {"counts", {{"train", m.split_counts[0]}, {"val", m.split_counts[1]}, {"test", m.split_counts[2]}}},
          {"drops", std::move(drops)},
          {"filters", m.filters},
          {"split_seed", m.split_seed}};
}

std::vector<Layout> Corpus::subset(const std::vector<std::size_t>& index) const {
  std::vector<Layout> out;
  out.reserve(index.size());
  for (auto i : index) out.push_back(layouts.at(i));
  return out;
}

// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (n_layouts < 0) throw Error(ErrorCode::Validation, "n_layouts must be >= 0");
  if (category_count != 5) throw Error(ErrorCode::Validation, "the synthetic generator defines exactly 5 categories");
  if (grid_bins < 2) throw Error(ErrorCode::Validation, "grid_bins must be >= 2");
  if (!(jitter_std >= 0.0)) throw Error(ErrorCode::Validation, "jitter std must be >= 0");
  if (min_elements < 2 || max_elements < min_elements || max_elements > 25)
    throw Error(ErrorCode::Validation, "element count range must satisfy 2 <= min <= max <= 25");
}

std::vector<double> synth_category_distribution(const SynthConfig& cfg) {
  cfg.validate();
  const double mean_n = 0.5 * (cfg.min_elements + cfg.max_elements);
  std::vector<double> out(5);
  out[0] = 1.0 / mean_n;
  for (std::size_t c = 0; c < 4; ++c) out[c + 1] = (mean_n - 1.0) / mean_n * kSynthBodyWeights[c];
  return out;
}

ContinuousLayout synth_layout(const SynthConfig& cfg, Rng& rng) {
  constexpr double kCanvas = 1000.0;
  constexpr double kLeft = 0.05, kRightCol = 0.51, kCellW = 0.44;
  constexpr double kBodyTop = 0.16, kBodyBottom = 0.96, kRowGap = 0.04;
  const int n = rng.uniform_int(cfg.min_elements, cfg.max_elements);

  ContinuousLayout out;
  out.canvas = {static_cast<int>(kCanvas), static_cast<int>(kCanvas)};
  auto add = [&](int cat, double x, double y, double w, double h) {
    const double grid = cfg.grid_bins - 1;
    auto jitter = [&](double v) {
      v = std::round(v * grid) / grid;
      return cfg.jitter_std > 0.0 ? v + cfg.jitter_std * rng.normal() : v;
    };
    x = std::clamp(jitter(x), 0.0, 1.0);
    y = std::clamp(jitter(y), 0.0, 1.0);
    w = std::clamp(jitter(w), 0.0, 1.0 - x);
    h = std::clamp(jitter(h), 0.0, 1.0 - y);
    ContinuousElement e;
    e.category = std::string(kSynthCategoryNames[static_cast<std::size_t>(cat)]);
    e.geometry = {x * kCanvas, y * kCanvas, w * kCanvas, h * kCanvas};
    out.elements.push_back(e);
  };

  add(0, kLeft, 0.04, 0.9, 0.08);
  const int body = n - 1;
  const int rows = (body + 1) / 2;
  const double row_h = (kBodyBottom - kBodyTop) / rows;
  const double cell_h = row_h - kRowGap;
  for (int b = 0; b < body; ++b) {
    const int row = b / 2;
    const double x = (b % 2 == 0) ? kLeft : kRightCol;
    const double y = kBodyTop + row * row_h;
    const int cat = 1 + rng.categorical(kSynthBodyWeights);
    switch (cat) {
      case 1: add(cat, x, y, kCellW, 0.6 * cell_h); break;            // text
      case 2: add(cat, x, y, kCellW, cell_h); break;                  // image
      case 3: add(cat, x, y, 0.2, std::min(0.4 * cell_h, 0.06)); break;  // button
      default: add(cat, x, y, 0.08, std::min(cell_h, 0.08)); break;      // icon
    }
  }
  return out;
}

namespace {

constexpr double kContractJitter = 0.005;
constexpr int kContractAttempts = 64;

/// Quantized draw that meets the alignment and overlap bounds at contract jitter levels.
Layout synth_quantized(const SynthConfig& cfg, const DatasetManifest& m, Rng& rng) {
  auto ok = [&](const Layout& l) { return alignment(l, m.quantizer) <= 1.0 && overlap(l, m.quantizer) <= 5.0; };
  if (cfg.jitter_std > kContractJitter) return quantize(synth_layout(cfg, rng), m.quantizer, &m.vocabulary);
  for (int attempt = 0; attempt < kContractAttempts; ++attempt) {
    Layout l = quantize(synth_layout(cfg, rng), m.quantizer, &m.vocabulary);
    if (ok(l)) return l;
  }
  SynthConfig exact = cfg;
  exact.jitter_std = 0.0;
  return quantize(synth_layout(exact, rng), m.quantizer, &m.vocabulary);
}

}  // namespace

Corpus synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  auto& m = corpus.manifest;
  m.name = "synthetic";
  m.vocabulary = CategoryVocabulary(std::vector<std::string>(kSynthCategoryNames.begin(), kSynthCategoryNames.end()));
  m.quantizer.category_count = 5;
  m.quantizer.geometry_bins = {cfg.grid_bins, cfg.grid_bins, cfg.grid_bins, cfg.grid_bins};
  m.quantizer.max_elements = 25;
  m.filters = {{"generator",
                {{"n_layouts", cfg.n_layouts},
                 {"grid_bins", cfg.grid_bins},
                 {"jitter_std", cfg.jitter_std},
                 {"min_elements", cfg.min_elements},
                 {"max_elements", cfg.max_elements},
                 {"seed", cfg.seed}}}};
  m.split_seed = cfg.seed;
  Rng rng(cfg.seed, "synth-corpus");
  for (int i = 0; i < cfg.n_layouts; ++i) {
    corpus.layouts.push_back(synth_quantized(cfg, m, rng));
    std::ostringstream id;
    id << "synth-" << i;
    corpus.ids.push_back(id.str());
  }
  m.files_read = 0;
  m.total = corpus.layouts.size();
  if (corpus.layouts.size() >= 3) {
    corpus.splits = make_splits(corpus.layouts.size(), {0.85, 0.05, 0.10}, cfg.seed);
    m.split_counts = {corpus.splits.train.size(), corpus.splits.val.size(), corpus.splits.test.size()};
  } else {
    corpus.splits.train.resize(corpus.layouts.size());
    std::iota(corpus.splits.train.begin(), corpus.splits.train.end(), 0);
    m.split_counts = {corpus.layouts.size(), 0, 0};
  }
  return corpus;
}

// ---------------------------------------------------------------------------

SourceFormat format_from_string(std::string_view name) {
  if (name == "json") return SourceFormat::Json;
  if (name == "rico") return SourceFormat::Rico;
  if (name == "coco" || name == "publaynet") return SourceFormat::Coco;
  throw Error(ErrorCode::Usage, "unknown format '" + std::string(name) + "' (expected json, rico or coco)");
}

namespace {

void rico_collect(const json& node, double ox, double oy, ContinuousLayout& out) {
  if (!node.is_object()) return;
  if (node.contains("componentLabel") && node.contains("bounds")) {
    const auto b = node.at("bounds").get<std::array<double, 4>>();
    ContinuousElement e;
    e.category = node.at("componentLabel").get<std::string>();
    e.geometry = {b[0] - ox, b[1] - oy, b[2] - b[0], b[3] - b[1]};
    out.elements.push_back(e);
  }
  if (auto it = node.find("children"); it != node.end() && it->is_array())
    for (const auto& child : *it) rico_collect(child, ox, oy, out);
}

ContinuousLayout rico_layout(const json& doc) {
  const json& root = doc.contains("activity") ? doc.at("activity").at("root") : doc;
  const auto b = root.at("bounds").get<std::array<double, 4>>();
  ContinuousLayout out;
  out.canvas = {static_cast<int>(std::lround(b[2] - b[0])), static_cast<int>(std::lround(b[3] - b[1]))};
  // The root itself is the canvas, not an element.
  if (auto it = root.find("children"); it != root.end() && it->is_array())
    for (const auto& child : *it) rico_collect(child, b[0], b[1], out);
  return out;
}

std::string category_name(const ContinuousElement& e) {
  if (!e.category) return {};
  if (const int* id = std::get_if<int>(&*e.category)) return std::to_string(*id);
  return std::get<std::string>(*e.category);
}

}  // namespace

std::vector<ContinuousLayout> parse_source(const json& doc, SourceFormat format) {
  std::vector<ContinuousLayout> out;
  switch (format) {
    case SourceFormat::Json:
      if (doc.is_array()) {
        for (const auto& d : doc) out.push_back(continuous_from_json(d));
      } else {
        out.push_back(continuous_from_json(doc));
      }
      break;
    case SourceFormat::Rico:
      if (doc.is_array()) {
        for (const auto& d : doc) out.push_back(rico_layout(d));
      } else {
        out.push_back(rico_layout(doc));
      }
      break;
    case SourceFormat::Coco: {
      std::map<long, std::string> names;
      for (const auto& c : doc.at("categories")) names[c.at("id").get<long>()] = c.at("name").get<std::string>();
      std::map<long, std::size_t> image_index;
      for (const auto& img : doc.at("images")) {
        ContinuousLayout l;
        l.canvas = {img.at("width").get<int>(), img.at("height").get<int>()};
        image_index[img.at("id").get<long>()] = out.size();
        out.push_back(std::move(l));
      }
      for (const auto& a : doc.at("annotations")) {
        const auto it = image_index.find(a.at("image_id").get<long>());
        if (it == image_index.end()) continue;
        const auto bbox = a.at("bbox").get<std::array<double, 4>>();
        ContinuousElement e;
        const long cid = a.at("category_id").get<long>();
        e.category = names.count(cid) ? names[cid] : std::to_string(cid);
        e.geometry = {bbox[0], bbox[1], bbox[2], bbox[3]};
        out[it->second].elements.push_back(e);
      }
      break;
    }
  }
  return out;
}

Corpus ingest(const fs::path& path, const IngestOptions& options) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".json" && entry.path().filename() != "manifest.json")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw Error(ErrorCode::Data, "unreadable input: " + path.string());
  }

  struct Source {
    std::string id;
    ContinuousLayout layout;
  };
  std::vector<Source> sources;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw Error(ErrorCode::Data, "unreadable file: " + f.string());
    json doc;
    try {
      doc = json::parse(in);
      auto parsed = parse_source(doc, options.format);
      for (std::size_t i = 0; i < parsed.size(); ++i)
        sources.push_back({f.stem().string() + (parsed.size() > 1 ? "#" + std::to_string(i) : ""), std::move(parsed[i])});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Data, "unreadable file " + f.string() + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::Data, "unreadable file " + f.string() + ": " + e.what(), e.path());
    }
  }

  Corpus corpus;
  auto& m = corpus.manifest;
  m.name = options.name;
  m.files_read = files.size();
  m.split_seed = options.split_seed;

  std::optional<CategoryVocabulary> fixed = options.vocabulary;
  if (!fixed && fs::is_directory(path) && fs::exists(path / "manifest.json")) {
    // Re-ingesting a corpus directory keeps its vocabulary order.
    std::ifstream in(path / "manifest.json");
    try {
      const auto manifest = json::parse(in);
      if (manifest.contains("vocabulary")) fixed = vocabulary_from_json(manifest.at("vocabulary"));
    } catch (const json::exception&) {
    }
  }
  if (fixed) {
    m.vocabulary = *fixed;
  } else {
    std::map<std::string, std::size_t> freq;
    for (const auto& s : sources)
      for (const auto& e : s.layout.elements) ++freq[category_name(e)];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> names;
    for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(options.top_k); ++i)
      names.push_back(ranked[i].first);
    m.vocabulary = CategoryVocabulary(std::move(names));
  }
  if (m.vocabulary.size() == 0) throw Error(ErrorCode::Data, "no categories found");
  m.quantizer.category_count = static_cast<int>(m.vocabulary.size());
  m.quantizer.geometry_bins = options.geometry_bins;
  m.quantizer.max_elements = options.max_elements;
  m.filters = {{"policy", options.policy == VocabPolicy::TopK ? "top-k" : "strict"},
               {"top_k", options.top_k},
               {"max_n", options.max_elements},
               {"categories_kept", m.vocabulary.names()}};

  for (auto& s : sources) {
    auto& l = s.layout;
    std::vector<ContinuousElement> kept;
    bool rejected = false;
    for (auto& e : l.elements) {
      const auto name = category_name(e);
      if (m.vocabulary.find(name)) {
        e.category = name;
        kept.push_back(e);
      } else if (options.policy == VocabPolicy::Strict) {
        rejected = true;
      } else {
        ++m.drops["element-vocabulary"];
      }
    }
    if (rejected) {
      ++m.drops["vocabulary"];
      continue;
    }
    l.elements = std::move(kept);
    l.relations.clear();
    if (l.elements.empty()) {
      ++m.drops["empty"];
      continue;
    }
    if (static_cast<int>(l.elements.size()) > options.max_elements) {
      ++m.drops["max-n"];
      continue;
    }
    Layout q;
    try {
      q = quantize(l, m.quantizer, &m.vocabulary);
    } catch (const Error&) {
      ++m.drops["invalid"];
      continue;
    }
    if (!validate(q, m.quantizer).empty() || has_mask(q, m.quantizer)) {
      ++m.drops["invalid"];
      continue;
    }
    corpus.layouts.push_back(std::move(q));
    corpus.ids.push_back(s.id);
  }
  if (corpus.layouts.empty()) throw Error(ErrorCode::Data, "no layouts survived filtering");
  m.total = corpus.layouts.size();
  if (corpus.layouts.size() >= 3) {
    corpus.splits = make_splits(corpus.layouts.size(), {0.85, 0.05, 0.10}, options.split_seed);
  } else {
    corpus.splits.train.resize(corpus.layouts.size());
    std::iota(corpus.splits.train.begin(), corpus.splits.train.end(), 0);
  }
  m.split_counts = {corpus.splits.train.size(), corpus.splits.val.size(), corpus.splits.test.size()};
  return corpus;
}

// ---------------------------------------------------------------------------

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  json files = json::array();
  for (std::size_t i = 0; i < corpus.layouts.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.json", i);
    std::ofstream out(dir / name);
    if (!out) throw Error(ErrorCode::Data, "cannot write " + (dir / name).string());
    out << layout_to_json(corpus.layouts[i], corpus.quantizer(), &corpus.vocabulary()).dump() << '\n';
    files.push_back(name);
  }
  json manifest = to_json(corpus.manifest);
  manifest["files"] = std::move(files);
  manifest["ids"] = corpus.ids;
  manifest["splits"] = {{"train", corpus.splits.train}, {"val", corpus.splits.val}, {"test", corpus.splits.test}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::Data, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Corpus read_corpus(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::Data, "no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Data, std::string("bad manifest: ") + e.what());
  }
  Corpus corpus;
  auto& m = corpus.manifest;
  try {
    m.name = manifest.value("name", "corpus");
    m.vocabulary = vocabulary_from_json(manifest.at("vocabulary"));
    m.quantizer = quantizer_from_json(manifest.at("quantizer"));
    m.files_read = manifest.value("files_read", std::size_t{0});
    m.filters = manifest.value("filters", json::object());
    m.split_seed = manifest.value("split_seed", std::uint64_t{0});
    const json drops = manifest.value("drops", json::object());
    for (const auto& [reason, count] : drops.items()) m.drops[reason] = count.get<std::size_t>();
    for (const auto& f : manifest.at("files")) {
      const auto p = dir / f.get<std::string>();
      std::ifstream lf(p);
      if (!lf) throw Error(ErrorCode::Data, "missing corpus file " + p.string());
      corpus.layouts.push_back(layout_from_json(json::parse(lf), m.quantizer, &m.vocabulary));
    }
    corpus.ids = manifest.value("ids", std::vector<std::string>{});
    if (manifest.contains("splits")) {
      const auto& s = manifest.at("splits");
      corpus.splits.train = s.at("train").get<std::vector<std::size_t>>();
      corpus.splits.val = s.at("val").get<std::vector<std::size_t>>();
      corpus.splits.test = s.at("test").get<std::vector<std::size_t>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Data, std::string("bad corpus: ") + e.what());
  }
  if (corpus.ids.size() != corpus.layouts.size()) {
    corpus.ids.clear();
    for (std::size_t i = 0; i < corpus.layouts.size(); ++i) corpus.ids.push_back(std::to_string(i));
  }
  for (auto i : corpus.splits.train)
    if (i >= corpus.layouts.size()) throw Error(ErrorCode::Data, "split index out of range");
  m.total = corpus.layouts.size();
  m.split_counts = {corpus.splits.train.size(), corpus.splits.val.size(), corpus.splits.test.size()};
  return corpus;
}

}  // namespace ldgm
