#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ldgm/data.hpp"
#include "ldgm/error.hpp"
#include "ldgm/eval.hpp"

using namespace ldgm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ldgm_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json source_layout(const std::vector<std::string>& categories) {
  json elements = json::array();
  for (std::size_t i = 0; i < categories.size(); ++i)
    elements.push_back({{"category", categories[i]},
                        {"x", 10.0 * static_cast<double>(i % 5)},
                        {"y", 20.0 * static_cast<double>(i / 5)},
                        {"w", 30.0},
                        {"h", 15.0}});
  return {{"canvas", {{"width", 200}, {"height", 400}}}, {"elements", elements}};
}

void write_json(const fs::path& path, const json& doc) { std::ofstream(path) << doc.dump(); }

}  // namespace

TEST_CASE("splits are deterministic, disjoint and sized 85/5/10") {
  const auto a = make_splits(100, {0.85, 0.05, 0.10}, 7);
  CHECK(a.train.size() == 85);
  CHECK(a.val.size() == 5);
  CHECK(a.test.size() == 10);
  const auto b = make_splits(100, {0.85, 0.05, 0.10}, 7);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  all.insert(a.test.begin(), a.test.end());
  CHECK(all.size() == 100);
  CHECK(*all.rbegin() == 99);
  CHECK(make_splits(100, {0.85, 0.05, 0.10}, 8).train != a.train);
}

TEST_CASE("synthetic corpus without jitter is grid aligned") {
  SynthConfig cfg;
  cfg.n_layouts = 200;
  cfg.jitter_std = 0.0;
  const auto corpus = synth_corpus(cfg);
  REQUIRE(corpus.layouts.size() == 200);
  for (const auto& l : corpus.layouts) CHECK(alignment(l, corpus.quantizer()) == 0.0);
}

TEST_CASE("synthetic corpus is seeded and respects its contract") {
  SynthConfig cfg;
  cfg.n_layouts = 1000;
  cfg.seed = 3;
  const auto a = synth_corpus(cfg);
  const auto b = synth_corpus(cfg);
  CHECK(a.layouts == b.layouts);
  cfg.seed = 4;
  CHECK(synth_corpus(cfg).layouts != a.layouts);

  const auto expected = synth_category_distribution(cfg);
  REQUIRE(expected.size() == 5);
  std::vector<double> counts(5, 0.0);
  double total = 0.0;
  for (const auto& l : a.layouts) {
    CHECK(l.elements.size() >= 2);
    CHECK(l.elements.size() <= 10);
    CHECK(alignment(l, a.quantizer()) <= 1.0);
    CHECK(overlap(l, a.quantizer()) <= 5.0);
    CHECK(validate(l, a.quantizer()).empty());
    for (const auto& e : l.elements) {
      counts[static_cast<std::size_t>(e[AttributeKind::Category].bin)] += 1.0;
      total += 1.0;
    }
  }
  for (std::size_t c = 0; c < 5; ++c) {
    CAPTURE(c);
    CHECK(std::abs(counts[c] / total - expected[c]) <= 0.05 * expected[c]);
  }
  CHECK(a.vocabulary().names() == std::vector<std::string>(kSynthCategoryNames.begin(), kSynthCategoryNames.end()));
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.jitter_std = -0.1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("ingest filters, records drops and round trips") {
  const auto src = fresh_dir("ingest_src");
  for (int i = 0; i < 20; ++i) write_json(src / ("a" + std::to_string(i) + ".json"), source_layout({"text", "image", "text"}));
  write_json(src / "rare.json", source_layout({"text", "banner"}));
  write_json(src / "big.json", source_layout(std::vector<std::string>(26, "text")));

  IngestOptions opt;
  opt.top_k = 2;
  opt.geometry_bins = {32, 32, 32, 32};
  const auto corpus = ingest(src, opt);
  CHECK(corpus.manifest.files_read == 22);
  CHECK(corpus.layouts.size() == 21);
  CHECK(corpus.manifest.drops.at("max-n") == 1);
  CHECK(corpus.manifest.drops.at("element-vocabulary") == 1);
  CHECK(corpus.vocabulary().names() == std::vector<std::string>{"text", "image"});
  CHECK(corpus.manifest.split_counts[0] + corpus.manifest.split_counts[1] + corpus.manifest.split_counts[2] == 21);
  const auto rare = std::find(corpus.ids.begin(), corpus.ids.end(), "rare");
  REQUIRE(rare != corpus.ids.end());
  CHECK(corpus.layouts[static_cast<std::size_t>(rare - corpus.ids.begin())].elements.size() == 1);
  for (const auto& l : corpus.layouts) CHECK(validate(l, corpus.quantizer()).empty());

  const auto out = fresh_dir("ingest_out");
  write_corpus(out, corpus);
  const auto back = read_corpus(out);
  CHECK(back.layouts == corpus.layouts);
  CHECK(back.ids == corpus.ids);
  CHECK(back.splits.train == corpus.splits.train);
  CHECK(back.vocabulary().names() == corpus.vocabulary().names());

  IngestOptions again = opt;
  again.top_k = 13;
  const auto re = ingest(out, again);
  CHECK(re.layouts == corpus.layouts);
  CHECK(re.vocabulary().names() == corpus.vocabulary().names());
  CHECK(re.manifest.drops.empty());

  const auto doc = to_json(corpus.manifest);
  CHECK(doc["filters"]["max_n"] == 25);
  CHECK(doc["drops"]["max-n"] == 1);
}

TEST_CASE("strict vocabulary drops whole layouts") {
  const auto src = fresh_dir("ingest_strict");
  write_json(src / "a.json", source_layout({"text", "image"}));
  write_json(src / "b.json", source_layout({"text", "banner"}));
  IngestOptions opt;
  opt.policy = VocabPolicy::Strict;
  opt.vocabulary = CategoryVocabulary({"text", "image"});
  const auto corpus = ingest(src, opt);
  CHECK(corpus.layouts.size() == 1);
  CHECK(corpus.manifest.drops.at("vocabulary") == 1);
}

TEST_CASE("ingest errors") {
  CHECK_THROWS_AS(ingest(fs::temp_directory_path() / "ldgm_tests" / "does-not-exist", {}), Error);
  const auto src = fresh_dir("ingest_bad");
  std::ofstream(src / "broken.json") << "{not json";
  try {
    ingest(src, {});
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Data);
  }
  CHECK_THROWS_AS(format_from_string("xml"), Error);
  CHECK(format_from_string("publaynet") == SourceFormat::Coco);
}

TEST_CASE("rico and coco adapters") {
  const json rico = json::parse(R"({"activity": {"root": {"bounds": [0, 0, 1440, 2560], "children": [
      {"componentLabel": "Text", "bounds": [10, 20, 110, 70]},
      {"bounds": [0, 0, 100, 100], "children": [{"componentLabel": "Icon", "bounds": [5, 5, 25, 25]}]}]}}})");
  const auto r = parse_source(rico, SourceFormat::Rico);
  REQUIRE(r.size() == 1);
  CHECK(r[0].canvas.width == 1440);
  REQUIRE(r[0].elements.size() == 2);
  CHECK(*r[0].elements[0].geometry[2] == 100.0);
  CHECK(*r[0].elements[0].geometry[3] == 50.0);

  const json coco = {{"images", {{{"id", 1}, {"width", 600}, {"height", 800}}}},
                     {"categories", {{{"id", 3}, {"name", "table"}}}},
                     {"annotations", {{{"image_id", 1}, {"category_id", 3}, {"bbox", {1, 2, 30, 40}}}}}};
  const auto c = parse_source(coco, SourceFormat::Coco);
  REQUIRE(c.size() == 1);
  CHECK(c[0].canvas.height == 800);
  REQUIRE(c[0].elements.size() == 1);
  CHECK(std::get<std::string>(*c[0].elements[0].category) == "table");
}
