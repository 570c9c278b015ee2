#include "ldgm/layout.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ldgm/error.hpp"

namespace ldgm {
namespace {

constexpr std::array<std::string_view, kNumKinds> kKindNames = {"category", "x", "y", "w", "h"};
constexpr std::array<std::string_view, 3> kStatusNames = {"precise", "coarse", "missing"};
constexpr std::array<std::string_view, kNumRelationLabels> kRelationNames = {
    "smaller", "larger", "equal", "above", "bottom", "left", "right", "overlapped", "unavailable"};

std::string element_path(std::size_t i) { return "$.elements[" + std::to_string(i) + "]"; }

double canvas_extent(const CanvasSpec& canvas, AttributeKind kind) {
  return (kind == AttributeKind::X || kind == AttributeKind::W) ? canvas.width : canvas.height;
}

}  // namespace

std::string_view to_string(AttributeKind kind) { return kKindNames[index_of(kind)]; }
std::string_view to_string(AttributeStatus status) { return kStatusNames[static_cast<std::size_t>(status)]; }
std::string_view to_string(RelationLabel label) { return kRelationNames[static_cast<std::size_t>(label)]; }

AttributeStatus status_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i)
    if (kStatusNames[i] == name) return static_cast<AttributeStatus>(i);
  throw Error(ErrorCode::Parse, "unknown status '" + std::string(name) + "'");
}

RelationLabel relation_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kRelationNames.size(); ++i)
    if (kRelationNames[i] == name) return static_cast<RelationLabel>(i);
  throw Error(ErrorCode::Parse, "unknown relation label '" + std::string(name) + "'");
}

RelationMode relation_mode_from_string(std::string_view name) {
  if (name == "size") return RelationMode::Size;
  if (name == "location") return RelationMode::Location;
  if (name == "mixed") return RelationMode::Mixed;
  throw Error(ErrorCode::Usage, "unknown relation mode '" + std::string(name) + "'");
}

std::array<int, kNumKinds> QuantizerConfig::vocab_sizes() const {
  std::array<int, kNumKinds> out{};
  for (auto kind : kAllKinds) out[index_of(kind)] = vocab(kind);
  return out;
}

std::optional<int> CategoryVocabulary::find(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<int>(it - names_.begin());
}

int quantize_value(double v, double extent, int bins) {
  const double scaled = v / extent * static_cast<double>(bins - 1);
  const double rounded = std::floor(scaled + 0.5);
  return static_cast<int>(std::clamp(rounded, 0.0, static_cast<double>(bins - 1)));
}

double dequantize_value(int bin, double extent, int bins) {
  return static_cast<double>(bin) / static_cast<double>(bins - 1) * extent;
}

Layout quantize(const ContinuousLayout& layout, const QuantizerConfig& cfg, const CategoryVocabulary* vocab) {
  if (layout.canvas.width < 1 || layout.canvas.height < 1)
    throw Error(ErrorCode::Validation, "canvas dimensions must be positive", "$.canvas");
  Layout out;
  out.canvas = layout.canvas;
  out.relations = layout.relations;
  out.elements.reserve(layout.elements.size());
  for (std::size_t i = 0; i < layout.elements.size(); ++i) {
    const auto& src = layout.elements[i];
    Element e;
    auto& cat = e[AttributeKind::Category];
    cat.status = src.status[0];
    if (!src.category || src.status[0] == AttributeStatus::Missing) {
      cat.bin = cfg.mask(AttributeKind::Category);
      cat.status = AttributeStatus::Missing;
    } else if (const int* id = std::get_if<int>(&*src.category)) {
      if (*id < 0 || *id >= cfg.category_count)
        throw Error(ErrorCode::Vocabulary, "category id " + std::to_string(*id) + " out of range",
                    element_path(i) + ".category");
      cat.bin = *id;
    } else {
      const auto& name = std::get<std::string>(*src.category);
      std::optional<int> found = vocab ? vocab->find(name) : std::nullopt;
      if (!found || *found >= cfg.category_count)
        throw Error(ErrorCode::Vocabulary, "unknown category '" + name + "'", element_path(i) + ".category");
      cat.bin = *found;
    }
    for (std::size_t g = 0; g < 4; ++g) {
      const auto kind = kAllKinds[g + 1];
      auto& attr = e[kind];
      attr.status = src.status[g + 1];
      const auto& value = src.geometry[g];
      if (!value || attr.status == AttributeStatus::Missing) {
        attr.bin = cfg.mask(kind);
        attr.status = AttributeStatus::Missing;
        continue;
      }
      if (!std::isfinite(*value))
        throw Error(ErrorCode::Validation, "non-finite coordinate", element_path(i) + "." + std::string(to_string(kind)));
      if ((kind == AttributeKind::W || kind == AttributeKind::H) && *value < 0.0)
        throw Error(ErrorCode::Validation, "negative " + std::string(to_string(kind)),
                    element_path(i) + "." + std::string(to_string(kind)));
      attr.bin = quantize_value(*value, canvas_extent(layout.canvas, kind), cfg.vocab(kind));
    }
    out.elements.push_back(e);
  }
  return out;
}

ContinuousLayout dequantize(const Layout& layout, const QuantizerConfig& cfg) {
  ContinuousLayout out;
  out.canvas = layout.canvas;
  out.relations = layout.relations;
  for (const auto& e : layout.elements) {
    ContinuousElement ce;
    for (auto kind : kAllKinds) {
      const auto& attr = e[kind];
      if (attr.bin >= cfg.mask(kind))
        throw Error(ErrorCode::IncompleteLayout, "cannot dequantize a MASK " + std::string(to_string(kind)));
      ce.status[index_of(kind)] = attr.status;
      if (kind == AttributeKind::Category)
        ce.category = attr.bin;
      else
        ce.geometry[index_of(kind) - 1] = dequantize_value(attr.bin, canvas_extent(layout.canvas, kind), cfg.vocab(kind));
    }
    out.elements.push_back(ce);
  }
  return out;
}

NormalizedBox normalized_box(const Element& element, const QuantizerConfig& cfg) {
  auto norm = [&](AttributeKind kind) {
    const auto& attr = element[kind];
    if (attr.bin >= cfg.mask(kind)) throw Error(ErrorCode::IncompleteLayout, "MASK geometry in box");
    return static_cast<double>(attr.bin) / static_cast<double>(cfg.vocab(kind) - 1);
  };
  const double x = norm(AttributeKind::X);
  const double y = norm(AttributeKind::Y);
  const double x1 = std::min(1.0, x + norm(AttributeKind::W));
  const double y1 = std::min(1.0, y + norm(AttributeKind::H));
  return {x, y, x1, y1};
}

bool has_mask(const Layout& layout, const QuantizerConfig& cfg) {
  for (const auto& e : layout.elements)
    for (auto kind : kAllKinds)
      if (e[kind].bin >= cfg.mask(kind)) return true;
  return false;
}

// ---------------------------------------------------------------------------

TokenSequence tokenize(const Layout& layout) {
  TokenSequence seq;
  seq.relations = layout.relations;
  seq.tokens.reserve(layout.elements.size() * kNumKinds);
  for (std::size_t i = 0; i < layout.elements.size(); ++i) {
    for (auto kind : kAllKinds) {
      const auto& attr = layout.elements[i][kind];
      seq.tokens.push_back({static_cast<int>(i), kind, attr.bin, attr.status == AttributeStatus::Precise});
    }
  }
  return seq;
}

std::vector<AttributeStatus> token_statuses(const Layout& layout) {
  std::vector<AttributeStatus> out;
  out.reserve(layout.elements.size() * kNumKinds);
  for (const auto& e : layout.elements)
    for (auto kind : kAllKinds) out.push_back(e[kind].status);
  return out;
}

Layout detokenize(const TokenSequence& seq, std::span<const AttributeStatus> statuses, CanvasSpec canvas) {
  if (seq.tokens.size() % kNumKinds != 0)
    throw Error(ErrorCode::Shape, "token count " + std::to_string(seq.tokens.size()) + " not divisible by 5");
  if (statuses.size() != seq.tokens.size())
    throw Error(ErrorCode::Shape, "status count does not match token count");
  Layout out;
  out.canvas = canvas;
  out.relations = seq.relations;
  out.elements.resize(seq.tokens.size() / kNumKinds);
  for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
    const auto& tok = seq.tokens[t];
    if (tok.kind != kAllKinds[t % kNumKinds] || tok.element_index != static_cast<int>(t / kNumKinds))
      throw Error(ErrorCode::Shape, "token " + std::to_string(t) + " out of canonical order");
    out.elements[t / kNumKinds][tok.kind] = {tok.value, statuses[t]};
  }
  return out;
}

// ---------------------------------------------------------------------------

RelationMap derive_relations(const Layout& layout, const QuantizerConfig& cfg, RelationMode mode,
                             double relative_tolerance) {
  std::vector<NormalizedBox> boxes;
  boxes.reserve(layout.elements.size());
  for (const auto& e : layout.elements) boxes.push_back(normalized_box(e, cfg));

  auto size_label = [&](const NormalizedBox& a, const NormalizedBox& b) {
    const double aa = a.area();
    const double ab = b.area();
    if (std::abs(aa - ab) <= relative_tolerance * std::max(aa, ab)) return RelationLabel::Equal;
    return aa < ab ? RelationLabel::Smaller : RelationLabel::Larger;
  };
  auto location_label = [](const NormalizedBox& a, const NormalizedBox& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (iw > 0.0 && ih > 0.0) return RelationLabel::Overlapped;
    const double dx = (b.x0 + b.x1) - (a.x0 + a.x1);
    const double dy = (b.y0 + b.y1) - (a.y0 + a.y1);
    if (dx == 0.0 && dy == 0.0) return RelationLabel::Overlapped;
    if (std::abs(dy) >= std::abs(dx)) return dy > 0.0 ? RelationLabel::Above : RelationLabel::Bottom;
    return dx > 0.0 ? RelationLabel::Left : RelationLabel::Right;
  };

  RelationMap out;
  const int n = static_cast<int>(boxes.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& a = boxes[static_cast<std::size_t>(i)];
      const auto& b = boxes[static_cast<std::size_t>(j)];
      RelationLabel label = RelationLabel::Unavailable;
      switch (mode) {
        case RelationMode::Size: label = size_label(a, b); break;
        case RelationMode::Location: label = location_label(a, b); break;
        case RelationMode::Mixed: {
          const auto s = size_label(a, b);
          label = s == RelationLabel::Equal ? s : location_label(a, b);
          break;
        }
      }
      out[{i, j}] = label;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Violation> validate(const Layout& layout, const QuantizerConfig& cfg) {
  std::vector<Violation> report;
  if (layout.canvas.width < 1 || layout.canvas.height < 1)
    report.push_back({"canvas", "canvas dimensions must be positive"});
  const auto n = layout.elements.size();
  if (n < 1 || n > static_cast<std::size_t>(cfg.max_elements))
    report.push_back({"cardinality", "element count " + std::to_string(n) + " outside [1, " +
                                         std::to_string(cfg.max_elements) + "]"});
  for (std::size_t i = 0; i < n; ++i) {
    for (auto kind : kAllKinds) {
      const auto& attr = layout.elements[i][kind];
      const std::string where = "element " + std::to_string(i) + " " + std::string(to_string(kind));
      if (attr.bin < 0 || attr.bin > cfg.mask(kind)) {
        report.push_back({"bin-range", where + ": bin " + std::to_string(attr.bin) + " outside [0, " +
                                           std::to_string(cfg.mask(kind)) + "]"});
        continue;
      }
      const bool is_mask = attr.bin == cfg.mask(kind);
      if (is_mask != (attr.status == AttributeStatus::Missing))
        report.push_back({"status-mismatch", where + ": status " + std::string(to_string(attr.status)) +
                                                 (is_mask ? " with MASK bin" : " with a value bin")});
    }
  }
  for (const auto& [pair, label] : layout.relations) {
    const auto [i, j] = pair;
    if (i < 0 || j < 0 || i == j || static_cast<std::size_t>(i) >= n || static_cast<std::size_t>(j) >= n)
      report.push_back({"relation-index", "relation (" + std::to_string(i) + ", " + std::to_string(j) + ") invalid"});
    else if (label == RelationLabel::Unavailable)
      report.push_back({"relation-index", "explicit unavailable relation (" + std::to_string(i) + ", " +
                                              std::to_string(j) + ")"});
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw Error(ErrorCode::Parse, "unknown field '" + it.key() + "'", path + "." + it.key());
  }
}

const json& require(const json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) throw Error(ErrorCode::Parse, std::string("missing required field '") + key + "'", path + "." + key);
  return *it;
}

int require_int(const json& value, const std::string& path) {
  if (!value.is_number_integer()) throw Error(ErrorCode::Parse, "expected integer", path);
  return value.get<int>();
}

}  // namespace

json to_json(const ContinuousLayout& layout, const CategoryVocabulary* vocab) {
  json doc;
  doc["canvas"] = {{"width", layout.canvas.width}, {"height", layout.canvas.height}};
  json elements = json::array();
  for (const auto& e : layout.elements) {
    json je;
    if (!e.category || e.status[0] == AttributeStatus::Missing) {
      je["category"] = nullptr;
    } else if (const int* id = std::get_if<int>(&*e.category)) {
      if (vocab && *id >= 0 && static_cast<std::size_t>(*id) < vocab->size())
        je["category"] = vocab->name(*id);
      else
        je["category"] = *id;
    } else {
      je["category"] = std::get<std::string>(*e.category);
    }
    for (std::size_t g = 0; g < 4; ++g) {
      const auto key = std::string(to_string(kAllKinds[g + 1]));
      if (e.geometry[g] && e.status[g + 1] != AttributeStatus::Missing)
        je[key] = *e.geometry[g];
      else
        je[key] = nullptr;
    }
    json status;
    for (auto kind : kAllKinds) status[std::string(to_string(kind))] = std::string(to_string(e.status[index_of(kind)]));
    je["status"] = std::move(status);
    elements.push_back(std::move(je));
  }
  doc["elements"] = std::move(elements);
  json relations = json::array();
  for (const auto& [pair, label] : layout.relations) {
    if (label == RelationLabel::Unavailable) continue;
    relations.push_back({{"i", pair.first}, {"j", pair.second}, {"label", std::string(to_string(label))}});
  }
  doc["relations"] = std::move(relations);
  return doc;
}

ContinuousLayout continuous_from_json(const json& doc, bool strict) {
  if (!doc.is_object()) throw Error(ErrorCode::Parse, "layout must be a JSON object", "$");
  if (strict) reject_unknown(doc, {"canvas", "elements", "relations"}, "$");

  ContinuousLayout out;
  const auto& canvas = require(doc, "canvas", "$");
  if (!canvas.is_object()) throw Error(ErrorCode::Parse, "canvas must be an object", "$.canvas");
  if (strict) reject_unknown(canvas, {"width", "height"}, "$.canvas");
  out.canvas.width = require_int(require(canvas, "width", "$.canvas"), "$.canvas.width");
  out.canvas.height = require_int(require(canvas, "height", "$.canvas"), "$.canvas.height");
  if (out.canvas.width < 1) throw Error(ErrorCode::Parse, "width must be >= 1", "$.canvas.width");
  if (out.canvas.height < 1) throw Error(ErrorCode::Parse, "height must be >= 1", "$.canvas.height");

  const auto& elements = require(doc, "elements", "$");
  if (!elements.is_array()) throw Error(ErrorCode::Parse, "elements must be an array", "$.elements");
  for (std::size_t i = 0; i < elements.size(); ++i) {
    const auto path = element_path(i);
    const auto& je = elements[i];
    if (!je.is_object()) throw Error(ErrorCode::Parse, "element must be an object", path);
    if (strict) reject_unknown(je, {"category", "x", "y", "w", "h", "status"}, path);

    ContinuousElement e;
    const json* status = nullptr;
    if (auto it = je.find("status"); it != je.end()) {
      if (!it->is_object()) throw Error(ErrorCode::Parse, "status must be an object", path + ".status");
      if (strict) reject_unknown(*it, {"category", "x", "y", "w", "h"}, path + ".status");
      status = &*it;
    }
    for (auto kind : kAllKinds) {
      const auto key = std::string(to_string(kind));
      const auto attr_path = path + "." + key;
      const auto it = je.find(key);
      const bool is_null = it == je.end() || it->is_null();
      std::optional<AttributeStatus> declared;
      if (status) {
        if (auto s = status->find(key); s != status->end()) {
          if (!s->is_string()) throw Error(ErrorCode::Parse, "status must be a string", path + ".status." + key);
          try {
            declared = status_from_string(s->get<std::string>());
          } catch (const Error& err) {
            throw Error(ErrorCode::Parse, err.what(), path + ".status." + key);
          }
        }
      }
      const auto st = declared.value_or(is_null ? AttributeStatus::Missing : AttributeStatus::Precise);
      if (is_null != (st == AttributeStatus::Missing))
        throw Error(ErrorCode::Parse, "null value must pair with status 'missing'", attr_path);
      e.status[index_of(kind)] = st;
      if (is_null) continue;
      if (kind == AttributeKind::Category) {
        if (it->is_number_integer())
          e.category = it->get<int>();
        else if (it->is_string())
          e.category = it->get<std::string>();
        else
          throw Error(ErrorCode::Parse, "category must be a string or integer", attr_path);
      } else {
        if (!it->is_number()) throw Error(ErrorCode::Parse, "expected number or null", attr_path);
        e.geometry[index_of(kind) - 1] = it->get<double>();
      }
    }
    out.elements.push_back(std::move(e));
  }

  if (auto it = doc.find("relations"); it != doc.end() && !it->is_null()) {
    if (!it->is_array()) throw Error(ErrorCode::Parse, "relations must be an array", "$.relations");
    for (std::size_t r = 0; r < it->size(); ++r) {
      const auto path = "$.relations[" + std::to_string(r) + "]";
      const auto& jr = (*it)[r];
      if (!jr.is_object()) throw Error(ErrorCode::Parse, "relation must be an object", path);
      if (strict) reject_unknown(jr, {"i", "j", "label"}, path);
      const int i = require_int(require(jr, "i", path), path + ".i");
      const int j = require_int(require(jr, "j", path), path + ".j");
      const auto& label = require(jr, "label", path);
      if (!label.is_string()) throw Error(ErrorCode::Parse, "label must be a string", path + ".label");
      const int n = static_cast<int>(out.elements.size());
      if (i < 0 || i >= n || j < 0 || j >= n || i == j)
        throw Error(ErrorCode::Parse, "relation indices out of range", path);
      RelationLabel parsed;
      try {
        parsed = relation_from_string(label.get<std::string>());
      } catch (const Error& err) {
        throw Error(ErrorCode::Parse, err.what(), path + ".label");
      }
      if (parsed != RelationLabel::Unavailable) out.relations[{i, j}] = parsed;
    }
  }
  return out;
}

json layout_to_json(const Layout& layout, const QuantizerConfig& cfg, const CategoryVocabulary* vocab) {
  // Missing attributes carry MASK bins; emit them as null without dequantizing.
  ContinuousLayout cl;
  cl.canvas = layout.canvas;
  cl.relations = layout.relations;
  for (const auto& e : layout.elements) {
    ContinuousElement ce;
    for (auto kind : kAllKinds) {
      const auto& attr = e[kind];
      ce.status[index_of(kind)] = attr.status;
      if (attr.bin >= cfg.mask(kind)) {
        ce.status[index_of(kind)] = AttributeStatus::Missing;
        continue;
      }
      if (kind == AttributeKind::Category)
        ce.category = attr.bin;
      else
        ce.geometry[index_of(kind) - 1] = dequantize_value(
            attr.bin, canvas_extent(layout.canvas, kind), cfg.vocab(kind));
    }
    cl.elements.push_back(std::move(ce));
  }
  return to_json(cl, vocab);
}

Layout layout_from_json(const json& doc, const QuantizerConfig& cfg, const CategoryVocabulary* vocab, bool strict) {
  return quantize(continuous_from_json(doc, strict), cfg, vocab);
}

std::string serialize_layout(const Layout& layout, const QuantizerConfig& cfg, const CategoryVocabulary* vocab) {
  return layout_to_json(layout, cfg, vocab).dump();
}

Layout parse_layout(std::string_view text, const QuantizerConfig& cfg, const CategoryVocabulary* vocab, bool strict) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::Parse, std::string("malformed JSON: ") + e.what(), "$");
  }
  return layout_from_json(doc, cfg, vocab, strict);
}

json vocabulary_to_json(const CategoryVocabulary& vocab) { return json(vocab.names()); }

CategoryVocabulary vocabulary_from_json(const json& doc) {
  if (!doc.is_array()) throw Error(ErrorCode::Parse, "vocabulary must be a JSON array of names", "$");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    if (!doc[i].is_string()) throw Error(ErrorCode::Parse, "vocabulary entries must be strings", "$[" + std::to_string(i) + "]");
    names.push_back(doc[i].get<std::string>());
  }
  return CategoryVocabulary(std::move(names));
}

json quantizer_to_json(const QuantizerConfig& cfg) {
  return {{"category_count", cfg.category_count},
          {"geometry_bins", cfg.geometry_bins},
          {"max_elements", cfg.max_elements}};
}

QuantizerConfig quantizer_from_json(const json& doc) {
  QuantizerConfig cfg;
  try {
    cfg.category_count = doc.at("category_count").get<int>();
    cfg.geometry_bins = doc.at("geometry_bins").get<std::array<int, 4>>();
    cfg.max_elements = doc.at("max_elements").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("bad quantizer config: ") + e.what());
  }
  if (cfg.category_count < 1 || cfg.max_elements < 1)
    throw Error(ErrorCode::Validation, "quantizer needs at least one category and one element");
  for (int k : cfg.geometry_bins)
    if (k < 2) throw Error(ErrorCode::Validation, "geometry needs at least 2 bins");
  return cfg;
}

}  // namespace ldgm
