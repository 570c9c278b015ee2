#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

namespace ldgm {

enum class AttributeKind : std::uint8_t { Category = 0, X = 1, Y = 2, W = 3, H = 4 };
inline constexpr std::size_t kNumKinds = 5;
inline constexpr std::array<AttributeKind, kNumKinds> kAllKinds = {
    AttributeKind::Category, AttributeKind::X, AttributeKind::Y, AttributeKind::W, AttributeKind::H};

constexpr std::size_t index_of(AttributeKind kind) { return static_cast<std::size_t>(kind); }
std::string_view to_string(AttributeKind kind);

enum class AttributeStatus : std::uint8_t { Precise, Coarse, Missing };
std::string_view to_string(AttributeStatus status);
AttributeStatus status_from_string(std::string_view name);

enum class RelationLabel : std::uint8_t {
  Smaller,
  Larger,
  Equal,
  Above,
  Bottom,
  Left,
  Right,
  Overlapped,
  Unavailable,
};
inline constexpr int kNumRelationLabels = 9;
std::string_view to_string(RelationLabel label);
RelationLabel relation_from_string(std::string_view name);

struct CanvasSpec {
  int width = 1;
  int height = 1;
  bool operator==(const CanvasSpec&) const = default;
};

/// Quantized attribute. `bin == vocab size` is the absorbing MASK value.
struct AttributeValue {
  int bin = 0;
  AttributeStatus status = AttributeStatus::Precise;
  bool operator==(const AttributeValue&) const = default;
};

struct Element {
  std::array<AttributeValue, kNumKinds> attrs{};

  AttributeValue& operator[](AttributeKind kind) { return attrs[index_of(kind)]; }
  const AttributeValue& operator[](AttributeKind kind) const { return attrs[index_of(kind)]; }
  bool operator==(const Element&) const = default;
};

/// Ordered pair (i, j) -> label. Absent pairs are "unavailable".
using RelationMap = std::map<std::pair<int, int>, RelationLabel>;

struct Layout {
  CanvasSpec canvas;
  std::vector<Element> elements;
  RelationMap relations;
  bool operator==(const Layout&) const = default;
};

struct QuantizerConfig {
  int category_count = 1;
  std::array<int, 4> geometry_bins{128, 128, 128, 128};
  int max_elements = 25;

  /// Clean-value vocabulary size for a kind; also the MASK index.
  int vocab(AttributeKind kind) const {
    return kind == AttributeKind::Category ? category_count : geometry_bins[index_of(kind) - 1];
  }
  int mask(AttributeKind kind) const { return vocab(kind); }
  std::array<int, kNumKinds> vocab_sizes() const;
  bool operator==(const QuantizerConfig&) const = default;
};

class CategoryVocabulary {
 public:
  CategoryVocabulary() = default;
  explicit CategoryVocabulary(std::vector<std::string> names) : names_(std::move(names)) {}

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(std::string_view name) const;

 private:
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Continuous (device-unit) layouts, the interchange representation.

using CategoryRef = std::variant<int, std::string>;

struct ContinuousElement {
  std::optional<CategoryRef> category;
  std::array<std::optional<double>, 4> geometry{};  // x, y, w, h; x/y are the top-left corner
  std::array<AttributeStatus, kNumKinds> status{};
  bool operator==(const ContinuousElement&) const = default;
};

struct ContinuousLayout {
  CanvasSpec canvas;
  std::vector<ContinuousElement> elements;
  RelationMap relations;
  bool operator==(const ContinuousLayout&) const = default;
};

/// Round-half-up of v / extent * (K - 1), clamped to [0, K - 1].
int quantize_value(double v, double extent, int bins);
double dequantize_value(int bin, double extent, int bins);

Layout quantize(const ContinuousLayout& layout, const QuantizerConfig& cfg,
                const CategoryVocabulary* vocab = nullptr);
/// Per-bin inverse of quantize; boxes are not clamped, so quantize(dequantize(L)) == L.
ContinuousLayout dequantize(const Layout& layout, const QuantizerConfig& cfg);

/// Box on [0, 1]-normalized coordinates, clamped to the canvas.
struct NormalizedBox {
  double x0, y0, x1, y1;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
};
NormalizedBox normalized_box(const Element& element, const QuantizerConfig& cfg);
bool has_mask(const Layout& layout, const QuantizerConfig& cfg);

// ---------------------------------------------------------------------------
// Tokens

struct AttributeToken {
  int element_index = 0;
  AttributeKind kind = AttributeKind::Category;
  int value = 0;
  bool condition = true;
  bool operator==(const AttributeToken&) const = default;
};

struct TokenSequence {
  std::vector<AttributeToken> tokens;
  RelationMap relations;
  std::size_t element_count() const { return tokens.size() / kNumKinds; }
  bool operator==(const TokenSequence&) const = default;
};

TokenSequence tokenize(const Layout& layout);
Layout detokenize(const TokenSequence& seq, std::span<const AttributeStatus> statuses, CanvasSpec canvas);
std::vector<AttributeStatus> token_statuses(const Layout& layout);

// ---------------------------------------------------------------------------
// Relations

enum class RelationMode { Size, Location, Mixed };
RelationMode relation_mode_from_string(std::string_view name);

RelationMap derive_relations(const Layout& layout, const QuantizerConfig& cfg, RelationMode mode,
                             double relative_tolerance = 0.05);

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string code;  // "bin-range", "cardinality", "relation-index", "status-mismatch", "canvas"
  std::string message;
};
std::vector<Violation> validate(const Layout& layout, const QuantizerConfig& cfg);

// ---------------------------------------------------------------------------
// JSON interchange

nlohmann::json to_json(const ContinuousLayout& layout, const CategoryVocabulary* vocab = nullptr);
ContinuousLayout continuous_from_json(const nlohmann::json& doc, bool strict = false);

nlohmann::json layout_to_json(const Layout& layout, const QuantizerConfig& cfg,
                              const CategoryVocabulary* vocab = nullptr);
Layout layout_from_json(const nlohmann::json& doc, const QuantizerConfig& cfg,
                        const CategoryVocabulary* vocab = nullptr, bool strict = false);

std::string serialize_layout(const Layout& layout, const QuantizerConfig& cfg,
                             const CategoryVocabulary* vocab = nullptr);
Layout parse_layout(std::string_view text, const QuantizerConfig& cfg,
                    const CategoryVocabulary* vocab = nullptr, bool strict = false);

nlohmann::json quantizer_to_json(const QuantizerConfig& cfg);
QuantizerConfig quantizer_from_json(const nlohmann::json& doc);

nlohmann::json vocabulary_to_json(const CategoryVocabulary& vocab);
CategoryVocabulary vocabulary_from_json(const nlohmann::json& doc);

}  // namespace ldgm
