#pragma once

#include <array>
#include <initializer_list>
#include <memory>
#include <vector>

#include "ldgm/denoiser.hpp"
#include "ldgm/diffusion.hpp"
#include "ldgm/layout.hpp"
#include "ldgm/rng.hpp"

namespace fixture {

inline ldgm::QuantizerConfig quantizer(int categories = 5, int bins = 32) {
  ldgm::QuantizerConfig q;
  q.category_count = categories;
  q.geometry_bins = {bins, bins, bins, bins};
  return q;
}

/// All-precise layout from (c, x, y, w, h) bins.
inline ldgm::Layout layout(std::initializer_list<std::array<int, 5>> elements, ldgm::CanvasSpec canvas = {100, 100}) {
  ldgm::Layout l;
  l.canvas = canvas;
  for (const auto& e : elements) {
    ldgm::Element el;
    for (std::size_t k = 0; k < 5; ++k) el.attrs[k] = {e[k], ldgm::AttributeStatus::Precise};
    l.elements.push_back(el);
  }
  return l;
}

inline ldgm::Layout random_layout(const ldgm::QuantizerConfig& q, int n, ldgm::Rng& rng) {
  ldgm::Layout l;
  l.canvas = {1000, 800};
  for (int i = 0; i < n; ++i) {
    ldgm::Element el;
    for (auto kind : ldgm::kAllKinds) el[kind] = {rng.uniform_int(0, q.vocab(kind) - 1), ldgm::AttributeStatus::Precise};
    l.elements.push_back(el);
  }
  return l;
}

inline ldgm::Schedule schedule(int steps, double gamma_end = 0.16) {
  ldgm::Schedule s;
  s.steps = steps;
  s.category_gamma_end = gamma_end;
  s.geometry_gamma_end = gamma_end;
  return s;
}

inline ldgm::StackSet stacks(const ldgm::QuantizerConfig& q, int steps, double gamma_end = 0.16) {
  return ldgm::build_stacks(q, schedule(steps, gamma_end), ldgm::NoiseAssignment{});
}

inline ldgm::ModelConfig small_model(const ldgm::QuantizerConfig& q, int d = 16, int heads = 2, int layers = 1,
                                     int ffn = 32) {
  ldgm::ModelConfig cfg;
  cfg.d_model = d;
  cfg.n_heads = heads;
  cfg.n_layers = layers;
  cfg.d_ffn = ffn;
  cfg.vocab = q.vocab_sizes();
  cfg.max_elements = q.max_elements;
  return cfg;
}

}  // namespace fixture
