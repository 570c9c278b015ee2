#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ldgm/error.hpp"
#include "ldgm/eval.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace ldgm;

namespace {

Layout random_categorized(const QuantizerConfig& q, int n, int categories, Rng& rng) {
  Layout l = fixture::random_layout(q, n, rng);
  for (auto& e : l.elements) e[AttributeKind::Category].bin = rng.uniform_int(0, categories - 1);
  return l;
}

}  // namespace

TEST_CASE("hungarian matches brute force") {
  Rng rng(1, "hungarian");
  for (int n = 1; n <= 6; ++n)
    for (int r = 0; r < 10; ++r) {
      std::vector<double> cost(static_cast<std::size_t>(n * n));
      for (auto& c : cost) c = rng.uniform();
      const auto assign = hungarian(cost, n);
      double got = 0.0;
      for (int i = 0; i < n; ++i) got += cost[static_cast<std::size_t>(i * n + assign[static_cast<std::size_t>(i)])];
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      double best = 1e300;
      do {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += cost[static_cast<std::size_t>(i * n + perm[static_cast<std::size_t>(i)])];
        best = std::min(best, s);
      } while (std::next_permutation(perm.begin(), perm.end()));
      CHECK(got == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("max IoU of identical and disjoint layouts") {
  const auto q = fixture::quantizer(5, 11);
  const Layout a = fixture::layout({{0, 0, 0, 3, 3}, {1, 5, 5, 3, 3}});
  CHECK(max_iou_pair(a, a, q) == doctest::Approx(1.0));
  const Layout b = fixture::layout({{0, 6, 6, 2, 2}, {1, 0, 0, 2, 2}});
  CHECK(max_iou_pair(b, a, q) == 0.0);
  const Layout c = fixture::layout({{1, 0, 0, 3, 3}, {0, 5, 5, 3, 3}});
  CHECK(max_iou_pair(c, a, q) == 0.0);
}

TEST_CASE("max IoU equals the permutation oracle") {
  const auto q = fixture::quantizer(5, 16);
  Rng rng(2, "maxiou");
  for (int r = 0; r < 60; ++r) {
    const int n = 1 + r % 4;
    const Layout gen = random_categorized(q, n, 2, rng);
    const Layout ref = random_categorized(q, n, 2, rng);
    CHECK(max_iou_pair(gen, ref, q) == doctest::Approx(oracle::permutation_max_iou(gen, ref, q)).epsilon(1e-12));
  }
}

TEST_CASE("max IoU corpus pairing") {
  const auto q = fixture::quantizer(5, 11);
  const Layout a = fixture::layout({{0, 0, 0, 3, 3}, {1, 5, 5, 3, 3}});
  const Layout shifted = fixture::layout({{0, 1, 0, 3, 3}, {1, 5, 5, 3, 3}});
  const Layout other = fixture::layout({{2, 0, 0, 3, 3}});
  const std::vector<Layout> gen = {a, other};
  const std::vector<Layout> refs = {shifted, a};
  const double pair_shift = max_iou_pair(a, shifted, q);
  CHECK(max_iou(gen, refs, q, IouPairing::BySource) == doctest::Approx((pair_shift + 0.0) / 2));
  CHECK(max_iou(gen, refs, q, IouPairing::BestWithinCategoryMultiset) == doctest::Approx(0.5));
}

TEST_CASE("alignment fixtures") {
  const auto q = fixture::quantizer(5, 11);
  CHECK(alignment(fixture::layout({{0, 0, 0, 2, 2}, {1, 0, 5, 4, 2}}), q) == doctest::Approx(0.0));
  CHECK(alignment(fixture::layout({{0, 0, 0, 2, 2}, {1, 1, 5, 2, 2}}), q) == doctest::Approx(10.0));
  CHECK(alignment(fixture::layout({{0, 0, 0, 2, 2}}), q) == 0.0);
}

TEST_CASE("overlap fixtures") {
  const auto q = fixture::quantizer(5, 11);
  const Layout nested = fixture::layout({{0, 0, 0, 10, 10}, {1, 2, 2, 5, 5}});
  CHECK(overlap(nested, q) == doctest::Approx(100.0 * 0.25 / 2 + 100.0 / 2));
  CHECK(overlap(fixture::layout({{0, 0, 0, 2, 2}, {1, 5, 5, 2, 2}}), q) == 0.0);
}

TEST_CASE("layout metrics ignore element order") {
  const auto q = fixture::quantizer(5, 32);
  Rng rng(3, "order");
  for (int r = 0; r < 20; ++r) {
    const Layout l = fixture::random_layout(q, 2 + r % 5, rng);
    Layout rev = l;
    std::reverse(rev.elements.begin(), rev.elements.end());
    CHECK(alignment(rev, q) == doctest::Approx(alignment(l, q)).epsilon(1e-12));
    CHECK(overlap(rev, q) == doctest::Approx(overlap(l, q)).epsilon(1e-12));
    CHECK(max_iou_pair(rev, l, q) == doctest::Approx(max_iou_pair(l, l, q)).epsilon(1e-12));
  }
}

TEST_CASE("metrics reject layouts with MASK tokens") {
  const auto q = fixture::quantizer(5, 11);
  Layout l = fixture::layout({{0, 0, 0, 2, 2}, {1, 5, 5, 2, 2}});
  l.elements[0][AttributeKind::W] = {q.mask(AttributeKind::W), AttributeStatus::Missing};
  CHECK_THROWS_AS(alignment(l, q), Error);
  CHECK_THROWS_AS(overlap(l, q), Error);
}

TEST_CASE("retention") {
  Layout input = fixture::layout({{0, 1, 2, 3, 4}});
  input.elements[0][AttributeKind::H].status = AttributeStatus::Missing;
  const Layout output = fixture::layout({{0, 1, 2, 9, 7}});
  const auto rc = retention_count(input, output);
  CHECK(rc.precise == 4);
  CHECK(rc.kept == 3);
  CHECK(*retention(input, output) == doctest::Approx(75.0));

  Layout none = input;
  for (auto kind : kAllKinds) none.elements[0][kind].status = AttributeStatus::Missing;
  CHECK_FALSE(retention(none, output).has_value());
  CHECK_THROWS_AS(retention(fixture::layout({{0, 1, 1, 1, 1}, {0, 1, 1, 1, 1}}), output), Error);
}

TEST_CASE("Frechet distance") {
  SUBCASE("identical sets") {
    Rng rng(4, "fid");
    std::vector<std::vector<double>> a(40, std::vector<double>(6));
    for (auto& r : a)
      for (auto& v : r) v = rng.normal();
    CHECK(std::abs(frechet_distance(a, a)) < 1e-6);
  }
  SUBCASE("one dimension with shifted means") {
    const std::vector<std::vector<double>> a = {{-1.0}, {1.0}, {0.5}, {-0.5}};
    const std::vector<std::vector<double>> b = {{0.0}, {2.0}, {1.5}, {0.5}};
    CHECK(std::abs(frechet_distance(a, b) - 1.0) < 1e-9);
  }
  SUBCASE("matches a Denman-Beavers evaluation") {
    Rng rng(5, "fid2");
    for (int r = 0; r < 5; ++r) {
      std::vector<std::vector<double>> a(30, std::vector<double>(2)), b(25, std::vector<double>(2));
      for (auto& row : a) row = {rng.normal(), 0.5 * rng.normal() + 0.3 * row[0]};
      for (auto& row : b) row = {1.5 * rng.normal() + 0.2, rng.normal() - 0.4};
      CHECK(std::abs(frechet_distance(a, b) - oracle::frechet(a, b)) < 1e-8);
    }
  }
}

TEST_CASE("feature extractor") {
  const auto q = fixture::quantizer(5, 16);
  FeatureExtractorConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ffn = 32;
  cfg.steps = 20;
  cfg.batch_size = 8;
  Rng rng(6, "fx");
  std::vector<Layout> corpus;
  for (int i = 0; i < 40; ++i) corpus.push_back(fixture::random_layout(q, 2 + i % 4, rng));

  FeatureExtractor a(cfg, q), b(cfg, q);
  const double acc = a.train(corpus);
  b.train(corpus);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  const auto fa = a.features(corpus), fb = b.features(corpus);
  REQUIRE(fa.size() == corpus.size());
  CHECK(fa[0].size() == 256);
  CHECK(fa == fb);
  CHECK(std::abs(frechet_distance(fa, fb)) < 1e-3);
  for (double p : a.real_probability(corpus)) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  const Layout corrupted = a.corrupt(corpus[0], rng);
  CHECK(corrupted.elements.size() == corpus[0].elements.size());
  CHECK(token_statuses(corrupted) == token_statuses(corpus[0]));
}

TEST_CASE("evaluate builds a report") {
  const auto q = fixture::quantizer(5, 11);
  const std::vector<Layout> gen = {fixture::layout({{0, 0, 0, 10, 10}, {1, 2, 2, 5, 5}})};
  const auto r = evaluate(gen, gen, gen, q, IouPairing::BySource, nullptr);
  CHECK(r.max_iou == doctest::Approx(1.0));
  CHECK(r.overlap == doctest::Approx(62.5));
  CHECK(*r.retention == doctest::Approx(100.0));
  CHECK_FALSE(r.fid.has_value());
  const auto doc = to_json(r);
  CHECK(doc["fid"].is_null());
  CHECK(doc["n_layouts"] == 1);
}
