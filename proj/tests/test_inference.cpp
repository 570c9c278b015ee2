#include <cmath>
#include <set>

#include "doctest.h"
#include "ldgm/error.hpp"
#include "ldgm/inference.hpp"
#include "support/fixtures.hpp"

using namespace ldgm;

namespace {

struct Setup {
  QuantizerConfig q = fixture::quantizer(5, 16);
  int steps = 8;
  StackSet stacks = fixture::stacks(q, steps);
  Denoiser model{fixture::small_model(q), 21};
};

std::set<std::pair<int, int>> missing_set(const Layout& l) {
  std::set<std::pair<int, int>> out;
  for (std::size_t i = 0; i < l.elements.size(); ++i)
    for (std::size_t k = 0; k < kNumKinds; ++k)
      if (l.elements[i].attrs[k].status == AttributeStatus::Missing) out.insert({static_cast<int>(i), static_cast<int>(k)});
  return out;
}

}  // namespace

TEST_CASE("task and decoder names round trip") {
  for (auto task : kAllTasks) CHECK(task_from_string(to_string(task)) == task);
  for (auto dec : kAllDecoders) CHECK(decoder_from_string(to_string(dec)) == dec);
  CHECK_THROWS_AS(task_from_string("gen-x"), Error);
  CHECK_FALSE(is_conditional(TaskKind::UGen));
  CHECK(is_conditional(TaskKind::Refinement));
}

TEST_CASE("build_task statuses") {
  const auto q = fixture::quantizer();
  const Layout src = fixture::layout({{0, 1, 2, 3, 4}, {1, 10, 12, 5, 6}, {2, 20, 3, 4, 4}});
  Rng rng(1, "task");

  SUBCASE("gen-t keeps categories and masks geometry") {
    const Layout l = build_task(src, {TaskKind::GenT}, q, rng);
    int precise = 0, masked = 0;
    for (const auto& e : l.elements)
      for (auto kind : kAllKinds) {
        if (e[kind].status == AttributeStatus::Precise) {
          CHECK(kind == AttributeKind::Category);
          ++precise;
        } else {
          CHECK(e[kind].status == AttributeStatus::Missing);
          CHECK(e[kind].bin == q.mask(kind));
          ++masked;
        }
      }
    CHECK(precise == 3);
    CHECK(masked == 12);
    CHECK(l.relations.empty());
  }
  SUBCASE("gen-ts keeps sizes") {
    const Layout l = build_task(src, {TaskKind::GenTS}, q, rng);
    for (const auto& e : l.elements) {
      CHECK(e[AttributeKind::W].status == AttributeStatus::Precise);
      CHECK(e[AttributeKind::H].status == AttributeStatus::Precise);
      CHECK(e[AttributeKind::X].status == AttributeStatus::Missing);
      CHECK(e[AttributeKind::Y].status == AttributeStatus::Missing);
    }
  }
  SUBCASE("gen-tr carries the requested share of relations") {
    TaskSpec spec{TaskKind::GenTR, 0.5};
    const Layout l = build_task(src, spec, q, rng);
    CHECK(l.relations.size() == 3);
    const auto all = derive_relations(src, q, RelationMode::Mixed);
    for (const auto& [pair, label] : l.relations) CHECK(all.at(pair) == label);
  }
  SUBCASE("u-gen masks everything") {
    const Layout l = build_task(src, {TaskKind::UGen}, q, rng);
    CHECK(missing_set(l).size() == 15);
  }
  SUBCASE("completion keeps at least one element and masks whole elements") {
    for (int r = 0; r < 20; ++r) {
      const Layout l = build_task(src, {TaskKind::Completion}, q, rng);
      int kept = 0;
      for (const auto& e : l.elements) {
        int miss = 0;
        for (auto kind : kAllKinds) miss += e[kind].status == AttributeStatus::Missing;
        CHECK((miss == 0 || miss == 5));
        kept += miss == 0;
      }
      CHECK(kept >= 1);
      CHECK(kept <= 2);
    }
  }
  SUBCASE("mixed-status tasks use only their allowed statuses") {
    const std::vector<std::pair<TaskKind, AttributeStatus>> excluded = {{TaskKind::GenPM, AttributeStatus::Coarse},
                                                                        {TaskKind::GenCM, AttributeStatus::Precise},
                                                                        {TaskKind::GenPC, AttributeStatus::Missing}};
    for (const auto& [task, banned] : excluded)
      for (int r = 0; r < 10; ++r) {
        const Layout l = build_task(src, {task}, q, rng);
        for (const auto& e : l.elements)
          for (std::size_t k = 1; k < kNumKinds; ++k) CHECK(e.attrs[k].status != banned);
      }
  }
  SUBCASE("incomplete sources are rejected") {
    Layout bad = src;
    bad.elements[0][AttributeKind::X] = {q.mask(AttributeKind::X), AttributeStatus::Missing};
    CHECK_THROWS_AS(build_task(bad, {TaskKind::GenT}, q, rng), Error);
  }
}

TEST_CASE("refinement noise has the folded-normal displacement") {
  const auto q = fixture::quantizer(5, 1024);
  Rng rng(2, "refine");
  double total = 0.0;
  long count = 0;
  for (int r = 0; r < 400; ++r) {
    Layout src;
    src.canvas = {1000, 1000};
    for (int i = 0; i < 5; ++i) {
      Element e;
      e[AttributeKind::Category] = {i % 5, AttributeStatus::Precise};
      for (std::size_t k = 1; k < kNumKinds; ++k) e.attrs[k] = {rng.uniform_int(200, 800), AttributeStatus::Precise};
      src.elements.push_back(e);
    }
    const Layout l = build_task(src, {TaskKind::Refinement}, q, rng);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(l.elements[i][AttributeKind::Category] == src.elements[i][AttributeKind::Category]);
      for (std::size_t k = 1; k < kNumKinds; ++k) {
        CHECK(l.elements[i].attrs[k].status == AttributeStatus::Coarse);
        total += std::abs(l.elements[i].attrs[k].bin - src.elements[i].attrs[k].bin);
        ++count;
      }
    }
  }
  const double expected = 0.01 * std::sqrt(2.0 / M_PI) * 1023.0;
  CHECK(std::abs(total / count - expected) < 0.1 * expected);
}

TEST_CASE("synthesize_coarse without noise keeps bins") {
  const auto q = fixture::quantizer();
  Rng rng(3, "coarse");
  const Layout src = fixture::random_layout(q, 4, rng);
  const Layout l = synthesize_coarse(src, q, 0.0, rng);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 1; k < kNumKinds; ++k) {
      CHECK(l.elements[i].attrs[k].bin == src.elements[i].attrs[k].bin);
      CHECK(l.elements[i].attrs[k].status == AttributeStatus::Coarse);
    }
}

TEST_CASE("commits_per_step") {
  CHECK(commits_per_step(0, 10) == 0);
  CHECK(commits_per_step(1, 10) == 1);
  CHECK(commits_per_step(10, 10) == 1);
  CHECK(commits_per_step(11, 10) == 2);
  CHECK(commits_per_step(100, 8) == 13);
  CHECK_THROWS_AS(commits_per_step(3, 0), Error);
}

TEST_CASE("confidence top-k commits ceil(N_m / T) per step") {
  Setup s;
  Rng rng(4, "topk");
  const Layout src = fixture::random_layout(s.q, 5, rng);
  const Layout input = build_task(src, {TaskKind::GenT}, s.q, rng);
  GenerationRequest req{input, DecoderKind::ConfidenceTopK, s.steps, 9};
  const auto r = decode(req, s.model, s.stacks, s.q);
  CHECK(r.missing == 20);
  REQUIRE(r.trajectory.steps.size() == static_cast<std::size_t>(s.steps));
  int remaining = 20;
  const int k = commits_per_step(20, s.steps);
  for (std::size_t i = 0; i < r.trajectory.steps.size(); ++i) {
    const auto& step = r.trajectory.steps[i];
    CHECK(step.t == s.steps - static_cast<int>(i));
    CHECK(static_cast<int>(step.committed.size()) == std::min(k, remaining));
    remaining -= static_cast<int>(step.committed.size());
  }
  CHECK(remaining == 0);
}

TEST_CASE("all-precise input with clamping is returned unchanged") {
  Setup s;
  Rng rng(5, "clamp");
  const Layout src = fixture::random_layout(s.q, 4, rng);
  for (auto dec : kAllDecoders) {
    GenerationRequest req{src, dec, s.steps, 3};
    req.clamp_conditions = true;
    const auto r = decode(req, s.model, s.stacks, s.q);
    CHECK(r.layout == src);
    CHECK(r.missing == 0);
    CHECK(r.trajectory.steps.size() == static_cast<std::size_t>(s.steps));
    for (const auto& step : r.trajectory.steps) CHECK(step.committed.empty());
  }
}

TEST_CASE("autoregressive commits in canonical token order") {
  Setup s;
  Rng rng(6, "ar");
  const Layout input = build_task(fixture::random_layout(s.q, 3, rng), {TaskKind::GenT}, s.q, rng);
  GenerationRequest req{input, DecoderKind::Autoregressive, s.steps, 1};
  const auto r = decode(req, s.model, s.stacks, s.q);
  std::vector<std::pair<int, int>> order;
  for (const auto& step : r.trajectory.steps) {
    CHECK(step.committed.size() <= 1);
    for (const auto& c : step.committed) order.push_back({c.element, static_cast<int>(index_of(c.kind))});
  }
  const auto expected = missing_set(input);
  CHECK(order == std::vector<std::pair<int, int>>(expected.begin(), expected.end()));
  CHECK(r.trajectory.steps.size() == 12);
  int prev_t = s.steps + 1;
  for (const auto& step : r.trajectory.steps) {
    CHECK(step.t <= prev_t);
    CHECK(step.t >= 1);
    prev_t = step.t;
  }
  CHECK(r.trajectory.steps.front().t == s.steps);
  CHECK(r.trajectory.steps.back().t == 1);
}

TEST_CASE("non-autoregressive commits everything on the first step") {
  Setup s;
  Rng rng(7, "nar");
  const Layout input = build_task(fixture::random_layout(s.q, 4, rng), {TaskKind::GenT}, s.q, rng);
  GenerationRequest req{input, DecoderKind::NonAutoregressive, s.steps, 2};
  const auto r = decode(req, s.model, s.stacks, s.q);
  CHECK(r.trajectory.steps[0].committed.size() == 16);
  CHECK(missing_set(r.trajectory.steps[0].layout).empty());
  for (std::size_t i = 1; i < r.trajectory.steps.size(); ++i) CHECK(r.trajectory.steps[i].committed.empty());
}

TEST_CASE("decoders agree when a single attribute is missing at temperature zero") {
  Setup s;
  Rng rng(8, "agree");
  Layout input = fixture::random_layout(s.q, 3, rng);
  input.elements[1][AttributeKind::Y] = {s.q.mask(AttributeKind::Y), AttributeStatus::Missing};
  std::vector<Layout> outputs;
  for (auto dec : kAllDecoders) {
    GenerationRequest req{input, dec, s.steps, 5, 0.0, true};
    outputs.push_back(decode(req, s.model, s.stacks, s.q).layout);
  }
  CHECK(outputs[0] == outputs[1]);
  CHECK(outputs[0] == outputs[2]);
}

TEST_CASE("randomized requests over every task and decoder") {
  Setup s;
  Rng rng(9, "random");
  for (int r = 0; r < 30; ++r) {
    const auto task = kAllTasks[static_cast<std::size_t>(r) % kAllTasks.size()];
    const auto dec = kAllDecoders[static_cast<std::size_t>(r) % kAllDecoders.size()];
    const Layout src = fixture::random_layout(s.q, rng.uniform_int(1, 6), rng);
    const Layout input = build_task(src, {task}, s.q, rng);
    GenerationRequest req{input, dec, s.steps, static_cast<std::uint64_t>(r), r % 2 ? 0.0 : 1.0, r % 3 == 0};
    const auto out = decode(req, s.model, s.stacks, s.q);
    CAPTURE(to_string(task));
    CAPTURE(to_string(dec));
    CHECK_FALSE(has_mask(out.layout, s.q));
    CHECK(validate(out.layout, s.q).empty());
    std::set<std::pair<int, int>> committed;
    std::size_t total = 0;
    for (const auto& step : out.trajectory.steps)
      for (const auto& c : step.committed) {
        committed.insert({c.element, static_cast<int>(index_of(c.kind))});
        ++total;
      }
    CHECK(total == committed.size());
    CHECK(committed == missing_set(input));
    CHECK(out.missing == static_cast<int>(committed.size()));
    CHECK(decode(req, s.model, s.stacks, s.q).layout == out.layout);
  }
}

TEST_CASE("decode rejects bad requests") {
  Setup s;
  Rng rng(10, "bad");
  const Layout l = fixture::random_layout(s.q, 2, rng);
  GenerationRequest req{l, DecoderKind::ConfidenceTopK, s.steps + 1, 1};
  CHECK_THROWS_AS(decode(req, s.model, s.stacks, s.q), Error);
  req.steps = s.steps;
  req.temperature = -1.0;
  CHECK_THROWS_AS(decode(req, s.model, s.stacks, s.q), Error);
}

TEST_CASE("trajectory JSON") {
  Setup s;
  Rng rng(11, "json");
  const Layout input = build_task(fixture::random_layout(s.q, 2, rng), {TaskKind::GenT}, s.q, rng);
  const auto r = decode({input, DecoderKind::ConfidenceTopK, s.steps, 1}, s.model, s.stacks, s.q);
  const auto doc = trajectory_to_json(r.trajectory, s.q);
  REQUIRE(doc.size() == static_cast<std::size_t>(s.steps));
  CHECK(doc[0]["step"] == s.steps);
  CHECK(doc[0]["committed"][0].contains("attribute"));
  CHECK(doc[0]["layout"].contains("elements"));
}
