#include <httplib.h>

#include <filesystem>
#include <set>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "ldgm/checkpoint.hpp"
#include "ldgm/service.hpp"
#include "support/fixtures.hpp"

using namespace ldgm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const CategoryVocabulary kVocab({"title", "text", "image", "button", "icon"});

struct Served {
  QuantizerConfig q = fixture::quantizer(5, 16);
  fs::path checkpoint;
  std::string version;
  Service service{ServiceConfig{"127.0.0.1", 0, 2, 4, 30.0}};
  int port = 0;

  Served() {
    TrainConfig cfg = TrainConfig::toy();
    cfg.schedule.steps = 6;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ffn = 32;
    Denoiser model(cfg.model(q), 17);
    const auto dir = fs::temp_directory_path() / "ldgm_tests";
    fs::create_directories(dir);
    checkpoint = dir / "service.ldgm";
    save_checkpoint(checkpoint, model, q, kVocab, nullptr, {{"train_config", to_json(cfg)}});
    version = load_checkpoint(checkpoint).model_version;
    port = service.start();
  }
  void load() { service.set_model(load_bundle(checkpoint)); }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

json layout_doc(const QuantizerConfig& q, int n, std::uint64_t seed) {
  Rng rng(seed, "service");
  return layout_to_json(fixture::random_layout(q, n, rng), q, &kVocab);
}

json post(httplib::Client& cli, const std::string& path, const json& body, int* status) {
  auto res = cli.Post(path, body.dump(), "application/json");
  REQUIRE(res);
  *status = res->status;
  return json::parse(res->body);
}

std::vector<json> read_events(const std::string& stream) {
  std::vector<json> out;
  std::istringstream in(stream);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("data: ", 0) == 0) out.push_back(json::parse(line.substr(6)));
  return out;
}

}  // namespace

TEST_CASE("base64url round trip") {
  for (const std::string s : {"", "a", "ab", "abc", "abcd", "{\"x\":[1,2,3]}\xff\xfe"}) {
    const auto enc = base64url_encode(s);
    CHECK(enc.find_first_of("+/=") == std::string::npos);
    CHECK(base64url_decode(enc) == s);
  }
  CHECK_FALSE(base64url_decode("ab*d").has_value());
}

TEST_CASE("admission control") {
  Admission a(1, 0);
  CHECK(a.acquire(std::chrono::milliseconds(10)) == Admission::Result::Admitted);
  CHECK(a.acquire(std::chrono::milliseconds(10)) == Admission::Result::Overloaded);
  a.release();
  CHECK(a.acquire(std::chrono::milliseconds(10)) == Admission::Result::Admitted);

  Admission b(1, 1);
  CHECK(b.acquire(std::chrono::milliseconds(10)) == Admission::Result::Admitted);
  CHECK(b.acquire(std::chrono::milliseconds(20)) == Admission::Result::TimedOut);
  Admission::Result late = Admission::Result::TimedOut;
  std::thread waiter([&] { late = b.acquire(std::chrono::seconds(5)); });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  b.release();
  waiter.join();
  CHECK(late == Admission::Result::Admitted);
}

TEST_CASE("health reports availability and model version") {
  Served s;
  auto cli = s.client();
  auto res = cli.Get("/v1/health");
  REQUIRE(res);
  CHECK(res->status == 503);
  CHECK(json::parse(res->body)["model_version"].is_null());

  int status = 0;
  const auto err = post(cli, "/v1/generate", {{"layout", layout_doc(s.q, 2, 1)}}, &status);
  CHECK(status == 503);
  CHECK(err["error"]["code"] == "model_unavailable");

  s.load();
  res = cli.Get("/v1/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto doc = json::parse(res->body);
  CHECK(doc["status"] == "ok");
  CHECK(doc["model_version"] == s.version);
}

TEST_CASE("generate validates requests") {
  Served s;
  s.load();
  auto cli = s.client();
  int status = 0;

  auto body = json{{"layout", layout_doc(s.q, 2, 2)}, {"options", {{"steps", 0}}}};
  auto err = post(cli, "/v1/generate", body, &status);
  CHECK(status == 400);
  CHECK(err["error"]["path"] == "$.options.steps");

  body = {{"layout", layout_doc(s.q, 2, 2)}, {"options", {{"task", "gen-x"}}}};
  err = post(cli, "/v1/generate", body, &status);
  CHECK(status == 400);
  CHECK(err["error"]["path"] == "$.options.task");

  auto bad = layout_doc(s.q, 2, 2);
  bad.erase("canvas");
  err = post(cli, "/v1/generate", {{"layout", bad}}, &status);
  CHECK(status == 400);
  CHECK(err["error"]["path"] == "$.layout.canvas");

  err = post(cli, "/v1/generate", {{"layout", layout_doc(s.q, 2, 2)}, {"extra", 1}}, &status);
  CHECK(status == 400);
  CHECK(err["error"]["path"] == "$.extra");

  auto res = cli.Post("/v1/generate", "{not json", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);

  res = cli.Get("/v1/nothing");
  REQUIRE(res);
  CHECK(res->status == 404);
  CHECK(json::parse(res->body)["error"]["code"] == "not_found");
}

TEST_CASE("generate is reproducible for an explicit seed and retains clamped conditions") {
  Served s;
  s.load();
  auto cli = s.client();
  int status = 0;
  const json body = {{"layout", layout_doc(s.q, 3, 3)},
                     {"options", {{"task", "gen-t"}, {"seed", 42}, {"trajectory", true}}}};
  auto a = post(cli, "/v1/generate", body, &status);
  REQUIRE(status == 200);
  auto b = post(cli, "/v1/generate", body, &status);
  REQUIRE(status == 200);
  CHECK(a["seed_used"] == 42);
  CHECK(a["model_version"] == s.version);
  CHECK(a["trajectory"].size() == 6);
  a.erase("timing_ms");
  b.erase("timing_ms");
  CHECK(a == b);

  const json clamped = {{"layout", layout_doc(s.q, 4, 4)}, {"options", {{"clamp", true}, {"seed", 1}}}};
  const auto c = post(cli, "/v1/generate", clamped, &status);
  REQUIRE(status == 200);
  CHECK(c["retention"] == 100.0);
  CHECK(c["layout"] == clamped["layout"]);
}

TEST_CASE("streaming emits one event per step and a terminal event") {
  Served s;
  s.load();
  auto cli = s.client();
  int status = 0;
  const int n = 3;
  const json body = {{"layout", layout_doc(s.q, n, 5)}, {"options", {{"task", "gen-t"}, {"seed", 7}}}};
  const auto handshake = post(cli, "/v1/generate/stream", body, &status);
  REQUIRE(status == 200);
  CHECK(handshake["steps"] == 6);
  const std::string url = handshake["stream_url"];

  std::string stream;
  auto res = cli.Get(url, [&](const char* data, std::size_t len) {
    stream.append(data, len);
    return true;
  });
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type").rfind("text/event-stream", 0) == 0);

  const auto events = read_events(stream);
  REQUIRE(events.size() == 7);
  std::set<std::pair<int, std::string>> committed;
  for (int i = 0; i < 6; ++i) {
    CHECK(events[static_cast<std::size_t>(i)]["step"] == 6 - i);
    for (const auto& c : events[static_cast<std::size_t>(i)]["committed"]) {
      const auto inserted = committed.insert({c["element"].get<int>(), c["attribute"].get<std::string>()}).second;
      CHECK(inserted);
    }
  }
  std::set<std::pair<int, std::string>> expected;
  for (int e = 0; e < n; ++e)
    for (const std::string a : {"x", "y", "w", "h"}) expected.insert({e, a});
  CHECK(committed == expected);
  CHECK(events.back()["done"] == true);
  CHECK(events.back()["seed_used"] == 7);

  const auto direct = post(cli, "/v1/generate", body, &status);
  CHECK(direct["layout"] == events.back()["layout"]);

  res = cli.Get("/v1/generate/stream?request=***");
  REQUIRE(res);
  CHECK(res->status == 400);
}
