#include "ldgm/service.hpp"

#include <httplib.h>

#include <array>
#include <random>

#include "ldgm/error.hpp"
#include "ldgm/eval.hpp"

namespace ldgm {

using nlohmann::json;

json error_body(const HttpError& err) {
  json e = {{"code", err.code}, {"message", err.message}};
  if (!err.path.empty()) e["path"] = err.path;
  return {{"error", std::move(e)}};
}

namespace {

HttpError bad_request(const std::string& message, const std::string& path) {
  return {400, "invalid_request", message, path};
}

std::string nest_path(const std::string& prefix, const std::string& inner) {
  if (inner.empty()) return prefix;
  if (inner[0] == '$') return prefix + inner.substr(1);
  return prefix + "." + inner;
}

}  // namespace

ParsedGenerate parse_generate_body(const json& body, const ModelBundle& bundle, std::uint64_t fallback_seed) {
  if (!body.is_object()) throw bad_request("request body must be a JSON object", "$");
  for (const auto& [key, _] : body.items())
    if (key != "layout" && key != "options") throw bad_request("unknown field '" + key + "'", "$." + key);
  if (!body.contains("layout")) throw bad_request("missing required field 'layout'", "$.layout");

  const auto& q = bundle.quantizer();
  ParsedGenerate out;
  auto& req = out.request;
  req.steps = bundle.train_config().schedule.steps;
  req.seed = fallback_seed;

  std::optional<TaskKind> task;
  const json options = body.value("options", json::object());
  if (!options.is_object()) throw bad_request("options must be an object", "$.options");
  for (const auto& [key, value] : options.items()) {
    const std::string path = "$.options." + key;
    try {
      if (key == "task") {
        if (!value.is_null()) task = task_from_string(value.get<std::string>());
      } else if (key == "strategy") {
        req.decoder = decoder_from_string(value.get<std::string>());
      } else if (key == "steps") {
        if (!value.is_number_integer()) throw bad_request("steps must be an integer", path);
        const auto steps = value.get<long>();
        if (steps < 1 || steps > 1000) throw bad_request("steps must be in [1, 1000]", path);
        req.steps = static_cast<int>(steps);
      } else if (key == "seed") {
        if (!value.is_null()) {
          if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0))
            throw bad_request("seed must be a non-negative integer", path);
          req.seed = value.get<std::uint64_t>();
          out.seed_given = true;
        }
      } else if (key == "temperature") {
        if (!value.is_number()) throw bad_request("temperature must be a number", path);
        req.temperature = value.get<double>();
        if (!(req.temperature >= 0.0)) throw bad_request("temperature must be >= 0", path);
      } else if (key == "clamp") {
        req.clamp_conditions = value.get<bool>();
      } else if (key == "trajectory") {
        out.trajectory = value.get<bool>();
      } else {
        throw bad_request("unknown option '" + key + "'", path);
      }
    } catch (const json::exception&) {
      throw bad_request("wrong type", path);
    } catch (const Error& e) {
      throw bad_request(e.what(), path);
    }
  }

  Layout layout;
  try {
    layout = layout_from_json(body.at("layout"), q, &bundle.vocabulary(), true);
  } catch (const Error& e) {
    throw bad_request(e.what(), nest_path("$.layout", e.path()));
  }
  if (layout.elements.empty()) throw bad_request("layout needs at least one element", "$.layout.elements");
  if (static_cast<int>(layout.elements.size()) > q.max_elements)
    throw bad_request("more than " + std::to_string(q.max_elements) + " elements", "$.layout.elements");
  for (const auto& v : validate(layout, q))
    if (v.code != "status-mismatch") throw bad_request(v.message, "$.layout");

  if (task) {
    try {
      Rng rng(req.seed, "task");
      layout = build_task(layout, TaskSpec{*task}, q, rng);
    } catch (const Error& e) {
      throw HttpError{422, "task_mismatch", e.what(), "$.layout"};
    }
  }
  req.layout = std::move(layout);
  return out;
}

json generate_response(const ParsedGenerate& parsed, const ModelBundle& bundle) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto stacks = bundle.stacks(parsed.request.steps);
  DecodeResult result;
  try {
    result = decode(parsed.request, bundle.model(), *stacks, bundle.quantizer());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Decoding) throw HttpError{500, "internal", e.what(), ""};
    throw HttpError{422, "unprocessable", e.what(), "$.layout"};
  }
  const auto& q = bundle.quantizer();
  json body = {{"layout", layout_to_json(result.layout, q, &bundle.vocabulary())},
               {"seed_used", parsed.request.seed},
               {"model_version", bundle.model_version()}};
  if (auto r = retention(parsed.request.layout, result.layout)) body["retention"] = *r;
  if (parsed.trajectory) body["trajectory"] = trajectory_to_json(result.trajectory, q, &bundle.vocabulary());
  body["timing_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return body;
}

// ---------------------------------------------------------------------------

std::string base64url_encode(std::string_view bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
  std::string out;
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto v = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                   static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    if (rest == 2) out += kAlphabet[(v >> 6) & 63];
  }
  return out;
}

std::optional<std::string> base64url_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '-') return 62;
    if (c == '_') return 63;
    return -1;
  };
  while (!text.empty() && text.back() == '=') text.remove_suffix(1);
  if (text.size() % 4 == 1) return std::nullopt;
  std::string out;
  unsigned acc = 0;
  int bits = 0;
  for (char c : text) {
    const int v = value(c);
    if (v < 0) return std::nullopt;
    acc = (acc << 6) | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((acc >> bits) & 0xFF);
    }
  }
  return out;
}

Admission::Result Admission::acquire(std::chrono::duration<double> timeout) {
  std::unique_lock lock(mutex_);
  if (active_ < workers_) {
    ++active_;
    return Result::Admitted;
  }
  if (waiting_ >= queue_limit_) return Result::Overloaded;
  ++waiting_;
  const bool ok = cv_.wait_for(lock, timeout, [&] { return active_ < workers_; });
  --waiting_;
  if (!ok) return Result::TimedOut;
  ++active_;
  return Result::Admitted;
}

void Admission::release() {
  {
    std::lock_guard lock(mutex_);
    --active_;
  }
  cv_.notify_one();
}

// ---------------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const HttpError& err) { send_json(res, err.status, error_body(err)); }

std::uint64_t fresh_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

json parse_body(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw bad_request(std::string("malformed JSON: ") + e.what(), "$");
  }
}

class AdmissionGuard {
 public:
  AdmissionGuard(Admission& a, double timeout_s) : admission_(a) {
    switch (a.acquire(std::chrono::duration<double>(timeout_s))) {
      case Admission::Result::Admitted: held_ = true; break;
      case Admission::Result::Overloaded: throw HttpError{429, "overloaded", "decode queue is full", ""};
      case Admission::Result::TimedOut: throw HttpError{503, "timeout", "request timed out waiting for a worker", ""};
    }
  }
  ~AdmissionGuard() {
    if (held_) admission_.release();
  }
  AdmissionGuard(const AdmissionGuard&) = delete;
  AdmissionGuard& operator=(const AdmissionGuard&) = delete;

 private:
  Admission& admission_;
  bool held_ = false;
};

}  // namespace

Service::Service(ServiceConfig cfg)
    : cfg_(std::move(cfg)),
      server_(std::make_unique<httplib::Server>()),
      admission_(worker_threads(cfg_.workers), std::max(0, cfg_.queue_limit)),
      started_(std::chrono::steady_clock::now()) {
  const int pool = worker_threads(cfg_.workers) + std::max(0, cfg_.queue_limit) + 2;
  server_->new_task_queue = [pool] { return new httplib::ThreadPool(static_cast<std::size_t>(pool)); };
  install_routes();
}

Service::~Service() { stop(); }

void Service::set_model(std::shared_ptr<const ModelBundle> bundle) {
  std::lock_guard lock(model_mutex_);
  model_ = std::move(bundle);
}

std::shared_ptr<const ModelBundle> Service::model() const {
  std::lock_guard lock(model_mutex_);
  return model_;
}

void Service::install_routes() {
  auto require_model = [this]() {
    auto m = model();
    if (!m) throw HttpError{503, "model_unavailable", "no model loaded", ""};
    return m;
  };

  server_->Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    const auto m = model();
    const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    send_json(res, m ? 200 : 503,
              {{"status", m ? "ok" : "unavailable"},
               {"model_version", m ? json(m->model_version()) : json(nullptr)},
               {"uptime_s", uptime}});
  });

  server_->Post("/v1/generate", [this, require_model](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto m = require_model();
      const auto parsed = parse_generate_body(parse_body(req.body), *m, fresh_seed());
      AdmissionGuard guard(admission_, cfg_.timeout_s);
      send_json(res, 200, generate_response(parsed, *m));
    } catch (const HttpError& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, {500, "internal", e.what(), ""});
    }
  });

  // Handshake: validates the body and returns a self-contained stream URL.
  server_->Post("/v1/generate/stream", [this, require_model](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto m = require_model();
      json body = parse_body(req.body);
      const auto parsed = parse_generate_body(body, *m, fresh_seed());
      if (!parsed.seed_given) body["options"]["seed"] = parsed.request.seed;
      send_json(res, 200,
                {{"stream_url", "/v1/generate/stream?request=" + base64url_encode(body.dump())},
                 {"seed_used", parsed.request.seed},
                 {"steps", parsed.request.steps}});
    } catch (const HttpError& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, {500, "internal", e.what(), ""});
    }
  });

  server_->Get("/v1/generate/stream", [this, require_model](const httplib::Request& req, httplib::Response& res) {
    std::shared_ptr<const ModelBundle> m;
    std::shared_ptr<ParsedGenerate> parsed;
    try {
      m = require_model();
      if (!req.has_param("request")) throw bad_request("missing 'request' parameter", "$");
      const auto decoded = base64url_decode(req.get_param_value("request"));
      if (!decoded) throw bad_request("request token is not base64url", "$");
      parsed = std::make_shared<ParsedGenerate>(parse_generate_body(parse_body(*decoded), *m, fresh_seed()));
    } catch (const HttpError& e) {
      send_error(res, e);
      return;
    } catch (const std::exception& e) {
      send_error(res, {500, "internal", e.what(), ""});
      return;
    }
    res.status = 200;
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, m, parsed](std::size_t, httplib::DataSink& sink) {
          auto emit = [&sink](const json& event) {
            const std::string frame = "data: " + event.dump() + "\n\n";
            return sink.write(frame.data(), frame.size());
          };
          try {
            AdmissionGuard guard(admission_, cfg_.timeout_s);
            const auto& q = m->quantizer();
            const auto stacks = m->stacks(parsed->request.steps);
            const auto result = decode(parsed->request, m->model(), *stacks, q, [&](const TrajectoryStep& step) {
              if (!emit(step_to_json(step, q, &m->vocabulary()))) throw HttpError{499, "closed", "client went away", ""};
            });
            json done = {{"done", true},
                         {"layout", layout_to_json(result.layout, q, &m->vocabulary())},
                         {"seed_used", parsed->request.seed}};
            if (auto r = retention(parsed->request.layout, result.layout)) done["retention"] = *r;
            emit(done);
          } catch (const HttpError& e) {
            if (e.status != 499) emit(error_body(e));
          } catch (const std::exception& e) {
            emit(error_body({500, "internal", e.what(), ""}));
          }
          sink.done();
          return true;
        });
  });

  server_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_json(res, res.status, error_body({res.status, "not_found", "no such endpoint", ""}));
  });
}

int Service::bind() {
  port_ = cfg_.port == 0 ? server_->bind_to_any_port(cfg_.host) : (server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
  if (port_ < 0) throw Error(ErrorCode::Usage, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return port_;
}

void Service::listen() { server_->listen_after_bind(); }

int Service::start() {
  const int port = bind();
  thread_ = std::thread([this] { listen(); });
  server_->wait_until_ready();
  return port;
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace ldgm
