#pragma once

#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "ldgm/inference.hpp"
#include "ldgm/runtime.hpp"

namespace httplib {
class Server;
}

namespace ldgm {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int workers = 2;
  int queue_limit = 16;
  double timeout_s = 30.0;
};

/// Error raised while handling a request; rendered as
/// {"error": {"code", "message", "path"?}} with the given HTTP status.
struct HttpError {
  int status = 500;
  std::string code;
  std::string message;
  std::string path;
};
nlohmann::json error_body(const HttpError& err);

struct ParsedGenerate {
  GenerationRequest request;
  bool trajectory = false;
  bool seed_given = false;
};

/// Validates a /v1/generate body against the loaded model; throws HttpError.
ParsedGenerate parse_generate_body(const nlohmann::json& body, const ModelBundle& bundle,
                                   std::uint64_t fallback_seed);

/// Full response body for a parsed request.
nlohmann::json generate_response(const ParsedGenerate& parsed, const ModelBundle& bundle);

std::string base64url_encode(std::string_view bytes);
std::optional<std::string> base64url_decode(std::string_view text);

/// Bounded admission: at most `workers` concurrent decodes and `queue_limit`
/// waiters; further requests are rejected.
class Admission {
 public:
  Admission(int workers, int queue_limit) : workers_(workers), queue_limit_(queue_limit) {}
  enum class Result { Admitted, Overloaded, TimedOut };
  Result acquire(std::chrono::duration<double> timeout);
  void release();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int workers_;
  int queue_limit_;
  int active_ = 0;
  int waiting_ = 0;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void set_model(std::shared_ptr<const ModelBundle> bundle);
  std::shared_ptr<const ModelBundle> model() const;

  /// Binds the socket and returns the port.
  int bind();
  /// Serves until stop(); bind() must have been called.
  void listen();
  /// bind() + listen() on a background thread.
  int start();
  void stop();

 private:
  void install_routes();

  ServiceConfig cfg_;
  std::unique_ptr<httplib::Server> server_;
  Admission admission_;
  mutable std::mutex model_mutex_;
  std::shared_ptr<const ModelBundle> model_;
  std::chrono::steady_clock::time_point started_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace ldgm
