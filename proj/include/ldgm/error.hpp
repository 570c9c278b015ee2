#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ldgm {

enum class ErrorCode {
  Usage,
  Validation,
  Vocabulary,
  Parse,
  Shape,
  Schedule,
  Domain,
  IncompleteLayout,
  ImpossibleTransition,
  Degenerate,
  Data,
  Checkpoint,
  Decoding,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library. `path()` carries a JSON path
/// (e.g. "$.elements[2].x") when the error originates from a document.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string path = {})
      : std::runtime_error(message), code_(code), path_(std::move(path)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& path() const noexcept { return path_; }

 private:
  ErrorCode code_;
  std::string path_;
};

}  // namespace ldgm
