#include "ldgm/error.hpp"

namespace ldgm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage: return "usage";
    case ErrorCode::Validation: return "validation";
    case ErrorCode::Vocabulary: return "vocabulary";
    case ErrorCode::Parse: return "parse";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Schedule: return "schedule";
    case ErrorCode::Domain: return "domain";
    case ErrorCode::IncompleteLayout: return "incomplete-layout";
    case ErrorCode::ImpossibleTransition: return "impossible-transition";
    case ErrorCode::Degenerate: return "degenerate-input";
    case ErrorCode::Data: return "data";
    case ErrorCode::Checkpoint: return "checkpoint";
    case ErrorCode::Decoding: return "decoding";
  }
  return "unknown";
}

}  // namespace ldgm
