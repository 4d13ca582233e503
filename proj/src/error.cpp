#include "cmc/error.hpp"

namespace cmc {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::config: return "config";
    case ErrorKind::batch_too_small: return "batch_too_small";
    case ErrorKind::degenerate_embedding: return "degenerate_embedding";
    case ErrorKind::label: return "label";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::unsupported_version: return "unsupported_version";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::payload_length: return "payload_length";
    case ErrorKind::pairing: return "pairing";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io:
    case ErrorKind::bad_magic:
    case ErrorKind::unsupported_version:
    case ErrorKind::truncated:
    case ErrorKind::payload_length:
      return 1;
    case ErrorKind::numeric:
    case ErrorKind::degenerate_embedding:
      return 3;
    default:
      return 2;
  }
}

}  // namespace cmc
