#pragma once

#include <stdexcept>
#include <string>

namespace cmc {

enum class ErrorKind {
  dimension,
  config,
  batch_too_small,
  degenerate_embedding,
  label,
  numeric,
  io,
  bad_magic,
  unsupported_version,
  truncated,
  payload_length,
  pairing,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// CLI exit-code mapping: 1 I/O and file format, 2 validation, 3 numeric.
int exit_code_for(ErrorKind kind);

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace cmc
