#pragma once

#include <stdexcept>
#include <string>

namespace recall {

enum class ErrorKind {
  dimension,
  numeric_domain,
  input,
  parse,
  grouping,
  alignment,
  completeness,
  compatibility,
  validation,
  io,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric_domain: return "numeric-domain";
    case ErrorKind::input: return "input";
    case ErrorKind::parse: return "parse";
    case ErrorKind::grouping: return "grouping";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::completeness: return "completeness";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::validation: return "validation";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Checkpoint container failures. Each has its own code so callers (and the
// malformed-file tests) can tell them apart.
enum class ParseErrc {
  header_length,
  malformed_header,
  truncated_payload,
  duplicate_name,
  unsupported_dtype,
  bad_offsets,
  overlapping_ranges,
  nonfinite_value,
  bad_name,
};

inline const char* to_string(ParseErrc c) {
  switch (c) {
    case ParseErrc::header_length: return "header-length";
    case ParseErrc::malformed_header: return "malformed-header";
    case ParseErrc::truncated_payload: return "truncated-payload";
    case ParseErrc::duplicate_name: return "duplicate-name";
    case ParseErrc::unsupported_dtype: return "unsupported-dtype";
    case ParseErrc::bad_offsets: return "bad-offsets";
    case ParseErrc::overlapping_ranges: return "overlapping-ranges";
    case ParseErrc::nonfinite_value: return "nonfinite-value";
    case ParseErrc::bad_name: return "bad-name";
  }
  return "unknown";
}

class ParseError : public Error {
 public:
  ParseError(ParseErrc code, const std::string& what)
      : Error(ErrorKind::parse, std::string("[") + to_string(code) + "] " + what), code_(code) {}

  ParseErrc code() const noexcept { return code_; }

 private:
  ParseErrc code_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace recall
