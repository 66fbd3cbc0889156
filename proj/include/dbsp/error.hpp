#pragma once

#include <stdexcept>
#include <string>

namespace dbsp {

// Error hierarchy shared by the library and the CLI. The CLI maps these to
// exit codes: configuration 2, I/O or parse 3, contract violation 4.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied parameters (degrees, densities, thresholds, ...).
class config_error : public error {
 public:
  using error::error;
};

// Filesystem failures: missing files, unwritable paths.
class io_error : public error {
 public:
  using error::error;
};

// Malformed file contents; messages identify the offending byte offset or key.
class parse_error : public io_error {
 public:
  using io_error::io_error;
};

// Violated internal preconditions between values that should already agree
// (e.g. a plan dimensioned for a different mask set).
class contract_error : public error {
 public:
  using error::error;
};

// Brute-force oracle refusing a search space above its guard.
class search_space_error : public config_error {
 public:
  using config_error::config_error;
};

}  // namespace dbsp
