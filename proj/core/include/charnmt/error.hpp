#pragma once

#include <stdexcept>

#include "charnmt/abi.hpp"
#include <string>

namespace charnmt::inline CHARNMT_ABI {

// Precondition broken by the caller (bad shapes, out-of-range arguments).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or inconsistent input data (corpora, vocabularies, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration (unknown keys, mismatched dimensions).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN loss, failed gradient check.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CHARNMT_REQUIRE(cond, msg)                 \
  do {                                             \
    if (!(cond)) throw ::charnmt::ContractViolation(msg); \
  } while (0)

}  // namespace charnmt
