#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "charnmt/tensor.hpp"

namespace charnmt {

struct GradCheckResult {
  std::string name;
  std::size_t points = 0;
  std::size_t coordinates = 0;  // gradient entries compared
  std::size_t failures = 0;
  double max_error = 0;         // largest |a - n| / max(1, |a|, |n|)
  bool passed() const { return failures == 0; }
};

struct GradSuiteOptions {
  std::size_t points = 100;   // random points per check
  double tolerance = 1e-6;
  double step = 1e-5;         // central-difference step
  std::uint64_t seed = 1;
  std::string filter;         // run only checks whose name contains this
};

struct GradSuiteReport {
  std::vector<GradCheckResult> results;
  double seconds = 0;
  bool passed() const {
    for (const auto& r : results)
      if (!r.passed()) return false;
    return !results.empty();
  }
};

// Central finite differences against the tape's gradients for every
// differentiable primitive and the composite cells (recurrent cell, layer
// norm, bidirectional layer, attention, HM cell with the gate held open,
// gated output, decoder step). One suite per precision build.
namespace f32 {
GradSuiteReport run_gradient_suite(const GradSuiteOptions& options);
}
namespace f64 {
GradSuiteReport run_gradient_suite(const GradSuiteOptions& options);
}

}  // namespace charnmt
