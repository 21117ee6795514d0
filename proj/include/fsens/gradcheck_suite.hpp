#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsens {

struct GradCheckOptions {
  std::uint64_t seed = 7;
  std::size_t points = 10;  // random points per primitive
  double step = 1e-5;
  double tolerance = 1e-4;
  bool composites = true;
  // Adds a check of an op with a deliberately wrong backward rule.
  bool inject_fault = false;
};

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Every primitive op, the joint ensemble loss for each penalty kind and the
// distillation loss, checked against central differences.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {});

bool all_passed(const std::vector<GradCheckResult>& results);

}  // namespace fsens
