#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace covnet {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckResult {
  std::string kind;
  double max_relative_error = 0;
  std::size_t checked = 0;   // coordinates compared
  std::size_t required = 1;  // fewer than this is a failure
  bool passed() const { return checked >= required && max_relative_error < kGradcheckTolerance; }
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Central differences at f64 against the tape gradients for every layer
// kind, plus a whole segmentation network on 16x16 inputs (at least
// `graph_samples` parameters).
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, std::size_t graph_samples = 120);

}  // namespace covnet
