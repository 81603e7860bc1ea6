#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spf {

struct GradcheckEntry {
  std::string kernel;
  double max_rel_error;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;

  bool passed() const;
  std::string summary() const;
  std::string first_failure() const;
};

/// Finite-difference oracle over every kernel plus the full multi-task loss
/// on a toy scene (K=8, M=20, L=2). corrupt_kernel, when set, injects a
/// detached forward term into that kernel's check so its analytic gradient
/// no longer matches (negative-control hook).
GradcheckReport run_gradcheck(std::uint64_t seed, const std::string& corrupt_kernel = "");

}  // namespace spf
