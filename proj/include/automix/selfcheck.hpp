#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace automix {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfcheckOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double step = 1e-6;
  double tolerance = 1e-5;
  std::size_t invariant_instances = 1000;
};

// Finite-difference checks of every differentiable op, the encoder and the
// Mix Block pipeline, one named result per (check, seed).
std::vector<CheckResult> run_gradient_suite(const SelfcheckOptions& options = {});

// Attention row sums, mask range and complement, singleton attention,
// swapped-pair symmetry and constant-mask degeneracy on random instances.
std::vector<CheckResult> run_invariant_suite(const SelfcheckOptions& options = {});

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options = {});

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace automix
