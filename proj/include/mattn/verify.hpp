#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace mattn::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const;
  /// First failing check, or nullptr.
  const Check* first_failure() const;
};

struct Options {
  /// Replaces e_3 by 1.01 * e_3 inside the orthonormality suite.
  bool corrupt_basis = false;
  std::size_t lipschitz_trials = 1000;
  std::size_t truncation_draws = 100;
  std::size_t grad_coords = 200;
  std::size_t grad_seeds = 10;
};

SuiteResult orthonormality(const Options& opts = {});
SuiteResult isometry(const Options& opts = {});
SuiteResult truncation(const Options& opts = {});
/// One-hot recall by the explicit attention construction, I in {2, 4}.
SuiteResult recall(const Options& opts = {});
/// Closed-form per-unit-mass softmax weight and the selection limit in c.
SuiteResult softmax_mass(const Options& opts = {});
SuiteResult lipschitz(const Options& opts = {});
SuiteResult gradients(const Options& opts = {});

struct SuiteEntry {
  std::string name;
  std::function<SuiteResult(const Options&)> run;
};

const std::vector<SuiteEntry>& registry();

/// Throws std::invalid_argument for an unknown suite name.
SuiteResult run_suite(const std::string& name, const Options& opts = {});

}  // namespace mattn::verify
