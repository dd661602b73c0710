#pragma once

#include <string>
#include <vector>

namespace roleclarity {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SelfCheckOptions {
    std::size_t seeds = 20;          // e2e gradient seeds; primitives use 5x this
    bool inject_gradient_bug = false;  // negative control: corrupt one adjoint
};

/// Runs the gradient, decomposition, bound, and merge-equivalence
/// suites. Each result carries a one-line detail for logging.
std::vector<SuiteResult> run_selfcheck(const SelfCheckOptions& options);

bool all_passed(const std::vector<SuiteResult>& results);

}  // namespace roleclarity
