#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tnx {

struct SelftestSuite {
    std::string name;
    // runs the suite; throws SelftestFailure on the first violated check
    void (*run)();
};

struct SelftestFailure : std::runtime_error {
    explicit SelftestFailure(const std::string& msg) : std::runtime_error(msg) {}
};

const std::vector<SelftestSuite>& selftest_suites();

// Runs every oracle suite, printing one line per suite. Returns the number
// of failed suites (stops at the first failure).
int run_selftest(std::ostream& out);

}  // namespace tnx
