#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace qdm::selftest {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

// Compact oracle/property suites over every module; returns one line of
// results per suite. All suites are deterministic (fixed seeds).
std::vector<SuiteResult> run_all();

// prints one pass/fail line per suite; true iff everything passed
bool run_all(std::ostream& os);

} // namespace qdm::selftest
