#pragma once

namespace qdm {

// Full command-line surface (mask | train | sr | uhr | bench | eval |
// selftest). Returns the process exit code: 0 ok, 1 usage error, 2 data
// error, 3 numeric failure.
int dispatch(int argc, const char* const* argv);

} // namespace qdm
