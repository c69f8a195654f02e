#pragma once

#include <iosfwd>

namespace m3ad {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Entry point of the `m3ad` tool. Reports go to `out`, logs and errors to
// `err`; artifacts are written under --out.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace m3ad
