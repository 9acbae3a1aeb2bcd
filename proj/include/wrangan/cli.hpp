#pragma once

#include <iosfwd>

namespace wrangan::cli {

/// Exit codes: 0 success, 1 failed precondition or runtime error, 2 usage.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace wrangan::cli
