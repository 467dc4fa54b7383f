#pragma once

#include <iosfwd>

namespace cdpm::cli {

/// Entry point for the `cdpm` binary. Returns 0 on success, 1 on a usage
/// or configuration error and 2 on a runtime failure.
int run(int argc, char** argv);
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace cdpm::cli
