#pragma once

#include <iosfwd>

namespace cmco {

// Parses argv, runs one pipeline stage and maps failures to exit codes:
// 2 configuration, 3 numeric, 4 provenance.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cmco
