#pragma once

#include <string>
#include <vector>

namespace crate {

// Entry point behind the `crate` binary, kept callable in-process so tests
// can drive the full command surface without spawning. `args` excludes the
// program name. Returns the process exit code: 0 success, 1 validation
// error (bad flags, malformed config, unknown keys), 2 runtime failure.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace crate
