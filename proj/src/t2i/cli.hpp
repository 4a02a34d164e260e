#pragma once

#include <string>
#include <vector>

namespace t2i::cli {

// Batch entry point behind the `t2i` binary. Returns the process exit code:
// 0 on success, 1 on validation/config errors (one-line diagnostic on
// stderr), 2 on usage errors.
int run(const std::vector<std::string>& args);

}  // namespace t2i::cli
