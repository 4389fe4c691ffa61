#pragma once

namespace tta::cli {

// Entry point behind the binary's main(). Exit codes: 0 success, 1 runtime
// error, 2 usage or configuration error.
int dispatch(int argc, const char* const* argv);

}  // namespace tta::cli
