#pragma once

namespace ctxlm::cli {

/// Dispatches one subcommand invocation. Exit codes: 0 ok, 1 usage error,
/// 2 data error, 3 numeric failure.
int run(int argc, const char* const* argv);

}  // namespace ctxlm::cli
