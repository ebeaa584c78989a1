#pragma once

#include <iosfwd>

#include <json.hpp>

namespace mnar::cli {

enum ExitCode : int { Ok = 0, RuntimeFailure = 1, UsageError = 2 };

/// Entry point of the `mnar` tool: `simulate`, `estimate` and `identify`.
/// Reports go to `out` (or the --out file), diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Flat dotted-key configuration after defaults, config file, MNAR_SEED and
/// flags have been applied in that order.
using Resolved = nlohmann::json;

/// Keys accepted in a config file.
const nlohmann::json& default_config();

}  // namespace mnar::cli
