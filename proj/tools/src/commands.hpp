#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ctxreg/data.hpp"
#include "ctxreg/training.hpp"

namespace ctxreg::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsageError = 2 };

/// Runs the `ctxreg` command line. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Settings used by `repro` when no config file is given.
TrainConfig default_repro_config(std::size_t vocab_size);

}  // namespace ctxreg::cli
