#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ditopt/app/run_config.hpp"

namespace ditopt::app {

// Each command writes its artifacts and resolved_config.json under
// config.out and returns an exit code. Library errors propagate as
// exceptions; run_cli() maps them to exit codes.

int run_train(const RunConfig& config, std::ostream& log);
int run_distill(const RunConfig& config, std::ostream& log);
int run_sample(const RunConfig& config, std::ostream& log);
int run_profile(const RunConfig& config, std::ostream& log);
int run_prune(const RunConfig& config, std::ostream& log);
int run_quantize(const RunConfig& config, std::ostream& log);
int run_compare(const RunConfig& config, std::ostream& log);
int run_gen_data(const RunConfig& config, std::ostream& log);

inline constexpr const char* kLossCsvHeader = "step,loss,l_diff,l_kd,l_balance";

/// Parses argv (program name first) and dispatches.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ditopt::app
