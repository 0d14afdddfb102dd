// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cbb/gradcheck.hpp"

namespace cbb::cli {

enum ExitCode : int { kSuccess = 0, kCheckFailed = 1, kUsageError = 2 };

struct Options {
  std::string command;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::vector<double>> ratio_grid;
  bool parallel_seeds = false;
  bool verbose = false;
};

/// --out if given, else $CBB_OUT_DIR/<command>, else ./cbb_out/<command>.
std::filesystem::path resolve_out_dir(const Options& options);

// Each command returns an ExitCode and throws cbb::Error subclasses for the
// dispatcher to map. `loss` replaces the default gradcheck objective; tests
// use it to plant a faulty backward rule.
int cmd_gradcheck(const Options& options, std::ostream& out, const OutputLoss& loss = {});
int cmd_oracle(const Options& options, std::ostream& out);
int cmd_sweep(const Options& options, std::ostream& out);
int cmd_run(const Options& options, std::ostream& out);

/// Runs options.command, turning exceptions into exit codes and messages on `err`.
int dispatch(const Options& options, std::ostream& out, std::ostream& err);

/// Full command line: parse, then dispatch.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cbb::cli
