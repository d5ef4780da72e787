#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace kk::cli {

/// Exit statuses of the runner.
enum ExitCode : int { kOk = 0, kValidation = 2, kNumeric = 3 };

const std::vector<std::string>& task_names();

struct RunRequest {
  std::string task;
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;     // overrides the config's seed
  std::optional<std::filesystem::path> out_dir;
};

struct RunOutcome {
  int exit_code = kOk;
  std::string message;                   // error text, empty on success
  std::filesystem::path out_dir;
  nlohmann::json manifest;
};

/// Loads the config (a plain config or an emitted manifest, whose config echo is
/// used), validates it, runs the task and writes the artifacts plus manifest.json.
/// Never throws; failures map to exit codes 2 (validation) and 3 (numeric).
RunOutcome run_experiment(const RunRequest& req);

/// Runs an already parsed config. Throws DomainError on validation failures
/// (the message starts with the offending field) and NumericError on numeric ones.
/// Returns the manifest, which is also written to out/manifest.json.
nlohmann::json execute(const std::string& task, nlohmann::json config,
                       const std::filesystem::path& out);

}  // namespace kk::cli
