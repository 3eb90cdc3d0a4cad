#pragma once

// Subcommand implementations behind the tabprm executable. Each returns a
// process exit code and writes diagnostics to `err`.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tabprm/config.hpp"

namespace tabprm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitBackend = 2, kExitVerification = 3 };

struct CliOverrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::int64_t> seed;
  std::vector<std::size_t> n_values;
  std::optional<std::string> strategy;
};

/// Loads the config file and applies command-line overrides to its raw JSON
/// before validation, so the embedded config matches what actually ran.
EngineConfig resolve_config(const std::filesystem::path& path, const CliOverrides& overrides);

int cmd_tts_run(const std::filesystem::path& config_path, const std::filesystem::path& dataset_path,
                const CliOverrides& overrides, std::ostream& out, std::ostream& err);

/// `out` in overrides names the emitted JSONL file; defaults to
/// <output_dir>/instances.jsonl.
int cmd_curate(const std::filesystem::path& config_path, const std::filesystem::path& tasks_path,
               const CliOverrides& overrides, std::ostream& out, std::ostream& err);

int cmd_theorem(const std::filesystem::path& config_path, const CliOverrides& overrides, std::ostream& out,
                std::ostream& err);

int cmd_probe(const std::filesystem::path& config_path, const std::filesystem::path& trajectories_path,
              const CliOverrides& overrides, std::ostream& out, std::ostream& err);

int cmd_sandbox(const std::string& query, const std::filesystem::path& table_path, std::ostream& out,
                std::ostream& err);

int cmd_score(const std::filesystem::path& config_path, const std::filesystem::path& trajectories_path,
              const CliOverrides& overrides, std::ostream& out, std::ostream& err);

struct TheoremOutcome {
  Json summary;
  bool pdl_ok = false;
  bool first_order_ok = false;
  bool bound_ok = false;
  std::vector<Json> violations;

  bool ok() const { return pdl_ok && first_order_ok && bound_ok; }
};

/// PDL suite, first-order suite and bound trials. When `dir` is non-empty the
/// summary, bound audit and violation dumps are written there.
TheoremOutcome run_theorem(const EngineConfig& config, const std::filesystem::path& dir);

}  // namespace tabprm
