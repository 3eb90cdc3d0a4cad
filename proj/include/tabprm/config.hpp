#pragma once

// Engine configuration file (JSON) and the factories that turn its backend
// and verifier sections into live objects.

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabprm/backend.hpp"
#include "tabprm/curation.hpp"
#include "tabprm/npg.hpp"
#include "tabprm/reward.hpp"
#include "tabprm/tts.hpp"
#include "tabprm/verifier.hpp"

namespace tabprm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// {"kind": "scripted", "fixture": path, "model": name}
/// {"kind": "remote", "endpoint", "model", "api_key_env", "max_retries", "timeout_s", "logprobs"}
struct BackendRef {
  std::string kind = "scripted";
  std::filesystem::path fixture;
  RemoteConfig remote;
  std::string model = "scripted";
  SamplingParams params;
};

/// kind: oracle | constant | region_oracle | generative_prm | scripted_prm
struct VerifierRef {
  std::string kind = "oracle";
  std::optional<BackendRef> backend;
  std::size_t max_tool_calls_per_step = 4;
  int constant_value = 1;
};

struct TheoremConfig {
  npg::TrialConfig trials;
  std::size_t pdl_instances = 100;
  npg::RandomMdpSpec pdl_sizes{2, 20, 2, 5, 1, 6};
  std::size_t first_order_instances = 200;
  std::vector<double> first_order_gammas{1e-2, 1e-3, 1e-4};
  double first_order_min_decay = 5.0;
  double first_order_min_fraction = 0.95;
  double pdl_tolerance = 1e-10;
  bool faulty_update = false;  // negative control: tilt against the signal
};

struct EngineConfig {
  Json raw;  // resolved configuration, embedded in reports
  std::filesystem::path base_dir;
  std::int64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::optional<std::filesystem::path> cache_dir;
  std::optional<BackendRef> policy;
  VerifierRef verifier;
  std::optional<BackendRef> judge;
  SearchConfig search;
  std::vector<std::size_t> n_values;
  ShapingConfig shaping;
  std::size_t samples_per_task = 1;
  std::vector<std::pair<std::string, BackendRef>> curation_policies;
  TheoremConfig theorem;
  std::uint64_t probe_seed = 0;
};

/// Reads and validates a config file. Relative paths resolve against the
/// file's directory. Throws ConfigError.
EngineConfig load_config(const std::filesystem::path& path);
EngineConfig parse_config(const Json& j, const std::filesystem::path& base_dir);

/// Re-applies the seed everywhere it is used and updates `raw`.
void set_seed(EngineConfig& config, std::int64_t seed);

std::shared_ptr<Backend> make_backend(const BackendRef& ref, const std::optional<std::filesystem::path>& cache_dir);
std::unique_ptr<StepVerifier> make_verifier(const VerifierRef& ref, const std::optional<std::filesystem::path>& cache_dir);

}  // namespace tabprm
