#include "tabprm/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace tabprm {

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

BackendRef parse_backend(const Json& j, const std::filesystem::path& base) {
  BackendRef ref;
  ref.kind = j.value("kind", std::string("scripted"));
  if (j.contains("params")) ref.params = params_from_json(j["params"]);
  if (ref.kind == "scripted") {
    if (!j.contains("fixture")) throw ConfigError("scripted backend needs \"fixture\"");
    ref.fixture = resolve(base, j["fixture"].get<std::string>());
    ref.model = j.value("model", std::string("scripted"));
  } else if (ref.kind == "remote") {
    ref.remote.endpoint = j.at("endpoint").get<std::string>();
    ref.remote.model = j.at("model").get<std::string>();
    ref.remote.api_key_env = j.value("api_key_env", std::string{});
    ref.remote.max_retries = j.value("max_retries", ref.remote.max_retries);
    ref.remote.timeout = std::chrono::seconds(j.value("timeout_s", 120));
    ref.remote.request_logprobs = j.value("logprobs", false);
    if (j.contains("api_key")) throw ConfigError("credentials belong in an environment variable named by api_key_env");
    ref.model = ref.remote.model;
  } else {
    throw ConfigError("unknown backend kind: " + ref.kind);
  }
  return ref;
}

}  // namespace

EngineConfig parse_config(const Json& j, const std::filesystem::path& base_dir) {
  EngineConfig c;
  c.raw = j;
  c.base_dir = base_dir;
  try {
    c.seed = j.value("seed", std::int64_t{0});
    if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j["output_dir"].get<std::string>());
    if (j.contains("cache_dir") && !j["cache_dir"].is_null())
      c.cache_dir = resolve(base_dir, j["cache_dir"].get<std::string>());

    const Json backends = j.value("backends", Json::object());
    if (backends.contains("policy")) c.policy = parse_backend(backends["policy"], base_dir);
    if (backends.contains("judge")) c.judge = parse_backend(backends["judge"], base_dir);
    if (backends.contains("verifier")) {
      const auto& v = backends["verifier"];
      c.verifier.kind = v.value("kind", std::string("oracle"));
      c.verifier.max_tool_calls_per_step = v.value("max_tool_calls_per_step", std::size_t{4});
      c.verifier.constant_value = v.value("value", 1);
      if (c.verifier.kind == "generative_prm" || c.verifier.kind == "scripted_prm") {
        if (!v.contains("backend")) throw ConfigError(c.verifier.kind + " verifier needs a \"backend\"");
        c.verifier.backend = parse_backend(v["backend"], base_dir);
        if (c.verifier.kind == "scripted_prm" && c.verifier.backend->kind != "scripted")
          throw ConfigError("scripted_prm needs a scripted backend");
      } else if (c.verifier.kind != "oracle" && c.verifier.kind != "constant" &&
                 c.verifier.kind != "region_oracle") {
        throw ConfigError("unknown verifier kind: " + c.verifier.kind);
      }
      if (c.verifier.constant_value != 1 && c.verifier.constant_value != -1)
        throw ConfigError("constant verifier value must be 1 or -1");
    }

    Json search = j.value("search", Json::object());
    if (c.policy && !search.contains("params")) search["params"] = params_to_json(c.policy->params);
    search["seed"] = c.seed;
    c.search = search_config_from_json(search);
    if (search.contains("n_values")) c.n_values = search["n_values"].get<std::vector<std::size_t>>();

    const Json shaping = j.value("shaping", Json::object());
    c.shaping.lambda_cal = shaping.value("lambda_cal", c.shaping.lambda_cal);
    c.shaping.lambda_tool = shaping.value("lambda_tool", c.shaping.lambda_tool);
    c.shaping.group_size = shaping.value("group_size", c.shaping.group_size);
    c.shaping.epsilon = shaping.value("epsilon", c.shaping.epsilon);
    validate(c.shaping);

    const Json curation = j.value("curation", Json::object());
    c.samples_per_task = curation.value("samples_per_task", std::size_t{1});
    if (c.samples_per_task < 1) throw ConfigError("samples_per_task must be >= 1");
    if (curation.contains("policies")) {
      for (const auto& p : curation["policies"])
        c.curation_policies.emplace_back(p.at("id").get<std::string>(), parse_backend(p, base_dir));
    }

    Json theorem = j.value("theorem", Json::object());
    theorem["seed"] = theorem.value("seed", static_cast<std::uint64_t>(c.seed));
    c.theorem.trials = npg::trial_config_from_json(theorem);
    c.theorem.pdl_instances = theorem.value("pdl_instances", c.theorem.pdl_instances);
    c.theorem.first_order_instances = theorem.value("first_order_instances", c.theorem.first_order_instances);
    if (theorem.contains("first_order_gammas"))
      c.theorem.first_order_gammas = theorem["first_order_gammas"].get<std::vector<double>>();
    c.theorem.faulty_update = theorem.value("faulty_update", false);
    for (std::size_t i = 0; i < c.theorem.first_order_gammas.size(); ++i) {
      double g = c.theorem.first_order_gammas[i];
      if (!(g > 0)) throw ConfigError("first_order_gammas must be positive");
      if (i > 0 && !(g < c.theorem.first_order_gammas[i - 1]))
        throw ConfigError("first_order_gammas must be descending");
    }
    if (c.theorem.first_order_gammas.size() < 2) throw ConfigError("first_order_gammas needs at least two values");

    c.probe_seed = j.value("probe", Json::object()).value("seed", static_cast<std::uint64_t>(c.seed));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

EngineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_config(j, base);
}

void set_seed(EngineConfig& config, std::int64_t seed) {
  config.raw["seed"] = seed;
  auto fresh = parse_config(config.raw, config.base_dir);
  config = std::move(fresh);
}

std::shared_ptr<Backend> make_backend(const BackendRef& ref, const std::optional<std::filesystem::path>& cache_dir) {
  std::shared_ptr<Backend> b;
  if (ref.kind == "scripted") {
    b = std::shared_ptr<Backend>(ScriptedBackend::from_file(ref.fixture, ref.model));
  } else {
    const auto& env = ref.remote.api_key_env;
    if (!cache_dir && !env.empty() && !std::getenv(env.c_str()))
      throw BackendError(BackendError::Code::Config, "environment variable " + env + " is not set");
    b = std::make_shared<RemoteBackend>(ref.remote);
  }
  if (cache_dir) b = std::make_shared<CachedBackend>(b, std::make_shared<ResponseCache>(*cache_dir));
  return b;
}

std::unique_ptr<StepVerifier> make_verifier(const VerifierRef& ref, const std::optional<std::filesystem::path>& cache_dir) {
  if (ref.kind == "oracle") return std::make_unique<OracleVerifier>();
  if (ref.kind == "constant") return std::make_unique<ConstantVerifier>(ref.constant_value);
  if (ref.kind == "region_oracle") throw ConfigError("region_oracle is only available to the probe command");
  GenerativePrmConfig cfg;
  cfg.params = ref.backend->params;
  cfg.max_tool_calls_per_step = ref.max_tool_calls_per_step;
  return std::make_unique<GenerativePrm>(make_backend(*ref.backend, cache_dir), cfg);
}

}  // namespace tabprm
