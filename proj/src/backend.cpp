#include "tabprm/backend.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <unistd.h>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

Json messages_to_json(std::span<const ChatMessage> messages) {
  Json arr = Json::array();
  for (const auto& m : messages) arr.push_back(Json{{"role", std::string(to_string(m.role))}, {"content", m.content}});
  return arr;
}

std::span<const ChatMessage> without_prefill(std::span<const ChatMessage> messages, std::string& prefill) {
  prefill.clear();
  if (!messages.empty() && messages.back().role == Role::Assistant) {
    prefill = messages.back().content;
    return messages.first(messages.size() - 1);
  }
  return messages;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// Matches `prefix` against the start of `text` ignoring whitespace differences.
// Returns the offset in `text` just past the matched prefix (and any following
// whitespace), or npos when `text` does not start with `prefix`.
std::size_t match_prefix(std::string_view text, std::string_view prefix) {
  std::size_t i = 0, j = 0;
  while (true) {
    while (j < prefix.size() && is_space(prefix[j])) ++j;
    if (j == prefix.size()) break;
    while (i < text.size() && is_space(text[i])) ++i;
    if (i == text.size() || text[i] != prefix[j]) return std::string_view::npos;
    ++i;
    ++j;
  }
  while (i < text.size() && is_space(text[i])) ++i;
  return i;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BackendError(BackendError::Code::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Probability of the first token of the verdict inside the last "\boxed{".
std::optional<double> verdict_confidence(const Json& logprobs) {
  if (!logprobs.is_object() || !logprobs.contains("content") || !logprobs["content"].is_array()) return std::nullopt;
  std::string text;
  std::vector<std::pair<std::size_t, double>> starts;
  for (const auto& tok : logprobs["content"]) {
    if (!tok.contains("token") || !tok.contains("logprob")) continue;
    starts.emplace_back(text.size(), tok["logprob"].get<double>());
    text += tok["token"].get<std::string>();
  }
  auto pos = text.rfind("\\boxed{");
  if (pos == std::string::npos) return std::nullopt;
  std::size_t target = pos + 7;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    std::size_t end = k + 1 < starts.size() ? starts[k + 1].first : text.size();
    if (target >= starts[k].first && target < end) {
      return std::exp(starts[k].second);
    }
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

std::string_view to_string(FinishReason f) {
  switch (f) {
    case FinishReason::Stop: return "stop";
    case FinishReason::Length: return "length";
    case FinishReason::ToolPause: return "tool_pause";
  }
  return "stop";
}

void validate(const SamplingParams& params) {
  if (params.temperature < 0) throw std::invalid_argument("temperature must be >= 0");
  if (!(params.top_p > 0 && params.top_p <= 1)) throw std::invalid_argument("top_p must be in (0, 1]");
  if (params.max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
}

Json params_to_json(const SamplingParams& params) {
  Json j{{"temperature", params.temperature},
         {"top_p", params.top_p},
         {"max_tokens", params.max_tokens},
         {"stop", params.stop_sequences}};
  j["seed"] = params.seed ? Json(*params.seed) : Json(nullptr);
  return j;
}

SamplingParams params_from_json(const Json& j) {
  SamplingParams p;
  p.temperature = j.value("temperature", p.temperature);
  p.top_p = j.value("top_p", p.top_p);
  p.max_tokens = j.value("max_tokens", p.max_tokens);
  if (j.contains("stop")) p.stop_sequences = j["stop"].get<std::vector<std::string>>();
  if (j.contains("seed") && !j["seed"].is_null()) p.seed = j["seed"].get<std::int64_t>();
  validate(p);
  return p;
}

Json completion_to_json(const Completion& c) {
  Json j{{"text", c.text},
         {"finish_reason", std::string(to_string(c.finish_reason))},
         {"usage", {{"prompt_tokens", c.prompt_tokens}, {"completion_tokens", c.completion_tokens}}}};
  j["confidence"] = c.confidence ? Json(*c.confidence) : Json(nullptr);
  return j;
}

Completion completion_from_json(const Json& j) {
  Completion c;
  c.text = j.at("text").get<std::string>();
  auto fr = j.value("finish_reason", std::string("stop"));
  c.finish_reason = fr == "length" ? FinishReason::Length : fr == "tool_pause" ? FinishReason::ToolPause : FinishReason::Stop;
  if (j.contains("confidence") && !j["confidence"].is_null()) c.confidence = j["confidence"].get<double>();
  if (j.contains("usage")) {
    c.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
    c.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
  }
  return c;
}

bool apply_stop_sequences(std::string& text, std::span<const std::string> stops) {
  std::size_t cut = std::string::npos;
  for (const auto& s : stops) {
    if (s.empty()) continue;
    auto p = text.find(s);
    if (p != std::string::npos && p < cut) cut = p;
  }
  if (cut == std::string::npos) return false;
  text.resize(cut);
  return true;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* kHex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

std::string request_digest(std::string_view model_name, std::span<const ChatMessage> messages,
                           const SamplingParams& params) {
  Json j{{"model", model_name}, {"messages", messages_to_json(messages)}, {"params", params_to_json(params)}};
  return sha256_hex(j.dump());
}

std::string fixture_key(std::span<const ChatMessage> messages, const SamplingParams& params) {
  std::string prefill;
  auto base = without_prefill(messages, prefill);
  Json j{{"messages", messages_to_json(base)},
         {"temperature", params.temperature},
         {"top_p", params.top_p},
         {"max_tokens", params.max_tokens}};
  return sha256_hex(j.dump());
}

Completion Backend::complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  if (messages.empty()) throw std::invalid_argument("complete() needs at least one message");
  calls_.fetch_add(1);
  return do_complete(messages, params);
}

// Fixtures -----------------------------------------------------------------

Json fixture_entry_to_json(const FixtureEntry& e) {
  Json j;
  if (e.digest) j["digest"] = *e.digest;
  if (e.seq) j["seq"] = *e.seq;
  if (e.seed) j["seed"] = *e.seed;
  j["text"] = e.text;
  j["confidence"] = e.confidence ? Json(*e.confidence) : Json(nullptr);
  return j;
}

std::vector<FixtureEntry> load_fixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BackendError(BackendError::Code::Io, "cannot open fixture file " + path.string());
  std::vector<FixtureEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    try {
      auto j = Json::parse(line);
      FixtureEntry e;
      if (j.contains("digest")) e.digest = j["digest"].get<std::string>();
      if (j.contains("seq")) e.seq = j["seq"].get<std::int64_t>();
      if (j.contains("seed") && !j["seed"].is_null()) e.seed = j["seed"].get<std::int64_t>();
      if (!e.digest && !e.seq) throw std::runtime_error("entry needs \"digest\" or \"seq\"");
      e.text = j.at("text").get<std::string>();
      if (j.contains("confidence") && !j["confidence"].is_null()) e.confidence = j["confidence"].get<double>();
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw BackendError(BackendError::Code::Config,
                         path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

void write_fixture(const std::filesystem::path& path, std::span<const FixtureEntry> entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BackendError(BackendError::Code::Io, "cannot write fixture file " + path.string());
  for (const auto& e : entries) out << fixture_entry_to_json(e).dump() << '\n';
}

ScriptedBackend::ScriptedBackend(std::vector<FixtureEntry> entries, std::string model) : model_(std::move(model)) {
  for (auto& e : entries) {
    if (e.digest) {
      keyed_[*e.digest].push_back(std::move(e));
    } else {
      sequence_.push_back(std::move(e));
    }
  }
  std::stable_sort(sequence_.begin(), sequence_.end(),
                   [](const FixtureEntry& a, const FixtureEntry& b) { return *a.seq < *b.seq; });
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path, std::string model) {
  return std::make_unique<ScriptedBackend>(load_fixture(path), std::move(model));
}

Completion ScriptedBackend::do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  std::string prefill;
  without_prefill(messages, prefill);
  auto key = fixture_key(messages, params);

  const FixtureEntry* chosen = nullptr;
  std::size_t offset = 0;
  if (auto it = keyed_.find(key); it != keyed_.end()) {
    std::vector<std::pair<const FixtureEntry*, std::size_t>> matches;
    for (const auto& e : it->second) {
      auto off = match_prefix(e.text, prefill);
      if (off != std::string_view::npos) matches.emplace_back(&e, off);
    }
    // seed-pinned entries first; the longest pinned text carries every continuation
    for (const auto& [e, off] : matches) {
      if (params.seed && e->seed && *e->seed == *params.seed &&
          (!chosen || e->text.size() > chosen->text.size())) {
        chosen = e;
        offset = off;
      }
    }
    if (!chosen && !matches.empty()) {
      auto seed = static_cast<std::uint64_t>(params.seed.value_or(0));
      const auto& pick = matches[seed % matches.size()];
      chosen = pick.first;
      offset = pick.second;
    }
  }

  Completion c;
  if (chosen) {
    c.text = chosen->text.substr(offset);
    c.confidence = chosen->confidence;
  } else {
    std::lock_guard lock(mu_);
    if (next_seq_ >= sequence_.size()) {
      BackendError err(BackendError::Code::FixtureMiss, "no fixture entry for digest " + key);
      err.digest = key;
      throw err;
    }
    const auto& e = sequence_[next_seq_++];
    c.text = e.text;
    c.confidence = e.confidence;
  }
  c.finish_reason = apply_stop_sequences(c.text, params.stop_sequences) ? FinishReason::ToolPause : FinishReason::Stop;
  c.completion_tokens = static_cast<std::int64_t>(c.text.size() / 4);
  return c;
}

// Remote -------------------------------------------------------------------

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
  const auto& ep = config_.endpoint;
  auto scheme_end = ep.find("://");
  if (scheme_end == std::string::npos) throw BackendError(BackendError::Code::Config, "endpoint needs a scheme: " + ep);
  auto path_start = ep.find('/', scheme_end + 3);
  scheme_host_port_ = ep.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/v1/chat/completions" : ep.substr(path_start);
  if (config_.model.empty()) throw BackendError(BackendError::Code::Config, "remote backend needs a model name");
}

Json RemoteBackend::build_request(std::span<const ChatMessage> messages, const SamplingParams& params) const {
  Json body{{"model", config_.model},
            {"messages", messages_to_json(messages)},
            {"temperature", params.temperature},
            {"top_p", params.top_p},
            {"max_tokens", params.max_tokens}};
  if (!params.stop_sequences.empty()) body["stop"] = params.stop_sequences;
  if (params.seed) body["seed"] = *params.seed;
  if (config_.request_logprobs) body["logprobs"] = true;
  return body;
}

Completion RemoteBackend::parse_response(const Json& body, const SamplingParams& params) {
  const auto& choice = body.at("choices").at(0);
  Completion c;
  const auto& content = choice.at("message").at("content");
  c.text = content.is_string() ? content.get<std::string>() : std::string{};
  auto fr = choice.value("finish_reason", std::string("stop"));
  bool stopped_on_sequence = choice.contains("stop_reason") && choice["stop_reason"].is_string();
  bool cut = apply_stop_sequences(c.text, params.stop_sequences);
  if (fr == "length") {
    c.finish_reason = FinishReason::Length;
  } else if (cut || (stopped_on_sequence && !params.stop_sequences.empty())) {
    c.finish_reason = FinishReason::ToolPause;
  } else {
    c.finish_reason = FinishReason::Stop;
  }
  if (choice.contains("logprobs")) c.confidence = verdict_confidence(choice["logprobs"]);
  if (body.contains("usage") && body["usage"].is_object()) {
    c.prompt_tokens = body["usage"].value("prompt_tokens", std::int64_t{0});
    c.completion_tokens = body["usage"].value("completion_tokens", std::int64_t{0});
  }
  return c;
}

Completion RemoteBackend::do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);

  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key) throw BackendError(BackendError::Code::Config, "environment variable " + config_.api_key_env + " is not set");
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const auto payload = build_request(messages, params).dump();

  for (int attempt = 0;; ++attempt) {
    auto res = client.Post(path_, headers, payload, "application/json");
    std::optional<BackendError> failure;
    if (!res) {
      BackendError err(BackendError::Code::Transport, "transport error: " + httplib::to_string(res.error()));
      failure = err;
    } else if (res->status == 429) {
      BackendError err(BackendError::Code::RateLimited, "rate limited");
      err.status = 429;
      if (res->has_header("Retry-After")) {
        try {
          err.retry_after_s = std::stod(res->get_header_value("Retry-After"));
        } catch (const std::exception&) {
        }
      }
      failure = err;
    } else if (res->status < 200 || res->status >= 300) {
      BackendError err(BackendError::Code::Transport, "HTTP " + std::to_string(res->status));
      err.status = res->status;
      err.body_excerpt = res->body.substr(0, 256);
      failure = err;
      // client errors other than rate limiting are not retried
      if (res->status >= 400 && res->status < 500) throw *failure;
    } else {
      try {
        return parse_response(Json::parse(res->body), params);
      } catch (const std::exception& e) {
        BackendError err(BackendError::Code::Transport, std::string("malformed response: ") + e.what());
        err.status = res->status;
        err.body_excerpt = res->body.substr(0, 256);
        throw err;
      }
    }
    if (attempt >= config_.max_retries) throw *failure;
    auto wait = config_.backoff_base * (1 << attempt);
    if (failure->code() == BackendError::Code::RateLimited && failure->retry_after_s > 0) {
      wait = std::max(wait, std::chrono::milliseconds(static_cast<long>(std::min(failure->retry_after_s, 60.0) * 1000)));
    }
    std::this_thread::sleep_for(wait);
  }
}

// Cache --------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw BackendError(BackendError::Code::Io, "cannot create cache dir " + dir_.string() + ": " + ec.message());
}

std::filesystem::path ResponseCache::path_for(const std::string& digest) const {
  return dir_ / digest.substr(0, 2) / (digest + ".json");
}

std::optional<Completion> ResponseCache::get(const std::string& digest) const {
  auto path = path_for(digest);
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  try {
    return completion_from_json(Json::parse(read_file(path)));
  } catch (const Json::exception& e) {
    throw BackendError(BackendError::Code::Io, path.string() + ": " + e.what());
  }
}

void ResponseCache::put(const std::string& digest, const Completion& completion) const {
  auto path = path_for(digest);
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw BackendError(BackendError::Code::Io, path.parent_path().string() + ": " + ec.message());

  static std::atomic<std::uint64_t> counter{0};
  std::ostringstream tmp_name;
  tmp_name << digest << ".tmp." << ::getpid() << '.' << std::hash<std::thread::id>{}(std::this_thread::get_id())
           << '.' << counter.fetch_add(1);
  auto tmp = path.parent_path() / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw BackendError(BackendError::Code::Io, "cannot write " + tmp.string());
    out << completion_to_json(completion).dump();
    out.flush();
    if (!out) throw BackendError(BackendError::Code::Io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw BackendError(BackendError::Code::Io, "cannot rename into " + path.string() + ": " + ec.message());
  }
}

CachedBackend::CachedBackend(std::shared_ptr<Backend> inner, std::shared_ptr<ResponseCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

Completion CachedBackend::do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  auto digest = request_digest(inner_->model_name(), messages, params);
  if (auto hit = cache_->get(digest)) {
    hits_.fetch_add(1);
    return *hit;
  }
  auto c = inner_->complete(messages, params);
  cache_->put(digest, c);
  return c;
}

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}

std::vector<FixtureEntry> RecordingBackend::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

Completion RecordingBackend::do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  auto c = inner_->complete(messages, params);
  std::string prefill;
  without_prefill(messages, prefill);
  FixtureEntry e;
  e.digest = fixture_key(messages, params);
  e.seed = params.seed.value_or(0);
  e.text = prefill.empty() ? c.text : prefill + c.text;
  e.confidence = c.confidence;

  std::lock_guard lock(mu_);
  for (auto& existing : entries_) {
    if (existing.digest != e.digest || existing.seed != e.seed) continue;
    if (match_prefix(e.text, existing.text) != std::string_view::npos) {
      existing = e;  // the new text extends the recorded one
      return c;
    }
    if (match_prefix(existing.text, e.text) != std::string_view::npos) return c;
  }
  entries_.push_back(std::move(e));
  return c;
}

// Step-wise generation -------------------------------------------------------

std::string step_prefill(std::span<const std::string> steps) {
  std::string out = "<think>\n";
  for (const auto& s : steps) {
    out += s;
    out += '\n';
  }
  return out;
}

ContinuationUnit continue_trajectory(Backend& backend, std::span<const ChatMessage> task_prompt,
                                     std::span<const std::string> partial_steps, SamplingParams params) {
  std::vector<ChatMessage> messages(task_prompt.begin(), task_prompt.end());
  messages.push_back(ChatMessage{Role::Assistant, step_prefill(partial_steps)});
  params.stop_sequences = {"\nStep ", "Final Answer"};

  ContinuationUnit unit;
  auto c = backend.complete(messages, params);
  ++unit.backend_calls;
  unit.confidence = c.confidence;
  std::string text = c.text;
  constexpr std::string_view kClose = "</think>";

  auto close = text.find(kClose);
  std::string step_part = close == std::string::npos ? text : text.substr(0, close);
  if (auto open = step_part.find("<think>"); open != std::string::npos) step_part.erase(open, 7);
  if (!is_blank(step_part)) {
    unit.text = std::string(trim(step_part));
    return unit;
  }

  // The reasoning envelope is closed: fetch the answer span without step stops.
  params.stop_sequences.clear();
  auto answer = backend.complete(messages, params);
  ++unit.backend_calls;
  std::string rest = answer.text;
  if (auto p = rest.find(kClose); p != std::string::npos) rest = rest.substr(p + kClose.size());
  unit.is_answer = true;
  unit.text = std::string(trim(rest));
  unit.confidence = answer.confidence;
  return unit;
}

std::string finish_trajectory(Backend& backend, std::span<const ChatMessage> task_prompt,
                              std::span<const std::string> partial_steps, SamplingParams params) {
  std::vector<ChatMessage> messages(task_prompt.begin(), task_prompt.end());
  auto prefill = step_prefill(partial_steps);
  messages.push_back(ChatMessage{Role::Assistant, prefill});
  params.stop_sequences.clear();
  auto c = backend.complete(messages, params);
  return prefill + c.text;
}

}  // namespace tabprm
