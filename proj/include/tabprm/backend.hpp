#pragma once

// Model access: remote chat-completion client, scripted fixture replay,
// content-addressed response cache and step-wise trajectory continuation.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tabprm/table.hpp"

namespace tabprm {

enum class Role { System, User, Assistant };
std::string_view to_string(Role r);

struct ChatMessage {
  Role role = Role::User;
  std::string content;
};

struct SamplingParams {
  double temperature = 0.7;
  double top_p = 0.95;
  std::int64_t max_tokens = 16384;
  std::vector<std::string> stop_sequences;
  std::optional<std::int64_t> seed;
};

void validate(const SamplingParams& params);
Json params_to_json(const SamplingParams& params);
SamplingParams params_from_json(const Json& j);

enum class FinishReason { Stop, Length, ToolPause };
std::string_view to_string(FinishReason f);

struct Completion {
  std::string text;
  FinishReason finish_reason = FinishReason::Stop;
  std::optional<double> confidence;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  friend bool operator==(const Completion&, const Completion&) = default;
};

Json completion_to_json(const Completion& c);
Completion completion_from_json(const Json& j);

class BackendError : public std::runtime_error {
 public:
  enum class Code { Transport, FixtureMiss, RateLimited, Io, Config };
  BackendError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

  int status = 0;                 // Transport
  std::string body_excerpt;       // Transport
  std::string digest;             // FixtureMiss
  double retry_after_s = 0.0;     // RateLimited

 private:
  Code code_;
};

/// Cuts `text` at the earliest occurrence of any stop sequence (excluded).
/// Returns true when a sequence was found.
bool apply_stop_sequences(std::string& text, std::span<const std::string> stops);

std::string sha256_hex(std::string_view bytes);

/// Cache key: model, full message list and every sampling parameter.
std::string request_digest(std::string_view model_name, std::span<const ChatMessage> messages,
                           const SamplingParams& params);

/// Fixture key: the prompt without a trailing assistant prefill, plus
/// temperature / top_p / max_tokens. Seed and stop sequences are excluded so
/// one fixture entry serves every step-wise continuation of the same sample.
std::string fixture_key(std::span<const ChatMessage> messages, const SamplingParams& params);

class Backend {
 public:
  virtual ~Backend() = default;

  Completion complete(std::span<const ChatMessage> messages, const SamplingParams& params);

  virtual std::string model_name() const = 0;
  std::uint64_t calls() const { return calls_.load(); }

 protected:
  virtual Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) = 0;

 private:
  std::atomic<std::uint64_t> calls_{0};
};

struct FixtureEntry {
  std::optional<std::string> digest;
  std::optional<std::int64_t> seq;
  std::optional<std::int64_t> seed;
  std::string text;
  std::optional<double> confidence;
};

Json fixture_entry_to_json(const FixtureEntry& e);
std::vector<FixtureEntry> load_fixture(const std::filesystem::path& path);
void write_fixture(const std::filesystem::path& path, std::span<const FixtureEntry> entries);

/// Replays fixture entries. A request matches entries under its fixture key
/// whose text starts with the trailing assistant prefill (whitespace-tolerant);
/// an entry pinned to the request seed wins, otherwise the match at
/// seed mod count. The remainder after the prefill is returned. Unkeyed "seq"
/// entries are served in order when nothing matches.
class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(std::vector<FixtureEntry> entries, std::string model = "scripted");
  static std::unique_ptr<ScriptedBackend> from_file(const std::filesystem::path& path,
                                                    std::string model = "scripted");

  std::string model_name() const override { return model_; }

 protected:
  Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) override;

 private:
  std::string model_;
  std::map<std::string, std::vector<FixtureEntry>> keyed_;
  std::vector<FixtureEntry> sequence_;
  std::size_t next_seq_ = 0;
  std::mutex mu_;
};

struct RemoteConfig {
  std::string endpoint;          // e.g. http://127.0.0.1:8000/v1/chat/completions
  std::string model;
  std::string api_key_env;       // name of the environment variable holding the key
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{500};
  std::chrono::seconds timeout{120};
  bool request_logprobs = false;
};

class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(RemoteConfig config);
  std::string model_name() const override { return config_.model; }

  /// Request body for a chat-completion call.
  Json build_request(std::span<const ChatMessage> messages, const SamplingParams& params) const;
  /// Parses a chat-completion response body, applying local stop truncation.
  static Completion parse_response(const Json& body, const SamplingParams& params);

 protected:
  Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) override;

 private:
  RemoteConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  std::optional<Completion> get(const std::string& digest) const;
  void put(const std::string& digest, const Completion& completion) const;
  std::filesystem::path path_for(const std::string& digest) const;

 private:
  std::filesystem::path dir_;
};

/// Serves repeated requests from a ResponseCache.
class CachedBackend : public Backend {
 public:
  CachedBackend(std::shared_ptr<Backend> inner, std::shared_ptr<ResponseCache> cache);
  std::string model_name() const override { return inner_->model_name(); }
  std::uint64_t hits() const { return hits_.load(); }

 protected:
  Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) override;

 private:
  std::shared_ptr<Backend> inner_;
  std::shared_ptr<ResponseCache> cache_;
  std::atomic<std::uint64_t> hits_{0};
};

/// Forwards to another backend and records each response as a seed-pinned
/// fixture entry (prefill + completion). A record that extends an earlier one
/// for the same key and seed replaces it.
class RecordingBackend : public Backend {
 public:
  explicit RecordingBackend(std::shared_ptr<Backend> inner);
  std::string model_name() const override { return inner_->model_name(); }
  std::vector<FixtureEntry> entries() const;

 protected:
  Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) override;

 private:
  std::shared_ptr<Backend> inner_;
  mutable std::mutex mu_;
  std::vector<FixtureEntry> entries_;
};

/// One unit of step-wise generation.
struct ContinuationUnit {
  bool is_answer = false;
  std::string text;          // one step (with its marker) or the answer span
  std::size_t backend_calls = 0;
  std::optional<double> confidence;
};

/// Assistant prefill used for step-wise generation: "<think>\n" then each step on its own line.
std::string step_prefill(std::span<const std::string> steps);

/// Generates exactly one more step, or the final answer span once the
/// reasoning envelope closes.
ContinuationUnit continue_trajectory(Backend& backend, std::span<const ChatMessage> task_prompt,
                                     std::span<const std::string> partial_steps, SamplingParams params);

/// Rest of a trajectory in one unconstrained call (used to force-complete beams).
std::string finish_trajectory(Backend& backend, std::span<const ChatMessage> task_prompt,
                              std::span<const std::string> partial_steps, SamplingParams params);

}  // namespace tabprm
