#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "support.hpp"
#include "tabprm/backend.hpp"

using namespace tabprm;
using tabprm::testing::TempDir;

namespace {

std::vector<ChatMessage> prompt(const std::string& user) { return {{Role::System, "sys"}, {Role::User, user}}; }

FixtureEntry keyed(const std::vector<ChatMessage>& messages, const SamplingParams& params, std::string text,
                   std::optional<std::int64_t> seed = std::nullopt) {
  FixtureEntry e;
  e.digest = fixture_key(messages, params);
  e.seed = seed;
  e.text = std::move(text);
  return e;
}

BackendError::Code backend_error(auto&& fn) {
  try {
    fn();
  } catch (const BackendError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no BackendError thrown";
  return BackendError::Code::Io;
}

/// Chat-completion server on an ephemeral port, stopped on destruction.
class FakeServer {
 public:
  explicit FakeServer(httplib::Server::Handler handler) {
    server_.Post("/v1/chat/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string reply(const std::string& content, const std::string& finish = "stop") {
  Json body{{"choices", Json::array({Json{{"message", Json{{"role", "assistant"}, {"content", content}}},
                                          {"finish_reason", finish}}})},
            {"usage", Json{{"prompt_tokens", 12}, {"completion_tokens", 3}}}};
  return body.dump();
}

RemoteConfig remote_config(const std::string& endpoint) {
  RemoteConfig cfg;
  cfg.endpoint = endpoint;
  cfg.model = "test-model";
  cfg.max_retries = 3;
  cfg.backoff_base = std::chrono::milliseconds(1);
  cfg.timeout = std::chrono::seconds(5);
  return cfg;
}

}  // namespace

TEST(Stops, TruncateAtEarliestSequence) {
  std::string text = "Step 1: run <tool>table | count</tool> and more";
  std::vector<std::string> stops{"and", "</tool>"};
  EXPECT_TRUE(apply_stop_sequences(text, stops));
  EXPECT_EQ(text, "Step 1: run <tool>table | count");
  std::string untouched = "nothing";
  EXPECT_FALSE(apply_stop_sequences(untouched, stops));
}

TEST(Digests, KeyIgnoresSeedStopsAndPrefill) {
  auto msgs = prompt("q");
  SamplingParams a, b;
  b.seed = 4;
  b.stop_sequences = {"x"};
  auto with_prefill = msgs;
  with_prefill.push_back({Role::Assistant, "<think>\n"});
  EXPECT_EQ(fixture_key(msgs, a), fixture_key(msgs, b));
  EXPECT_EQ(fixture_key(msgs, a), fixture_key(with_prefill, a));
  EXPECT_NE(request_digest("m", msgs, a), request_digest("m", msgs, b));
  b = a;
  b.temperature = 0.0;
  EXPECT_NE(fixture_key(msgs, a), fixture_key(msgs, b));
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Scripted, ReturnsFixtureText) {
  auto msgs = prompt("what?");
  SamplingParams params;
  ScriptedBackend backend({keyed(msgs, params, "Step 1: look at the table.")});
  auto c = backend.complete(msgs, params);
  EXPECT_EQ(c.text, "Step 1: look at the table.");
  EXPECT_EQ(c.finish_reason, FinishReason::Stop);
  EXPECT_EQ(backend.calls(), 1u);
}

TEST(Scripted, StopSequenceGivesToolPause) {
  auto msgs = prompt("verify");
  SamplingParams params;
  ScriptedBackend backend({keyed(msgs, params, "Check <tool>table | count</tool> then \\boxed{1}")});
  params.stop_sequences = {"</tool>"};
  auto c = backend.complete(msgs, params);
  EXPECT_EQ(c.text, "Check <tool>table | count");
  EXPECT_EQ(c.finish_reason, FinishReason::ToolPause);
  EXPECT_EQ(c.text.find("</tool>"), std::string::npos);
}

TEST(Scripted, UnknownDigestIsFixtureMiss) {
  ScriptedBackend backend({keyed(prompt("a"), {}, "x")});
  try {
    backend.complete(prompt("b"), {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.code(), BackendError::Code::FixtureMiss);
    EXPECT_EQ(e.digest, fixture_key(prompt("b"), {}));
  }
}

TEST(Scripted, SeedSelectsAmongMatches) {
  auto msgs = prompt("q");
  SamplingParams params;
  ScriptedBackend backend({keyed(msgs, params, "zero"), keyed(msgs, params, "one"),
                           keyed(msgs, params, "pinned", std::int64_t{7})});
  params.seed = 7;
  EXPECT_EQ(backend.complete(msgs, params).text, "pinned");
  params.seed = 4;
  EXPECT_EQ(backend.complete(msgs, params).text, "one");
  params.seed = 5;
  EXPECT_EQ(backend.complete(msgs, params).text, "pinned");
}

TEST(Scripted, PrefillMatchingIsWhitespaceTolerant) {
  auto msgs = prompt("q");
  SamplingParams params;
  ScriptedBackend backend({keyed(msgs, params, "<think>\nStep 1: a\nStep 2: b")});
  auto with_prefill = msgs;
  with_prefill.push_back({Role::Assistant, "<think>  Step 1:   a\n"});
  EXPECT_EQ(backend.complete(with_prefill, params).text, "Step 2: b");
}

TEST(Scripted, SequenceEntriesServedInOrder) {
  FixtureEntry second{std::nullopt, 1, std::nullopt, "second", std::nullopt};
  FixtureEntry first{std::nullopt, 0, std::nullopt, "first", 0.8};
  ScriptedBackend backend({second, first});
  auto c = backend.complete(prompt("anything"), {});
  EXPECT_EQ(c.text, "first");
  EXPECT_EQ(c.confidence, 0.8);
  EXPECT_EQ(backend.complete(prompt("else"), {}).text, "second");
  EXPECT_EQ(backend_error([&] { backend.complete(prompt("more"), {}); }), BackendError::Code::FixtureMiss);
}

TEST(Fixtures, FileRoundTripAndSchemaErrors) {
  TempDir dir("fixture");
  std::vector<FixtureEntry> entries{keyed(prompt("q"), {}, "text", std::int64_t{2}),
                                    FixtureEntry{std::nullopt, 3, std::nullopt, "s", 0.25}};
  write_fixture(dir / "f.jsonl", entries);
  auto back = load_fixture(dir / "f.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].digest, entries[0].digest);
  EXPECT_EQ(back[0].seed, 2);
  EXPECT_EQ(back[1].seq, 3);
  EXPECT_EQ(back[1].confidence, 0.25);
  tabprm::testing::write_file(dir / "bad.jsonl", "{\"text\": \"no key\"}\n");
  EXPECT_EQ(backend_error([&] { load_fixture(dir / "bad.jsonl"); }), BackendError::Code::Config);
  EXPECT_EQ(backend_error([&] { load_fixture(dir / "missing.jsonl"); }), BackendError::Code::Io);
}

TEST(Continuation, ThreeStepsThenAnswer) {
  auto msgs = prompt("solve");
  SamplingParams params;
  ScriptedBackend backend(
      {keyed(msgs, params, "<think>\nStep 1: a\nStep 2: b\nStep 3: c\n</think>\nFinal Answer is \\boxed{3}")});
  std::vector<std::string> steps;
  for (int call = 0; call < 3; ++call) {
    auto unit = continue_trajectory(backend, msgs, steps, params);
    ASSERT_FALSE(unit.is_answer);
    steps.push_back(unit.text);
  }
  EXPECT_EQ(steps, (std::vector<std::string>{"Step 1: a", "Step 2: b", "Step 3: c"}));
  auto last = continue_trajectory(backend, msgs, steps, params);
  EXPECT_TRUE(last.is_answer);
  EXPECT_EQ(last.text, "Final Answer is \\boxed{3}");
  EXPECT_EQ(finish_trajectory(backend, msgs, std::vector<std::string>{"Step 1: a"}, params),
            "<think>\nStep 1: a\nStep 2: b\nStep 3: c\n</think>\nFinal Answer is \\boxed{3}");
}

TEST(Cache, RoundTripAndColdMiss) {
  TempDir dir("cache");
  ResponseCache cache(dir.path());
  Completion c{"hello", FinishReason::ToolPause, 0.7, 10, 2};
  auto digest = sha256_hex("k");
  EXPECT_FALSE(cache.get(digest));
  cache.put(digest, c);
  EXPECT_EQ(cache.get(digest), c);
  EXPECT_EQ(cache.path_for(digest), dir.path() / digest.substr(0, 2) / (digest + ".json"));
}

TEST(Cache, ConcurrentPutsLeaveOneValidFile) {
  TempDir dir("cache");
  ResponseCache cache(dir.path());
  auto digest = sha256_hex("same");
  std::vector<std::thread> threads;
  for (int t = 0; t < 16; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 50; ++i) cache.put(digest, Completion{"text-" + std::to_string(t), FinishReason::Stop, {}, 0, 0});
    });
  }
  for (auto& th : threads) th.join();
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir.path()))
    if (entry.is_regular_file()) ++files;
  EXPECT_EQ(files, 1u);
  auto got = cache.get(digest);
  ASSERT_TRUE(got);
  EXPECT_EQ(got->text.rfind("text-", 0), 0u);
}

TEST(Cache, TransparentAndCountsHits) {
  TempDir dir("cache");
  auto msgs = prompt("q");
  SamplingParams params;
  auto inner = std::make_shared<ScriptedBackend>(std::vector<FixtureEntry>{keyed(msgs, params, "answer")});
  CachedBackend cached(inner, std::make_shared<ResponseCache>(dir.path()));
  auto first = cached.complete(msgs, params);
  auto second = cached.complete(msgs, params);
  EXPECT_EQ(first, second);
  EXPECT_EQ(first, inner->complete(msgs, params));
  EXPECT_EQ(cached.hits(), 1u);
}

TEST(Recording, ExtensionsMergeIntoOneEntry) {
  auto msgs = prompt("q");
  SamplingParams params;
  params.seed = 3;
  auto inner = std::make_shared<ScriptedBackend>(
      std::vector<FixtureEntry>{keyed(msgs, params, "<think>\nStep 1: a\nStep 2: b\n</think>\n\\boxed{1}")});
  auto recorder = std::make_shared<RecordingBackend>(inner);
  std::vector<std::string> steps;
  while (true) {
    auto unit = continue_trajectory(*recorder, msgs, steps, params);
    if (unit.is_answer) break;
    steps.push_back(unit.text);
  }
  auto entries = recorder->entries();
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].seed, 3);
  ScriptedBackend replay(entries);
  steps.clear();
  auto unit = continue_trajectory(replay, msgs, steps, params);
  EXPECT_EQ(unit.text, "Step 1: a");
}

TEST(Remote, WireFormatAndCredentialFromEnvironment) {
  Json seen;
  std::string auth;
  FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen = Json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(reply("The step is \\boxed{1(correct)} trailing"), "application/json");
  });
  ::setenv("TABPRM_TEST_KEY", "secret-123", 1);
  auto cfg = remote_config(server.endpoint());
  cfg.api_key_env = "TABPRM_TEST_KEY";
  RemoteBackend backend(cfg);
  SamplingParams params;
  params.stop_sequences = {" trailing"};
  auto c = backend.complete(prompt("hi"), params);
  EXPECT_EQ(c.text, "The step is \\boxed{1(correct)}");
  EXPECT_EQ(c.finish_reason, FinishReason::ToolPause);
  EXPECT_EQ(c.prompt_tokens, 12);
  EXPECT_EQ(auth, "Bearer secret-123");
  EXPECT_EQ(seen["model"], "test-model");
  EXPECT_EQ(seen["messages"][1]["role"], "user");
  EXPECT_EQ(seen["messages"][1]["content"], "hi");
  EXPECT_EQ(seen["temperature"], 0.7);
  EXPECT_EQ(seen["top_p"], 0.95);
  EXPECT_EQ(seen["max_tokens"], 16384);
  EXPECT_EQ(seen["stop"], Json::array({" trailing"}));
  ::unsetenv("TABPRM_TEST_KEY");
}

TEST(Remote, MissingCredentialVariableIsConfigError) {
  ::unsetenv("TABPRM_TEST_ABSENT");
  auto cfg = remote_config("http://127.0.0.1:9/v1/chat/completions");
  cfg.api_key_env = "TABPRM_TEST_ABSENT";
  RemoteBackend backend(cfg);
  EXPECT_EQ(backend_error([&] { backend.complete(prompt("x"), {}); }), BackendError::Code::Config);
}

TEST(Remote, RetriesServerErrorsThenSucceeds) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    if (hits.fetch_add(1) < 2) {
      res.status = 503;
      res.set_content("busy", "text/plain");
      return;
    }
    res.set_content(reply("ok"), "application/json");
  });
  RemoteBackend backend(remote_config(server.endpoint()));
  EXPECT_EQ(backend.complete(prompt("x"), {}).text, "ok");
  EXPECT_EQ(hits.load(), 3);
}

TEST(Remote, RateLimitExhaustsRetries) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 429;
    res.set_header("Retry-After", "0.001");
  });
  auto cfg = remote_config(server.endpoint());
  cfg.max_retries = 2;
  RemoteBackend backend(cfg);
  try {
    backend.complete(prompt("x"), {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.code(), BackendError::Code::RateLimited);
    EXPECT_DOUBLE_EQ(e.retry_after_s, 0.001);
  }
  EXPECT_EQ(hits.load(), 3);
}

TEST(Remote, ClientErrorsAreNotRetried) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 400;
    res.set_content("bad request body", "text/plain");
  });
  RemoteBackend backend(remote_config(server.endpoint()));
  try {
    backend.complete(prompt("x"), {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.code(), BackendError::Code::Transport);
    EXPECT_EQ(e.status, 400);
    EXPECT_EQ(e.body_excerpt, "bad request body");
  }
  EXPECT_EQ(hits.load(), 1);
}

TEST(Remote, UnreachableEndpointIsTransport) {
  auto cfg = remote_config("http://127.0.0.1:9/v1/chat/completions");
  cfg.max_retries = 0;
  cfg.timeout = std::chrono::seconds(1);
  RemoteBackend backend(cfg);
  EXPECT_EQ(backend_error([&] { backend.complete(prompt("x"), {}); }), BackendError::Code::Transport);
}

TEST(Remote, LengthFinishAndMissingSchemeRejected) {
  auto c = RemoteBackend::parse_response(Json::parse(reply("partial", "length")), {});
  EXPECT_EQ(c.finish_reason, FinishReason::Length);
  EXPECT_EQ(backend_error([] { RemoteBackend(remote_config("127.0.0.1:80")); }), BackendError::Code::Config);
}
