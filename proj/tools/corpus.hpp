#pragma once

// Synthetic tasks, trajectories and rule-based model stand-ins used to author
// the scripted fixtures that tests, the acceptance run and demos replay.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tabprm/backend.hpp"
#include "tabprm/table.hpp"

namespace tabprm::corpus {

inline constexpr const char* kGoldenColumn = "capacity in persons / hour";

/// The 13-row lift table; its capacity column sums to 22460.
Table golden_table();
TaskInstance golden_task();
/// Four-step solution for the golden task ending in 22460.
std::string golden_trajectory_text();

struct CorpusTask {
  TaskInstance task;
  std::string column;                 // the column the question aggregates
  std::vector<std::string> candidates;  // full policy transcripts
  std::vector<bool> correct;
};

struct CorpusOptions {
  std::size_t tasks = 50;
  std::size_t candidates = 8;
  double p_correct = 0.35;
  std::uint64_t seed = 7;
  std::size_t wrong_retrieval_every = 0;  // candidate 0 of every such task cites "bonus"
  std::size_t unfinished_every = 0;       // candidate 0 of every such task stops before answering
};

/// Sum questions over small random tables. Candidates differ in the wording of
/// their retrieval step and in the total they claim.
std::vector<CorpusTask> synthetic_corpus(const CorpusOptions& options);

/// Transcript that retrieves `cited_column`, lists its values and claims `claimed`.
std::string candidate_text(const TaskInstance& task, const std::string& cited_column, long claimed, int wording);

/// Unpinned policy fixture entries keyed for policy_prompt(task) under `params`.
std::vector<FixtureEntry> policy_entries(std::span<const CorpusTask> tasks, const SamplingParams& params);

std::vector<TaskInstance> tasks_of(std::span<const CorpusTask> corpus);

/// Writes the demo corpus, recorded model fixtures and ready-to-run configs
/// into `dir`.
void write_demo_fixtures(const std::filesystem::path& dir);

using Responder = std::function<std::string(std::span<const ChatMessage>, const SamplingParams&)>;

/// Backend whose reply comes from a function of the prompt. The assistant
/// prefill, if any, is visible to the function; stop sequences apply to the
/// returned text.
class ResponderBackend : public Backend {
 public:
  ResponderBackend(Responder fn, std::string model) : fn_(std::move(fn)), model_(std::move(model)) {}
  std::string model_name() const override { return model_; }

 protected:
  Completion do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) override;

 private:
  Responder fn_;
  std::string model_;
};

/// Curation judge over `tasks`: passes every solution that states a boxed
/// answer, rejects steps quoting a column other than the question's, rechecks
/// "a + b + ... = c" arithmetic and proposes the question's column on region
/// requests. On the golden task it reproduces the faulty 16,920 hand sum.
Responder rule_judge(std::vector<TaskInstance> tasks);

/// Generative step verifier: sums the question's column with a tool call and
/// compares the step's claimed total; other steps pass.
std::string rule_prm(std::span<const ChatMessage> messages, const SamplingParams& params);

}  // namespace tabprm::corpus
