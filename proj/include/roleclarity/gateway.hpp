#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "roleclarity/trajectory.hpp"

namespace roleclarity {

struct EndpointConfig {
    std::string base_url;           // e.g. http://localhost:8080/v1
    std::string model;              // model name on the wire
    std::string api_key_env = "OPENAI_API_KEY";  // env var name; value never stored
    double temperature = 0.0;       // sampling temperature, forwarded verbatim
    std::size_t max_rounds = 10;    // K
    double timeout_seconds = 30.0;
    std::size_t max_retries = 2;    // additional attempts after the first
    std::size_t max_tokens = 512;

    void validate() const;
};

struct ChatMessage {
    std::string role;  // wire role: system | user | assistant
    std::string content;
};

struct RequestContext {
    std::string task_id;
    std::string task_prompt;
    std::string role_id;  // speaking agent (mock backend routing)
    int round = 1;
    double temperature = 0.0;
    std::size_t max_tokens = 512;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string complete(const std::vector<ChatMessage>& messages,
                                 const RequestContext& ctx) = 0;
    virtual std::string describe() const = 0;
};

/// Canned two-role dialogue: per-role turn lists cycled by round, an
/// optional terminating turn, and a deterministic per-task defect rule
/// for exercising rejection sampling. `{task}` and `{round}` in turn
/// text are substituted.
struct DialogueScript {
    std::map<std::string, std::vector<std::string>> turns;
    std::map<std::string, std::string> final_turn;  // emitted at terminate_round
    int terminate_round = 0;                        // 0 disables scripted termination
    std::size_t defect_every = 0;  // every Nth task (by task_id hash) never terminates

    static DialogueScript from_file(const std::string& path);
    void validate() const;
    bool defective(const std::string& task_id) const;
    std::string reply(const std::string& role_id, int round, const std::string& task_id,
                      const std::string& task_prompt) const;
};

class MockChatBackend : public ChatBackend {
public:
    explicit MockChatBackend(DialogueScript script);
    std::string complete(const std::vector<ChatMessage>& messages,
                         const RequestContext& ctx) override;
    std::string describe() const override { return "mock"; }

private:
    DialogueScript script_;
};

/// cpp-httplib client speaking the chat-completions wire format. Reads
/// the bearer key from the configured environment variable at request
/// time; retries transport and parse failures up to the budget.
class HttpChatBackend : public ChatBackend {
public:
    explicit HttpChatBackend(EndpointConfig config);
    std::string complete(const std::vector<ChatMessage>& messages,
                         const RequestContext& ctx) override;
    std::string describe() const override { return "http:" + config_.base_url; }

private:
    EndpointConfig config_;
    std::string client_base_;
    std::string path_prefix_;
};

struct TaskSpec {
    std::string task_id;
    std::string prompt;
    std::string subset;  // optional tag, propagated into message extras
};

std::vector<TaskSpec> load_tasks(const std::string& path);

/// One two-role dialogue: the first role opens each round, the second
/// responds; the dialogue ends early when the responder emits the strict
/// termination token, otherwise after max_rounds.
Trajectory run_dialogue(const TaskSpec& task, const std::vector<RoleDescription>& roles,
                        ChatBackend& backend, const EndpointConfig& config);

struct CollectReport {
    std::size_t attempted = 0;
    std::vector<Trajectory> collected;             // everything that completed
    std::vector<Trajectory> accepted;
    std::vector<RejectedTrajectory> rejected;
    std::vector<std::string> failed_tasks;         // transport failures, not in the file
    std::vector<std::string> skipped_tasks;        // already present when resuming
    double acceptance_rate = 0.0;
};

/// Runs every task through run_dialogue, appends completed dialogues to
/// out_path (JSONL), then partitions the file's contents with the
/// rejection rule. Tasks already present in out_path are skipped, so a
/// rerun resumes instead of duplicating work.
CollectReport collect_dataset(const std::vector<TaskSpec>& tasks,
                              const std::vector<RoleDescription>& roles, ChatBackend& backend,
                              const FilterRule& rule, const EndpointConfig& config,
                              const std::string& out_path);

}  // namespace roleclarity
