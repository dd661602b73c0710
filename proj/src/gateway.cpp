#include "roleclarity/gateway.hpp"

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <httplib.h>
#include <json.hpp>

namespace roleclarity {

using nlohmann::json;

namespace {

constexpr const char* kTerminationToken = "<INFO>";

std::string substitute(std::string text, const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = text.find(key, pos)) != std::string::npos) {
        text.replace(pos, key.size(), value);
        pos += value.size();
    }
    return text;
}

}  // namespace

void EndpointConfig::validate() const {
    if (max_rounds < 1) throw ValidationError("endpoint config: max_rounds must be >= 1");
    if (!(timeout_seconds > 0.0)) {
        throw ValidationError("endpoint config: timeout must be positive");
    }
}

// ---------------------------------------------------------- DialogueScript

DialogueScript DialogueScript::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("dialogue script: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("dialogue script: malformed JSON in " + path + ": " + e.what());
    }
    DialogueScript script;
    for (auto it = j.at("turns").begin(); it != j.at("turns").end(); ++it) {
        script.turns[it.key()] = it.value().get<std::vector<std::string>>();
    }
    if (j.contains("final_turn")) {
        for (auto it = j["final_turn"].begin(); it != j["final_turn"].end(); ++it) {
            script.final_turn[it.key()] = it.value().get<std::string>();
        }
    }
    script.terminate_round = j.value("terminate_round", 0);
    script.defect_every = j.value("defect_every", 0);
    script.validate();
    return script;
}

void DialogueScript::validate() const {
    if (turns.empty()) throw ValidationError("dialogue script: no roles scripted");
    for (const auto& [role, list] : turns) {
        if (list.empty()) {
            throw ValidationError("dialogue script: role " + role + " has no turns");
        }
    }
    if (!final_turn.empty() && terminate_round < 1) {
        throw ValidationError("dialogue script: final_turn requires terminate_round >= 1");
    }
}

bool DialogueScript::defective(const std::string& task_id) const {
    if (defect_every == 0) return false;
    return fnv1a64(task_id) % defect_every == 0;
}

std::string DialogueScript::reply(const std::string& role_id, int round,
                                  const std::string& task_id,
                                  const std::string& task_prompt) const {
    auto it = turns.find(role_id);
    if (it == turns.end()) {
        throw ValidationError("dialogue script: no turns for role " + role_id);
    }
    std::string text;
    auto final_it = final_turn.find(role_id);
    if (terminate_round > 0 && round >= terminate_round && final_it != final_turn.end() &&
        !defective(task_id)) {
        text = final_it->second;
    } else {
        const auto& list = it->second;
        text = list[static_cast<std::size_t>(round - 1) % list.size()];
    }
    std::string task_upper = task_prompt;
    for (auto& c : task_upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    text = substitute(std::move(text), "{task}", task_prompt);
    text = substitute(std::move(text), "{TASK}", task_upper);
    text = substitute(std::move(text), "{round}", std::to_string(round));
    return text;
}

MockChatBackend::MockChatBackend(DialogueScript script) : script_(std::move(script)) {
    script_.validate();
}

std::string MockChatBackend::complete(const std::vector<ChatMessage>& messages,
                                      const RequestContext& ctx) {
    (void)messages;
    return script_.reply(ctx.role_id, ctx.round, ctx.task_id, ctx.task_prompt);
}

// --------------------------------------------------------- HttpChatBackend

HttpChatBackend::HttpChatBackend(EndpointConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.base_url.empty()) throw ValidationError("http backend: base_url required");
    // split scheme://host[:port] from the path prefix
    std::size_t scheme = config_.base_url.find("://");
    if (scheme == std::string::npos) {
        throw ValidationError("http backend: base_url must include a scheme");
    }
    std::size_t path_start = config_.base_url.find('/', scheme + 3);
    if (path_start == std::string::npos) {
        client_base_ = config_.base_url;
        path_prefix_.clear();
    } else {
        client_base_ = config_.base_url.substr(0, path_start);
        path_prefix_ = config_.base_url.substr(path_start);
        while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    }
}

std::string HttpChatBackend::complete(const std::vector<ChatMessage>& messages,
                                      const RequestContext& ctx) {
    json body;
    body["model"] = config_.model;
    body["temperature"] = ctx.temperature;
    body["max_tokens"] = ctx.max_tokens;
    json msg_list = json::array();
    for (const auto& m : messages) {
        msg_list.push_back({{"role", m.role}, {"content", m.content}});
    }
    body["messages"] = msg_list;
    std::string payload = body.dump();

    httplib::Client client(client_base_);
    client.set_connection_timeout(static_cast<time_t>(config_.timeout_seconds),
                                  static_cast<time_t>(config_.timeout_seconds * 1e6) % 1000000);
    client.set_read_timeout(static_cast<time_t>(config_.timeout_seconds), 0);

    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
        if (const char* key = std::getenv(config_.api_key_env.c_str())) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }

    std::string last_error;
    for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
        auto res = client.Post(path_prefix_ + "/chat/completions", headers, payload,
                               "application/json");
        if (!res) {
            last_error = "connection failure (" + httplib::to_string(res.error()) + ")";
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "http status " + std::to_string(res->status);
            continue;
        }
        try {
            json reply = json::parse(res->body);
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            last_error = std::string("malformed response body: ") + e.what();
        }
    }
    throw TransportError("chat request failed for task " + ctx.task_id + " (role " +
                         ctx.role_id + ", round " + std::to_string(ctx.round) +
                         "): " + last_error);
}

// ------------------------------------------------------------------ tasks

std::vector<TaskSpec> load_tasks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("load_tasks: cannot open " + path);
    std::vector<TaskSpec> tasks;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("load_tasks: line " + std::to_string(line_no) + ": " +
                                  e.what());
        }
        TaskSpec task;
        task.task_id = j.at("task_id").get<std::string>();
        task.prompt = j.at("prompt").get<std::string>();
        task.subset = j.value("subset", "");
        tasks.push_back(std::move(task));
    }
    return tasks;
}

// ----------------------------------------------------------- run_dialogue

Trajectory run_dialogue(const TaskSpec& task, const std::vector<RoleDescription>& roles,
                        ChatBackend& backend, const EndpointConfig& config) {
    config.validate();
    if (roles.size() != 2) {
        throw ValidationError("run_dialogue: exactly two roles are dialogued");
    }

    Trajectory trajectory;
    trajectory.run_id = "run-" + task.task_id;

    // Transcript from each speaker's viewpoint: own turns are assistant
    // turns, the counterpart's are user turns, task prompt first.
    std::vector<Message> history;
    auto view_of = [&](const std::string& speaker_role,
                       const std::string& description) {
        std::vector<ChatMessage> wire;
        wire.push_back({"system", description});
        wire.push_back({"user", task.prompt});
        for (const auto& m : history) {
            wire.push_back({m.role_id == speaker_role ? "assistant" : "user", m.content});
        }
        return wire;
    };

    bool terminated = false;
    for (std::size_t round = 1; round <= config.max_rounds && !terminated; ++round) {
        for (std::size_t who = 0; who < 2; ++who) {
            const RoleDescription& speaker = roles[who];
            RequestContext ctx;
            ctx.task_id = task.task_id;
            ctx.task_prompt = task.prompt;
            ctx.role_id = speaker.role_id;
            ctx.round = static_cast<int>(round);
            ctx.temperature = config.temperature;
            ctx.max_tokens = config.max_tokens;

            Message m;
            m.run_id = trajectory.run_id;
            m.task_id = task.task_id;
            m.round = static_cast<int>(round);
            m.agent_id = speaker.role_id;
            m.role_id = speaker.role_id;
            m.content = backend.complete(view_of(speaker.role_id, speaker.description), ctx);
            m.terminated = m.content.find(kTerminationToken) != std::string::npos;
            if (!task.subset.empty()) m.extra["subset"] = task.subset;
            history.push_back(m);

            // the responding role's token ends the dialogue
            if (who == 1 && m.terminated) terminated = true;
        }
        trajectory.rounds = static_cast<int>(round);
    }
    trajectory.messages = std::move(history);
    return trajectory;
}

// --------------------------------------------------------- collect_dataset

CollectReport collect_dataset(const std::vector<TaskSpec>& tasks,
                              const std::vector<RoleDescription>& roles, ChatBackend& backend,
                              const FilterRule& rule, const EndpointConfig& config,
                              const std::string& out_path) {
    if (tasks.empty()) throw ValidationError("collect_dataset: empty task list");
    rule.validate();

    CollectReport report;
    std::vector<Trajectory> existing;
    std::set<std::string> done_tasks;
    if (std::filesystem::exists(out_path)) {
        LoadResult prior = load_trajectories(out_path);
        existing = std::move(prior.trajectories);
        for (const auto& t : existing) {
            for (const auto& m : t.messages) done_tasks.insert(m.task_id);
        }
    }

    std::vector<Trajectory> all = existing;
    for (const auto& task : tasks) {
        if (done_tasks.count(task.task_id)) {
            report.skipped_tasks.push_back(task.task_id);
            continue;
        }
        ++report.attempted;
        try {
            Trajectory t = run_dialogue(task, roles, backend, config);
            all.push_back(std::move(t));
        } catch (const TransportError&) {
            report.failed_tasks.push_back(task.task_id);
        }
    }

    save_trajectories(out_path, all);

    FilterResult filtered = rejection_filter(all, rule);
    report.collected = std::move(all);
    report.accepted = std::move(filtered.accepted);
    report.rejected = std::move(filtered.rejected);
    std::size_t judged = report.accepted.size() + report.rejected.size();
    report.acceptance_rate =
        judged == 0 ? 0.0
                    : static_cast<double>(report.accepted.size()) / static_cast<double>(judged);
    return report;
}

}  // namespace roleclarity
