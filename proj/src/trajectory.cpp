#include "roleclarity/trajectory.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace roleclarity {

using nlohmann::json;

// ------------------------------------------------------------ RoleRegistry

RoleRegistry::RoleRegistry(std::vector<RoleDescription> roles) {
    for (auto& r : roles) add(std::move(r));
}

RoleRegistry RoleRegistry::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("role registry: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("role registry: malformed JSON in " + path + ": " + e.what());
    }
    return from_json(j);
}

RoleRegistry RoleRegistry::from_json(const json& j) {
    RoleRegistry registry;
    if (!j.contains("roles") || !j["roles"].is_array()) {
        throw ValidationError("role registry: expected {\"roles\": [...]}");
    }
    for (const auto& item : j["roles"]) {
        RoleDescription role;
        role.role_id = item.at("role_id").get<std::string>();
        role.description = item.at("description").get<std::string>();
        registry.add(std::move(role));
    }
    return registry;
}

json RoleRegistry::to_json() const {
    json arr = json::array();
    for (const auto& r : roles_) {
        arr.push_back({{"role_id", r.role_id}, {"description", r.description}});
    }
    return json{{"roles", arr}};
}

void RoleRegistry::add(RoleDescription role) {
    if (role.role_id.empty()) throw ValidationError("role registry: empty role_id");
    if (role.description.empty()) {
        throw ValidationError("role registry: empty description for " + role.role_id);
    }
    if (contains(role.role_id)) {
        throw ValidationError("role registry: duplicate role_id " + role.role_id);
    }
    roles_.push_back(std::move(role));
}

bool RoleRegistry::contains(const std::string& role_id) const {
    for (const auto& r : roles_) {
        if (r.role_id == role_id) return true;
    }
    return false;
}

const RoleDescription& RoleRegistry::at(const std::string& role_id) const {
    for (const auto& r : roles_) {
        if (r.role_id == role_id) return r;
    }
    throw ValidationError("role registry: unknown role_id " + role_id);
}

std::size_t RoleRegistry::index_of(const std::string& role_id) const {
    for (std::size_t i = 0; i < roles_.size(); ++i) {
        if (roles_[i].role_id == role_id) return i;
    }
    throw ValidationError("role registry: unknown role_id " + role_id);
}

// ---------------------------------------------------------------- Message

bool Message::operator==(const Message& other) const {
    return run_id == other.run_id && task_id == other.task_id && round == other.round &&
           agent_id == other.agent_id && role_id == other.role_id && content == other.content &&
           terminated == other.terminated && extra == other.extra;
}

json message_to_json(const Message& m) {
    json j = m.extra.is_object() ? m.extra : json::object();
    j["run_id"] = m.run_id;
    j["task_id"] = m.task_id;
    j["round"] = m.round;
    j["agent_id"] = m.agent_id;
    j["role_id"] = m.role_id;
    j["content"] = m.content;
    j["terminated"] = m.terminated;
    return j;
}

Message message_from_json(const json& j) {
    static const std::set<std::string> known = {"run_id", "task_id",  "round",     "agent_id",
                                                "role_id", "content", "terminated"};
    Message m;
    m.run_id = j.at("run_id").get<std::string>();
    m.task_id = j.at("task_id").get<std::string>();
    m.round = j.at("round").get<int>();
    m.agent_id = j.at("agent_id").get<std::string>();
    m.role_id = j.at("role_id").get<std::string>();
    m.content = j.at("content").get<std::string>();
    m.terminated = j.at("terminated").get<bool>();
    m.extra = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (known.count(it.key()) == 0) m.extra[it.key()] = it.value();
    }
    return m;
}

// -------------------------------------------------------------- Trajectory

std::vector<std::string> Trajectory::participating_roles() const {
    std::vector<std::string> out;
    for (const auto& m : messages) {
        if (std::find(out.begin(), out.end(), m.role_id) == out.end()) {
            out.push_back(m.role_id);
        }
    }
    return out;
}

std::vector<const Message*> Trajectory::messages_of_role(const std::string& role_id) const {
    std::vector<const Message*> out;
    for (const auto& m : messages) {
        if (m.role_id == role_id) out.push_back(&m);
    }
    return out;
}

const Message* Trajectory::final_round_message(const std::string& role_id) const {
    const Message* found = nullptr;
    for (const auto& m : messages) {
        if (m.round == rounds && m.role_id == role_id) found = &m;
    }
    return found;
}

// ---------------------------------------------------------------- loading

void FilterRule::validate() const {
    if (token_strict.empty() || token_relaxed.empty()) {
        throw ValidationError("filter rule: empty token");
    }
    if (token_strict.find(token_relaxed) == std::string::npos) {
        throw ValidationError(
            "filter rule: strict token must contain the relaxed token as a substring");
    }
}

LoadResult load_trajectories(const std::string& path, const RoleRegistry* registry) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("load_trajectories: cannot open " + path);

    LoadResult result;
    // keyed by run_id in order of first appearance
    std::vector<std::string> run_order;
    std::map<std::string, std::vector<Message>> runs;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            result.issues.push_back({line_no, std::string("unparseable JSON: ") + e.what()});
            continue;
        }
        Message m;
        try {
            m = message_from_json(j);
        } catch (const json::exception& e) {
            result.issues.push_back({line_no, std::string("schema violation: ") + e.what()});
            continue;
        }
        if (m.round < 1) {
            result.issues.push_back({line_no, "schema violation: round must be >= 1"});
            continue;
        }
        if (registry != nullptr && !registry->contains(m.role_id)) {
            result.issues.push_back({line_no, "schema violation: unknown role_id " + m.role_id});
            continue;
        }
        bool has_strict = m.content.find("<INFO>") != std::string::npos;
        if (m.terminated != has_strict) {
            result.issues.push_back(
                {line_no, "schema violation: terminated flag inconsistent with content"});
            continue;
        }
        if (runs.find(m.run_id) == runs.end()) run_order.push_back(m.run_id);
        runs[m.run_id].push_back(std::move(m));
    }

    for (const auto& run_id : run_order) {
        auto& msgs = runs[run_id];
        int max_round = 0;
        std::set<int> seen;
        for (const auto& m : msgs) {
            max_round = std::max(max_round, m.round);
            seen.insert(m.round);
        }
        bool contiguous = true;
        for (int k = 1; k <= max_round; ++k) {
            if (seen.count(k) == 0) contiguous = false;
        }
        if (!contiguous) {
            result.issues.push_back({0, "run " + run_id + ": rounds not contiguous from 1"});
            continue;
        }
        Trajectory t;
        t.run_id = run_id;
        t.messages = std::move(msgs);
        t.rounds = max_round;
        result.trajectories.push_back(std::move(t));
    }
    return result;
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("save_trajectories: cannot open " + path);
    for (const auto& t : trajectories) {
        for (const auto& m : t.messages) {
            out << message_to_json(m).dump() << "\n";
        }
    }
    if (!out) throw ValidationError("save_trajectories: write failed for " + path);
}

// --------------------------------------------------------------- filtering

FilterResult rejection_filter(const std::vector<Trajectory>& trajectories,
                              const FilterRule& rule, const OverstepHook& overstep) {
    rule.validate();
    FilterResult result;
    for (const auto& t : trajectories) {
        std::vector<std::string> reasons;
        for (const auto& role : rule.required_agents) {
            const Message* final_msg = t.final_round_message(role);
            if (final_msg == nullptr ||
                final_msg->content.find(rule.active_token()) == std::string::npos) {
                reasons.push_back("missing-token");
                break;
            }
        }
        if (reasons.empty() && overstep && overstep(t)) {
            reasons.push_back("overstep");
        }
        if (reasons.empty()) {
            result.accepted.push_back(t);
        } else {
            result.rejected.push_back({t.run_id, std::move(reasons)});
        }
    }
    return result;
}

SplitResult split_dataset(std::vector<Trajectory> accepted, std::size_t validation_size,
                          std::uint64_t seed) {
    if (validation_size > 0 && validation_size >= accepted.size()) {
        throw ValidationError("split_dataset: dataset too small for requested validation size");
    }
    std::vector<std::size_t> order(accepted.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SplitMix64 rng(seed);
    seeded_shuffle(order, rng);

    SplitResult result;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        if (pos < validation_size) {
            result.validation.push_back(accepted[order[pos]]);
        } else {
            result.train.push_back(accepted[order[pos]]);
        }
    }
    return result;
}

}  // namespace roleclarity
