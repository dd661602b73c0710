#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "roleclarity/common.hpp"

namespace roleclarity {

struct RoleDescription {
    std::string role_id;
    std::string description;
};

/// Ordered set of roles with unique ids. Index order is the row/column
/// order of every assignment matrix built from this registry.
class RoleRegistry {
public:
    RoleRegistry() = default;
    explicit RoleRegistry(std::vector<RoleDescription> roles);

    static RoleRegistry from_file(const std::string& path);
    static RoleRegistry from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    void add(RoleDescription role);
    bool contains(const std::string& role_id) const;
    const RoleDescription& at(const std::string& role_id) const;
    std::size_t index_of(const std::string& role_id) const;
    const std::vector<RoleDescription>& roles() const { return roles_; }
    std::size_t size() const { return roles_.size(); }

private:
    std::vector<RoleDescription> roles_;
};

struct Message {
    std::string run_id;
    std::string task_id;
    int round = 1;  // 1-based
    std::string agent_id;
    std::string role_id;
    std::string content;
    bool terminated = false;
    nlohmann::json extra = nlohmann::json::object();  // unknown fields, kept on round-trip

    bool operator==(const Message& other) const;
};

struct Trajectory {
    std::string run_id;
    std::vector<Message> messages;
    int rounds = 0;  // K

    std::vector<std::string> participating_roles() const;  // first-appearance order
    std::vector<const Message*> messages_of_role(const std::string& role_id) const;
    /// The role's message in the final round, if any.
    const Message* final_round_message(const std::string& role_id) const;
};

/// Termination-token rule for rejection sampling. The strict token must
/// contain the relaxed one, so strict acceptance implies relaxed.
struct FilterRule {
    enum class Mode { kStrict, kRelaxed };

    std::string token_strict = "<INFO>";
    std::string token_relaxed = "INFO";
    Mode mode = Mode::kStrict;
    std::vector<std::string> required_agents;  // role ids that must comply

    const std::string& active_token() const {
        return mode == Mode::kStrict ? token_strict : token_relaxed;
    }
    void validate() const;
};

struct LineIssue {
    std::size_t line_no = 0;  // 1-based; 0 for whole-trajectory issues
    std::string message;
};

struct LoadResult {
    std::vector<Trajectory> trajectories;
    std::vector<LineIssue> issues;
};

/// JSONL loader: one Message per line. Malformed lines and trajectories
/// with non-contiguous rounds are reported in issues and skipped; a
/// missing file throws. When a registry is given, unknown role ids are
/// schema violations.
LoadResult load_trajectories(const std::string& path, const RoleRegistry* registry = nullptr);

/// Inverse of load_trajectories: stable field order, unknown fields kept.
void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories);

nlohmann::json message_to_json(const Message& m);
Message message_from_json(const nlohmann::json& j);

struct RejectedTrajectory {
    std::string run_id;
    std::vector<std::string> reasons;  // missing-token | overstep | schema
};

struct FilterResult {
    std::vector<Trajectory> accepted;
    std::vector<RejectedTrajectory> rejected;
};

/// Returns true when the trajectory oversteps; wired to the eval-metrics
/// judge by callers that have one. The plain token filter needs none.
using OverstepHook = std::function<bool(const Trajectory&)>;

/// Rejection sampling on the termination token: accepted iff every
/// required role's final-round message contains the active token, and
/// the overstep hook (when provided) stays quiet. Deterministic and
/// idempotent.
FilterResult rejection_filter(const std::vector<Trajectory>& trajectories,
                              const FilterRule& rule, const OverstepHook& overstep = nullptr);

struct SplitResult {
    std::vector<Trajectory> train;
    std::vector<Trajectory> validation;
};

/// Seeded shuffle split; validation_size must be smaller than the
/// dataset. validation_size == 0 leaves everything in train.
SplitResult split_dataset(std::vector<Trajectory> accepted, std::size_t validation_size,
                          std::uint64_t seed);

}  // namespace roleclarity
