#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "roleclarity/clarity.hpp"
#include "roleclarity/model.hpp"
#include "roleclarity/trajectory.hpp"

namespace roleclarity {

struct OverstepJudgeConfig {
    enum class Method { kTokenFormat, kAssignmentArgmax, kBoth };

    Method method = Method::kBoth;
    FilterRule token_rule;

    static std::string method_name(Method m);
};

struct OverstepEvent {
    int round = 0;
    std::string role_id;
    std::string judge;  // token-format | assignment-argmax
    std::string detail;
};

struct OverstepCase {
    std::string run_id;
    std::string subset;
    bool overstep_strict = false;
    bool overstep_relaxed = false;
    std::vector<OverstepEvent> events;
};

/// Per-role-description embeddings under the frozen base path, computed
/// once per registry and reused.
class RoleEmbeddingCache {
public:
    RoleEmbeddingCache(const AgentModel& encoder, const RoleRegistry& registry);
    const std::vector<Tensor>& embeddings() const { return embeddings_; }

private:
    std::vector<Tensor> embeddings_;
};

/// Per-role encoder composition: each agent runs on its own fine-tuned
/// model, so behavior text embeds under the speaker's encoder while
/// role descriptions stay with the shared frozen base. Roles without an
/// entry fall back to the default encoder.
using RoleEncoderMap = std::map<std::string, const AgentModel*>;

/// Judges one trajectory. Token-format events: a role outside the
/// required set using the literal decision token anywhere, or a required
/// role's final-round message missing the mandatory token. The relaxed
/// verdict only relaxes the mandatory-token check; unauthorized use is
/// always matched against the strict literal, which keeps the strict
/// violation set a superset of the relaxed one. Assignment-argmax
/// events: a message whose embedding lands closer to another role's
/// description (argmax over the tempered softmax row).
OverstepCase judge_overstep(const Trajectory& trajectory, const RoleRegistry& registry,
                            const OverstepJudgeConfig& config,
                            const AgentModel* encoder = nullptr,
                            const RoleEmbeddingCache* role_cache = nullptr, double tau = 1.0,
                            const RoleEncoderMap& role_encoders = {});

/// Adapts the token-format judge into a rejection_filter hook.
OverstepHook token_format_hook(const RoleRegistry& registry, const FilterRule& rule);

/// count / cases, exact.
double overstep_rate(std::size_t overstepping, std::size_t cases);
double overstep_rate(const std::vector<bool>& cases);

struct CaseClarity {
    std::string run_id;
    std::string subset;
    std::vector<std::string> roles;  // registry order, roles present in the case
    AssignmentMatrices matrices;
    double score = 0.0;
};

struct CorpusClarity {
    std::size_t n_cases = 0;
    double mean_score = 0.0;
    double mean_frob = 0.0;
    std::size_t degenerate_cases = 0;
    std::vector<CaseClarity> cases;
};

/// Mean clarity over a corpus: per case, behavior embeddings for every
/// role present, assignment matrices through clarity-core, then C.
/// Role embeddings always come from the frozen base path; behavior
/// embeddings use the adapter path when adapted_behaviors is set, with
/// per-role encoders (when supplied) overriding the shared one.
CorpusClarity corpus_clarity(const std::vector<Trajectory>& trajectories,
                             const RoleRegistry& registry, const AgentModel& encoder,
                             const ClarityConfig& config, bool adapted_behaviors = true,
                             const RoleEncoderMap& role_encoders = {});

/// Fraction of files free of placeholder patterns (case-insensitive
/// substrings). Empty pattern list selects the default set.
double completeness_alpha(const std::vector<std::string>& files,
                          std::vector<std::string> patterns = {});

extern const std::vector<std::string> kDefaultPlaceholderPatterns;

struct GammaResult {
    double gamma = 0.0;       // clamped to [0,1]
    double raw_cosine = 0.0;  // unclamped, reported alongside
};

GammaResult consistency_gamma(const std::string& requirement_text,
                              const std::string& artifact_text, const AgentModel& encoder);

/// q = (alpha + beta + gamma) / 3, inputs validated to [0,1].
double quality_q(double alpha, double beta, double gamma);

struct SubsetStats {
    std::string name;
    std::size_t n_cases = 0;
    std::size_t overstep_strict = 0;
    std::size_t overstep_relaxed = 0;
    double rate_strict = 0.0;
    double rate_relaxed = 0.0;
    double clarity_score_mean = 0.0;
    double frobenius_mean = 0.0;
};

struct ClarityReport {
    std::size_t n_cases = 0;
    std::size_t overstep_count_strict = 0;
    std::size_t overstep_count_relaxed = 0;
    double overstep_rate_strict = 0.0;
    double overstep_rate_relaxed = 0.0;
    double clarity_score_mean = 0.0;
    double frobenius_mean = 0.0;
    std::optional<double> clarity_score_mean_base;  // base-encoder pass, when distinct
    std::optional<double> frobenius_mean_base;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<double> gamma;
    std::optional<double> raw_gamma;
    std::optional<double> quality;
    std::string judge;
    double tau = 1.0;
    double epsilon = 0.5;
    std::string encoder_checkpoint;  // empty = base encoder only
    bool encoder_merged = false;
    std::string message_separator;
    std::vector<SubsetStats> subsets;
    std::vector<OverstepCase> overstep_cases;
    std::size_t degenerate_cases = 0;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

struct EvalOptions {
    ClarityConfig clarity;
    OverstepJudgeConfig judge;
    const AgentModel* encoder = nullptr;       // evaluation encoder (checkpoint or base)
    const AgentModel* base_encoder = nullptr;  // extra base pass when a checkpoint is evaluated
    RoleEncoderMap role_encoders;              // composed per-role encoders (FT & FT style)
    std::string encoder_checkpoint_label;
    bool keep_cases = true;

    std::vector<std::string> alpha_files;
    std::vector<std::string> alpha_patterns;
    std::optional<double> beta;
    std::string requirement_text;
    std::string artifact_text;
};

/// Full evaluation pass: overstep judging, corpus clarity, and whatever
/// SRDD-style dimensions the options supply inputs for. quality is only
/// reported when alpha, beta and gamma are all present.
ClarityReport evaluate_corpus(const std::vector<Trajectory>& trajectories,
                              const RoleRegistry& registry, const EvalOptions& options);

}  // namespace roleclarity
