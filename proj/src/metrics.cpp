#include "roleclarity/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace roleclarity {

using nlohmann::json;

const std::vector<std::string> kDefaultPlaceholderPatterns = {"todo", "fixme",
                                                              "pass  # placeholder"};

std::string OverstepJudgeConfig::method_name(Method m) {
    switch (m) {
        case Method::kTokenFormat: return "token-format";
        case Method::kAssignmentArgmax: return "assignment-argmax";
        case Method::kBoth: return "both";
    }
    return "unknown";
}

// ------------------------------------------------------ RoleEmbeddingCache

RoleEmbeddingCache::RoleEmbeddingCache(const AgentModel& encoder, const RoleRegistry& registry) {
    ForwardOptions base_opts;
    base_opts.use_lora = false;  // role descriptions embed under the frozen base
    for (const auto& role : registry.roles()) {
        embeddings_.push_back(embed_text(encoder, role.description, base_opts));
    }
}

// ---------------------------------------------------------- judge_overstep

namespace {

struct TokenVerdict {
    bool violated = false;
    std::vector<OverstepEvent> events;
};

TokenVerdict token_format_events(const Trajectory& t, const FilterRule& rule,
                                 const std::string& mandatory_token) {
    TokenVerdict verdict;
    auto required = [&](const std::string& role) {
        return std::find(rule.required_agents.begin(), rule.required_agents.end(), role) !=
               rule.required_agents.end();
    };
    // unauthorized use of the decision token, matched strictly
    for (const auto& m : t.messages) {
        if (!required(m.role_id) &&
            m.content.find(rule.token_strict) != std::string::npos) {
            verdict.violated = true;
            verdict.events.push_back(
                {m.round, m.role_id, "token-format", "decision token used by non-authorized role"});
        }
    }
    // mandatory token missing from a required role's final-round message
    for (const auto& role : rule.required_agents) {
        const Message* final_msg = t.final_round_message(role);
        if (final_msg == nullptr ||
            final_msg->content.find(mandatory_token) == std::string::npos) {
            verdict.violated = true;
            verdict.events.push_back(
                {t.rounds, role, "token-format", "mandatory termination token missing"});
        }
    }
    return verdict;
}

}  // namespace

OverstepCase judge_overstep(const Trajectory& trajectory, const RoleRegistry& registry,
                            const OverstepJudgeConfig& config, const AgentModel* encoder,
                            const RoleEmbeddingCache* role_cache, double tau,
                            const RoleEncoderMap& role_encoders) {
    config.token_rule.validate();
    OverstepCase result;
    result.run_id = trajectory.run_id;
    if (!trajectory.messages.empty() && trajectory.messages.front().extra.contains("subset")) {
        result.subset = trajectory.messages.front().extra["subset"].get<std::string>();
    }

    bool want_token = config.method != OverstepJudgeConfig::Method::kAssignmentArgmax;
    bool want_argmax = config.method != OverstepJudgeConfig::Method::kTokenFormat;

    if (want_token) {
        TokenVerdict strict =
            token_format_events(trajectory, config.token_rule, config.token_rule.token_strict);
        TokenVerdict relaxed =
            token_format_events(trajectory, config.token_rule, config.token_rule.token_relaxed);
        result.overstep_strict = strict.violated;
        result.overstep_relaxed = relaxed.violated;
        result.events = std::move(strict.events);
        for (auto& e : relaxed.events) {
            e.detail += " (relaxed rule)";
            result.events.push_back(std::move(e));
        }
    }

    if (want_argmax) {
        if (encoder == nullptr || role_cache == nullptr) {
            throw ValidationError("judge_overstep: assignment-argmax requires an encoder");
        }
        const auto& roles = role_cache->embeddings();
        auto cosine_of = [](const Tensor& a, const Tensor& b) {
            double dot = 0.0, sa = 0.0, sb = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                dot += a.data()[i] * b.data()[i];
                sa += a.data()[i] * a.data()[i];
                sb += b.data()[i] * b.data()[i];
            }
            if (sa == 0.0 || sb == 0.0) {
                throw ValidationError("judge_overstep: zero-norm embedding");
            }
            return dot / (std::sqrt(sa) * std::sqrt(sb));
        };
        for (const auto& m : trajectory.messages) {
            if (!registry.contains(m.role_id) || m.content.empty()) continue;
            std::size_t own = registry.index_of(m.role_id);
            auto enc_it = role_encoders.find(m.role_id);
            const AgentModel& enc = enc_it != role_encoders.end() ? *enc_it->second : *encoder;
            Tensor b = embed_text(enc, m.content);
            std::vector<double> row(roles.size());
            for (std::size_t j = 0; j < roles.size(); ++j) row[j] = cosine_of(b, roles[j]);
            Tensor row_t({1, roles.size()}, row);
            Tensor p = normalize_assignments(row_t, tau);
            std::size_t best = 0;
            for (std::size_t j = 1; j < roles.size(); ++j) {
                if (p.at(0, j) > p.at(0, best)) best = j;
            }
            if (best != own) {
                result.overstep_strict = true;
                result.overstep_relaxed = true;
                result.events.push_back({m.round, m.role_id, "assignment-argmax",
                                         "behavior matched role " +
                                             registry.roles()[best].role_id});
            }
        }
    }
    return result;
}

OverstepHook token_format_hook(const RoleRegistry& registry, const FilterRule& rule) {
    (void)registry;
    FilterRule captured = rule;
    return [captured](const Trajectory& t) {
        return token_format_events(t, captured, captured.active_token()).violated;
    };
}

double overstep_rate(std::size_t overstepping, std::size_t cases) {
    if (cases == 0) throw ValidationError("overstep_rate: empty case set");
    if (overstepping > cases) throw ValidationError("overstep_rate: count exceeds cases");
    return static_cast<double>(overstepping) / static_cast<double>(cases);
}

double overstep_rate(const std::vector<bool>& cases) {
    std::size_t count = 0;
    for (bool c : cases) count += c ? 1 : 0;
    return overstep_rate(count, cases.size());
}

// ----------------------------------------------------------- corpus_clarity

CorpusClarity corpus_clarity(const std::vector<Trajectory>& trajectories,
                             const RoleRegistry& registry, const AgentModel& encoder,
                             const ClarityConfig& config, bool adapted_behaviors,
                             const RoleEncoderMap& role_encoders) {
    config.validate();
    if (trajectories.empty()) throw ValidationError("corpus_clarity: empty corpus");
    if (registry.size() == 0) throw ValidationError("corpus_clarity: empty role registry");

    RoleEmbeddingCache cache(encoder, registry);

    ForwardOptions behavior_opts;
    behavior_opts.use_lora = adapted_behaviors;

    CorpusClarity out;
    double score_sum = 0.0, frob_sum = 0.0;
    for (const auto& t : trajectories) {
        CaseClarity cc;
        cc.run_id = t.run_id;
        if (!t.messages.empty() && t.messages.front().extra.contains("subset")) {
            cc.subset = t.messages.front().extra["subset"].get<std::string>();
        }
        EmbeddingSet embeddings;
        for (std::size_t j = 0; j < registry.size(); ++j) {
            const std::string& role_id = registry.roles()[j].role_id;
            bool present = false;
            for (const auto& m : t.messages) {
                if (m.role_id == role_id) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;
            auto enc_it = role_encoders.find(role_id);
            const AgentModel& enc = enc_it != role_encoders.end() ? *enc_it->second : encoder;
            std::string text = trajectory_text_for_role(t, role_id, enc.config().context_len);
            embeddings.behavior_embeddings.push_back(
                embed_text(enc, enc.tokenize(text), behavior_opts));
            embeddings.role_embeddings.push_back(cache.embeddings()[j]);
            cc.roles.push_back(role_id);
        }
        if (embeddings.behavior_embeddings.empty()) {
            throw ValidationError("corpus_clarity: trajectory " + t.run_id +
                                  " has no registered roles");
        }
        cc.matrices = compute_assignment(embeddings, config.tau);
        cc.score = clarity_score(cc.matrices.frob);
        if (cc.matrices.degenerate) ++out.degenerate_cases;
        score_sum += cc.score;
        frob_sum += cc.matrices.frob;
        out.cases.push_back(std::move(cc));
    }
    out.n_cases = out.cases.size();
    out.mean_score = score_sum / static_cast<double>(out.n_cases);
    out.mean_frob = frob_sum / static_cast<double>(out.n_cases);
    return out;
}

// -------------------------------------------------------------- SRDD-lite

namespace {

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

}  // namespace

double completeness_alpha(const std::vector<std::string>& files,
                          std::vector<std::string> patterns) {
    if (files.empty()) throw ValidationError("completeness_alpha: no files");
    if (patterns.empty()) patterns = kDefaultPlaceholderPatterns;
    for (auto& p : patterns) p = lowercase(p);

    std::size_t clean = 0;
    for (const auto& path : files) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValidationError("completeness_alpha: cannot open " + path);
        std::string content((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
        std::string lower = lowercase(content);
        bool flagged = false;
        for (const auto& p : patterns) {
            if (lower.find(p) != std::string::npos) {
                flagged = true;
                break;
            }
        }
        if (!flagged) ++clean;
    }
    return static_cast<double>(clean) / static_cast<double>(files.size());
}

GammaResult consistency_gamma(const std::string& requirement_text,
                              const std::string& artifact_text, const AgentModel& encoder) {
    if (requirement_text.empty() || artifact_text.empty()) {
        throw ValidationError("consistency_gamma: empty text");
    }
    Tensor a = embed_text(encoder, requirement_text);
    Tensor b = embed_text(encoder, artifact_text);
    EmbeddingSet pair;
    pair.behavior_embeddings = {a};
    pair.role_embeddings = {b};
    double cosv = assignment_matrix(pair).at(0, 0);
    GammaResult out;
    out.raw_cosine = cosv;
    out.gamma = std::clamp(cosv, 0.0, 1.0);
    return out;
}

double quality_q(double alpha, double beta, double gamma) {
    auto check = [](double v, const char* name) {
        if (v < 0.0 || v > 1.0) {
            throw ValidationError(std::string("quality_q: ") + name + " outside [0,1]");
        }
    };
    check(alpha, "alpha");
    check(beta, "beta");
    check(gamma, "gamma");
    return (alpha + beta + gamma) / 3.0;
}

// ---------------------------------------------------------- ClarityReport

json ClarityReport::to_json() const {
    json j;
    j["n_cases"] = n_cases;
    j["overstep_count_strict"] = overstep_count_strict;
    j["overstep_count_relaxed"] = overstep_count_relaxed;
    j["overstep_rate_strict"] = overstep_rate_strict;
    j["overstep_rate_relaxed"] = overstep_rate_relaxed;
    j["clarity_score_mean"] = clarity_score_mean;
    j["frobenius_mean"] = frobenius_mean;
    j["clarity_score_mean_base"] =
        clarity_score_mean_base ? json(*clarity_score_mean_base) : json(nullptr);
    j["frobenius_mean_base"] = frobenius_mean_base ? json(*frobenius_mean_base) : json(nullptr);
    j["alpha"] = alpha ? json(*alpha) : json(nullptr);
    j["beta"] = beta ? json(*beta) : json(nullptr);
    j["gamma"] = gamma ? json(*gamma) : json(nullptr);
    j["raw_gamma"] = raw_gamma ? json(*raw_gamma) : json(nullptr);
    j["quality"] = quality ? json(*quality) : json(nullptr);
    j["judge"] = judge;
    j["tau"] = tau;
    j["epsilon"] = epsilon;
    j["encoder_checkpoint"] = encoder_checkpoint;
    j["encoder_merged"] = encoder_merged;
    j["message_separator"] = message_separator;
    j["degenerate_cases"] = degenerate_cases;

    json subs = json::array();
    for (const auto& s : subsets) {
        subs.push_back({{"subset", s.name},
                        {"n_cases", s.n_cases},
                        {"overstep_count_strict", s.overstep_strict},
                        {"overstep_count_relaxed", s.overstep_relaxed},
                        {"overstep_rate_strict", s.rate_strict},
                        {"overstep_rate_relaxed", s.rate_relaxed},
                        {"clarity_score_mean", s.clarity_score_mean},
                        {"frobenius_mean", s.frobenius_mean}});
    }
    j["subsets"] = subs;

    json cases = json::array();
    for (const auto& c : overstep_cases) {
        json events = json::array();
        for (const auto& e : c.events) {
            events.push_back({{"round", e.round},
                              {"role_id", e.role_id},
                              {"judge", e.judge},
                              {"detail", e.detail}});
        }
        cases.push_back({{"run_id", c.run_id},
                         {"subset", c.subset},
                         {"overstep_strict", c.overstep_strict},
                         {"overstep_relaxed", c.overstep_relaxed},
                         {"events", events}});
    }
    j["cases"] = cases;
    return j;
}

std::string ClarityReport::to_csv() const {
    std::ostringstream out;
    out << "subset,n_cases,overstep_rate_strict,overstep_rate_relaxed,"
           "clarity_score_mean,frobenius_mean,alpha,beta,gamma,quality\n";
    auto opt = [](const std::optional<double>& v) {
        if (!v) return std::string();
        std::ostringstream s;
        s.precision(17);
        s << *v;
        return s.str();
    };
    auto row = [&](const std::string& name, std::size_t n, double rs, double rr, double cs,
                   double fm, bool with_srdd) {
        out.precision(17);
        out << name << "," << n << "," << rs << "," << rr << "," << cs << "," << fm << ",";
        if (with_srdd) {
            out << opt(alpha) << "," << opt(beta) << "," << opt(gamma) << "," << opt(quality);
        } else {
            out << ",,,";
        }
        out << "\n";
    };
    row("total", n_cases, overstep_rate_strict, overstep_rate_relaxed, clarity_score_mean,
        frobenius_mean, true);
    for (const auto& s : subsets) {
        row(s.name, s.n_cases, s.rate_strict, s.rate_relaxed, s.clarity_score_mean,
            s.frobenius_mean, false);
    }
    return out.str();
}

// --------------------------------------------------------- evaluate_corpus

ClarityReport evaluate_corpus(const std::vector<Trajectory>& trajectories,
                              const RoleRegistry& registry, const EvalOptions& options) {
    if (trajectories.empty()) throw ValidationError("evaluate_corpus: empty corpus");
    if (options.encoder == nullptr) throw ValidationError("evaluate_corpus: encoder required");
    options.clarity.validate();

    ClarityReport report;
    report.n_cases = trajectories.size();
    report.judge = OverstepJudgeConfig::method_name(options.judge.method);
    report.tau = options.clarity.tau;
    report.epsilon = options.clarity.epsilon;
    report.encoder_checkpoint = options.encoder_checkpoint_label;
    report.encoder_merged = options.encoder->merged_flag();
    report.message_separator = kMessageSeparator;

    // composed encoders must share the frozen base, or role embeddings
    // and behavior embeddings live in unrelated spaces
    for (const auto& [role, enc] : options.role_encoders) {
        if (enc->frozen_hash() != options.encoder->frozen_hash()) {
            throw ValidationError("evaluate_corpus: per-role encoder for " + role +
                                  " has a different frozen base");
        }
    }

    bool needs_argmax = options.judge.method != OverstepJudgeConfig::Method::kTokenFormat;
    RoleEmbeddingCache cache(*options.encoder, registry);

    std::vector<OverstepCase> cases;
    for (const auto& t : trajectories) {
        cases.push_back(judge_overstep(t, registry, options.judge,
                                       needs_argmax ? options.encoder : nullptr,
                                       needs_argmax ? &cache : nullptr, options.clarity.tau,
                                       options.role_encoders));
    }
    for (const auto& c : cases) {
        report.overstep_count_strict += c.overstep_strict ? 1 : 0;
        report.overstep_count_relaxed += c.overstep_relaxed ? 1 : 0;
    }
    report.overstep_rate_strict = overstep_rate(report.overstep_count_strict, report.n_cases);
    report.overstep_rate_relaxed = overstep_rate(report.overstep_count_relaxed, report.n_cases);

    CorpusClarity clarity =
        corpus_clarity(trajectories, registry, *options.encoder, options.clarity,
                       /*adapted_behaviors=*/true, options.role_encoders);
    report.clarity_score_mean = clarity.mean_score;
    report.frobenius_mean = clarity.mean_frob;
    report.degenerate_cases = clarity.degenerate_cases;

    if (options.base_encoder != nullptr) {
        CorpusClarity base = corpus_clarity(trajectories, registry, *options.base_encoder,
                                            options.clarity, /*adapted_behaviors=*/false);
        report.clarity_score_mean_base = base.mean_score;
        report.frobenius_mean_base = base.mean_frob;
    }

    // per-subset breakdown in first-appearance order
    std::vector<std::string> subset_order;
    std::map<std::string, SubsetStats> subset_map;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const std::string& name = cases[i].subset;
        if (name.empty()) continue;
        if (subset_map.find(name) == subset_map.end()) {
            subset_order.push_back(name);
            subset_map[name].name = name;
        }
        SubsetStats& s = subset_map[name];
        ++s.n_cases;
        s.overstep_strict += cases[i].overstep_strict ? 1 : 0;
        s.overstep_relaxed += cases[i].overstep_relaxed ? 1 : 0;
        s.clarity_score_mean += clarity.cases[i].score;
        s.frobenius_mean += clarity.cases[i].matrices.frob;
    }
    for (const auto& name : subset_order) {
        SubsetStats s = subset_map[name];
        s.rate_strict = overstep_rate(s.overstep_strict, s.n_cases);
        s.rate_relaxed = overstep_rate(s.overstep_relaxed, s.n_cases);
        s.clarity_score_mean /= static_cast<double>(s.n_cases);
        s.frobenius_mean /= static_cast<double>(s.n_cases);
        report.subsets.push_back(std::move(s));
    }

    if (!options.alpha_files.empty()) {
        report.alpha = completeness_alpha(options.alpha_files, options.alpha_patterns);
    }
    report.beta = options.beta;
    if (!options.requirement_text.empty() && !options.artifact_text.empty()) {
        GammaResult g =
            consistency_gamma(options.requirement_text, options.artifact_text, *options.encoder);
        report.gamma = g.gamma;
        report.raw_gamma = g.raw_cosine;
    }
    if (report.alpha && report.beta && report.gamma) {
        report.quality = quality_q(*report.alpha, *report.beta, *report.gamma);
    }
    if (options.keep_cases) report.overstep_cases = std::move(cases);
    return report;
}

}  // namespace roleclarity
