#include "roleclarity/clarity.hpp"

#include <algorithm>
#include <cmath>

namespace roleclarity {

namespace {

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

double cosine(const Tensor& a, const Tensor& b, const char* what) {
    if (a.size() != b.size()) throw ValidationError(std::string(what) + ": size mismatch");
    double na = std::sqrt(dot(a, a));
    double nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) {
        throw ValidationError(std::string(what) + ": zero-norm embedding");
    }
    return dot(a, b) / (na * nb);
}

void check_row_stochastic(const Tensor& P, const char* what) {
    if (P.rank() != 2 || P.rows() != P.cols()) {
        throw ValidationError(std::string(what) + ": P must be square");
    }
    std::size_t n = P.rows();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += P.at(i, j);
        if (std::abs(s - 1.0) > 1e-6) {
            throw ValidationError(std::string(what) + ": row " + std::to_string(i) +
                                  " is not stochastic (sum deviates by more than 1e-6)");
        }
    }
}

}  // namespace

Tensor embed_text(const AgentModel& encoder, std::span<const std::uint32_t> tokens,
                  const ForwardOptions& opts) {
    if (tokens.empty()) throw ValidationError("embed_text: empty text");
    Tensor hidden = encoder.encode_hidden_states(tokens, opts);
    std::size_t m = hidden.rows(), d = hidden.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += hidden.at(i, j);
    }
    double norm_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        mean[j] /= static_cast<double>(m);
        norm_sq += mean[j] * mean[j];
    }
    if (norm_sq == 0.0) throw ValidationError("embed_text: zero-norm embedding");
    return Tensor({d}, std::move(mean));
}

Tensor embed_text(const AgentModel& encoder, const std::string& text,
                  const ForwardOptions& opts) {
    return embed_text(encoder, encoder.tokenize(text), opts);
}

namespace {

std::string concat_messages(const Trajectory& trajectory,
                            const std::function<bool(const Message&)>& owns,
                            const std::string& who, std::size_t context_len) {
    std::vector<const Message*> own;
    for (const auto& m : trajectory.messages) {
        if (owns(m)) own.push_back(&m);
    }
    if (own.empty()) {
        throw ValidationError("trajectory_text: " + who + " absent from trajectory " +
                              trajectory.run_id);
    }
    std::stable_sort(own.begin(), own.end(),
                     [](const Message* a, const Message* b) { return a->round < b->round; });
    std::string text;
    for (std::size_t i = 0; i < own.size(); ++i) {
        if (i > 0) text += kMessageSeparator;
        text += own[i]->content;
    }
    if (text.size() > context_len) {
        text = text.substr(text.size() - context_len);
    }
    return text;
}

}  // namespace

std::string trajectory_text(const Trajectory& trajectory, const std::string& agent_id,
                            std::size_t context_len) {
    return concat_messages(
        trajectory, [&](const Message& m) { return m.agent_id == agent_id; },
        "agent " + agent_id, context_len);
}

std::string trajectory_text_for_role(const Trajectory& trajectory, const std::string& role_id,
                                     std::size_t context_len) {
    return concat_messages(
        trajectory, [&](const Message& m) { return m.role_id == role_id; },
        "role " + role_id, context_len);
}

Tensor embed_trajectory(const AgentModel& encoder, const Trajectory& trajectory,
                        const std::string& agent_id, const ForwardOptions& opts) {
    std::string text = trajectory_text(trajectory, agent_id, encoder.config().context_len);
    return embed_text(encoder, text, opts);
}

Tensor assignment_matrix(const EmbeddingSet& embeddings) {
    std::size_t n = embeddings.behavior_embeddings.size();
    if (n == 0 || embeddings.role_embeddings.size() != n) {
        throw ValidationError("assignment_matrix: need matching nonzero embedding counts");
    }
    std::vector<double> s(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            s[i * n + j] = cosine(embeddings.behavior_embeddings[i],
                                  embeddings.role_embeddings[j], "assignment_matrix");
        }
    }
    return Tensor({n, n}, std::move(s));
}

Tensor normalize_assignments(const Tensor& S, double tau) {
    if (!(tau > 0.0)) throw ValidationError("normalize_assignments: tau must be positive");
    if (S.rank() != 2) throw ValidationError("normalize_assignments: S must be rank 2");
    Tape tape;
    Tensor P = tape.row_softmax(tape.constant(S), tau);
    return Tensor(P.shape(), P.data());
}

AssignmentMatrices clarity_matrix(const Tensor& P) {
    check_row_stochastic(P, "clarity_matrix");
    std::size_t n = P.rows();
    std::vector<double> m(n * n);
    double direct_sq = 0.0;
    double off_sq = 0.0, diag_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double v = P.at(i, j) - (i == j ? 1.0 : 0.0);
            m[i * n + j] = v;
            direct_sq += v * v;
            if (i == j) {
                diag_sq += v * v;
            } else {
                off_sq += P.at(i, j) * P.at(i, j);
            }
        }
    }
    double decomposed_sq = off_sq + diag_sq;
    if (std::abs(direct_sq - decomposed_sq) > 1e-12) {
        throw ValidationError("clarity_matrix: norm decomposition disagrees beyond 1e-12");
    }
    AssignmentMatrices out;
    out.n = n;
    out.P = P;
    out.M = Tensor({n, n}, std::move(m));
    out.frob = std::sqrt(direct_sq);
    out.degenerate = (n == 1);
    return out;
}

bool is_role_clear(double frob, double epsilon) {
    if (frob < 0.0) throw ValidationError("is_role_clear: negative norm");
    if (!(epsilon > 0.0)) throw ValidationError("is_role_clear: epsilon must be positive");
    return frob <= epsilon;
}

double clarity_score(double frob) {
    if (frob < 0.0) throw ValidationError("clarity_score: negative norm");
    return 1.0 / (1.0 + frob);
}

double rc_regularizer(const Tensor& P) {
    check_row_stochastic(P, "rc_regularizer");
    std::size_t n = P.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double pii = P.at(i, i);
        if (pii <= 0.0) {
            throw ValidationError("rc_regularizer: nonpositive diagonal entry");
        }
        total += -std::log(pii);
    }
    return total / static_cast<double>(n);
}

AssignmentMatrices compute_assignment(const EmbeddingSet& embeddings, double tau) {
    Tensor S = assignment_matrix(embeddings);
    Tensor P = normalize_assignments(S, tau);
    AssignmentMatrices out = clarity_matrix(P);
    out.S = S;
    return out;
}

// ---------------------------------------------------- differentiable path

Tensor embed_text_node(const AgentModel& encoder, ModelBinding& binding,
                       std::span<const std::uint32_t> tokens, const ForwardOptions& opts) {
    if (tokens.empty()) throw ValidationError("embed_text_node: empty text");
    ForwardOptions local = opts;
    local.need_logits = false;
    ForwardResult fr = encoder.build_forward(binding, tokens, local);
    return binding.tape->row_mean(fr.hidden);
}

Tensor rc_row_loss_node(Tape& tape, const Tensor& behavior_node,
                        const std::vector<Tensor>& role_nodes, std::size_t own_index,
                        double tau) {
    if (role_nodes.empty()) throw ValidationError("rc_row_loss_node: no roles");
    if (own_index >= role_nodes.size()) {
        throw ValidationError("rc_row_loss_node: own_index out of range");
    }
    if (!(tau > 0.0)) throw ValidationError("rc_row_loss_node: tau must be positive");

    // -log softmax_tau(s_own) = log(sum_j exp(s_j / tau)) - s_own / tau,
    // built from scalar nodes. Similarities live in [-1, 1], so the
    // un-shifted exponentials stay finite for any reasonable tau.
    Tensor own_scaled;
    Tensor acc;
    for (std::size_t j = 0; j < role_nodes.size(); ++j) {
        Tensor s = tape.cosine_similarity(behavior_node, role_nodes[j]);
        Tensor scaled = tape.scalar_multiply(s, 1.0 / tau);
        Tensor e = tape.exp(scaled);
        acc = (j == 0) ? e : tape.add(acc, e);
        if (j == own_index) own_scaled = scaled;
    }
    return tape.subtract(tape.log(acc), own_scaled);
}

Tensor rc_regularizer_node(Tape& tape, const std::vector<Tensor>& behavior_nodes,
                           const std::vector<Tensor>& role_nodes, double tau) {
    if (behavior_nodes.empty() || behavior_nodes.size() != role_nodes.size()) {
        throw ValidationError("rc_regularizer_node: need one behavior per role");
    }
    Tensor total;
    for (std::size_t i = 0; i < behavior_nodes.size(); ++i) {
        Tensor row = rc_row_loss_node(tape, behavior_nodes[i], role_nodes, i, tau);
        total = (i == 0) ? row : tape.add(total, row);
    }
    return tape.scalar_multiply(total, 1.0 / static_cast<double>(behavior_nodes.size()));
}

}  // namespace roleclarity
