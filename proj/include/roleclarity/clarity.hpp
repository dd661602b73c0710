#pragma once

#include <string>
#include <vector>

#include "roleclarity/model.hpp"
#include "roleclarity/tensor.hpp"
#include "roleclarity/trajectory.hpp"

namespace roleclarity {

/// Separator inserted between an agent's messages when its behavior
/// trajectory is concatenated for embedding; echoed in reports so a
/// reader can reproduce the exact byte stream.
inline constexpr const char* kMessageSeparator = "\n[SEP]\n";

struct ClarityConfig {
    double tau = 1.0;      // softmax temperature
    double epsilon = 0.5;  // clearness threshold

    void validate() const {
        if (!(tau > 0.0)) throw ValidationError("clarity config: tau must be positive");
        if (!(epsilon > 0.0)) throw ValidationError("clarity config: epsilon must be positive");
    }
};

struct EmbeddingSet {
    std::vector<Tensor> role_embeddings;      // computed under the frozen base
    std::vector<Tensor> behavior_embeddings;  // computed under the trainable path
};

struct AssignmentMatrices {
    std::size_t n = 0;
    Tensor S;           // n x n cosine similarities in [-1, 1]
    Tensor P;           // row-stochastic tempered softmax of S
    Tensor M;           // P - I
    double frob = 0.0;  // ||M||_F
    bool degenerate = false;  // n == 1: clarity is vacuous
};

/// Mean pooling over final-layer hidden states.
Tensor embed_text(const AgentModel& encoder, std::span<const std::uint32_t> tokens,
                  const ForwardOptions& opts = {});
Tensor embed_text(const AgentModel& encoder, const std::string& text,
                  const ForwardOptions& opts = {});

/// Byte stream an agent's behavior embedding is computed from: the
/// agent's own messages in round order, joined by kMessageSeparator and
/// truncated to context_len from the end (most recent context wins).
std::string trajectory_text(const Trajectory& trajectory, const std::string& agent_id,
                            std::size_t context_len);

Tensor embed_trajectory(const AgentModel& encoder, const Trajectory& trajectory,
                        const std::string& agent_id, const ForwardOptions& opts = {});

/// Same concatenation keyed by role instead of agent; used when building
/// assignment matrices in registry order.
std::string trajectory_text_for_role(const Trajectory& trajectory, const std::string& role_id,
                                     std::size_t context_len);

/// s_ij = cos(b_i, r_j).
Tensor assignment_matrix(const EmbeddingSet& embeddings);

/// Row-wise tempered softmax.
Tensor normalize_assignments(const Tensor& S, double tau);

/// M = P - I together with ||M||_F, the norm cross-checked against the
/// off-diagonal/diagonal decomposition to 1e-12.
AssignmentMatrices clarity_matrix(const Tensor& P);

bool is_role_clear(double frob, double epsilon);

/// C = 1 / (1 + ||M||_F).
double clarity_score(double frob);

/// Mean negative log diagonal of a row-stochastic P.
double rc_regularizer(const Tensor& P);

/// Full pipeline S -> P -> M for one case.
AssignmentMatrices compute_assignment(const EmbeddingSet& embeddings, double tau);

// ---- differentiable composition (training path) ----

/// Mean-pooled embedding as a tape node, end-to-end differentiable
/// through the encoder's LoRA factors.
Tensor embed_text_node(const AgentModel& encoder, ModelBinding& binding,
                       std::span<const std::uint32_t> tokens, const ForwardOptions& opts);

/// -log softmax_tau(s_own) for one behavior embedding against constant
/// role embeddings, assembled from scalar cosine nodes.
Tensor rc_row_loss_node(Tape& tape, const Tensor& behavior_node,
                        const std::vector<Tensor>& role_nodes, std::size_t own_index,
                        double tau);

/// Average of rc_row_loss_node over all rows: the clarity regularizer.
Tensor rc_regularizer_node(Tape& tape, const std::vector<Tensor>& behavior_nodes,
                           const std::vector<Tensor>& role_nodes, double tau);

}  // namespace roleclarity
