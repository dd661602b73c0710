#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "roleclarity/clarity.hpp"
#include "roleclarity/model.hpp"
#include "roleclarity/trajectory.hpp"

namespace roleclarity {

struct TrainConfig {
    double lambda = 0.1;   // regularization weight
    double lr = 5e-5;      // learning rate eta
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t checkpoint_every = 50;  // steps
    std::size_t validation_size = 100;
    std::uint64_t seed = 0;
    Reduction reduction = Reduction::kSum;  // NLL reduction
    double tau = 1.0;       // regularizer softmax temperature
    double momentum = 0.0;  // plain SGD when zero

    void validate() const;
    nlohmann::json to_json() const;
};

/// mle + lambda * rc.
double total_loss(double mle, double rc, double lambda);

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t samples = 0;
    double total = 0.0;
    double mle = 0.0;
    double rc = 0.0;
    // tempered softmax row per sample in the batch; rc is recomputable
    // from these as mean -log(row[own_index])
    std::vector<std::vector<double>> softmax_rows;
};

struct CheckpointRecord {
    std::size_t step = 0;
    std::string file;
    double val_loss = 0.0;
};

struct TrainReport {
    std::string agent_role;
    std::size_t own_index = 0;
    std::uint64_t seed = 0;
    std::size_t train_size = 0;
    std::size_t validation_size = 0;
    std::vector<StepRecord> steps;
    std::vector<double> epoch_clarity;  // [0] before training, then one per epoch
    std::vector<CheckpointRecord> checkpoints;
    std::string selected_checkpoint;
    std::size_t selected_step = 0;
    std::string frozen_hash_start;
    std::string frozen_hash_end;
    bool diverged = false;
    nlohmann::json config_echo;

    nlohmann::json to_json() const;
};

struct TrainResult {
    AgentModel model;
    TrainReport report;
};

/// LoRA fine-tuning with the role-clarity regularizer: role embeddings
/// cached from the frozen base, then per sample a behavior embedding
/// under the current adapters, its -log softmax(s_own) penalty, the
/// trajectory NLL, and an SGD update of the adapter factors only.
/// Checkpoints land in checkpoint_dir every checkpoint_every steps plus
/// a final one; the one with the lowest validation loss is selected
/// (ties break to the earliest step). A non-finite loss aborts training
/// and keeps the last finite checkpoint.
TrainResult train_agent(const AgentModel& base, const std::vector<Trajectory>& dataset,
                        const RoleRegistry& roles, const std::string& agent_role,
                        const TrainConfig& config, const std::string& checkpoint_dir);

/// Validation-loss argmin over saved checkpoint files (order = step
/// order); ties break to the earliest.
std::string select_checkpoint(const std::vector<std::string>& checkpoint_files,
                              const std::vector<Trajectory>& validation,
                              const RoleRegistry& roles, const std::string& agent_role,
                              const TrainConfig& config);

/// Eval-mode objective (mean per-sample nll + lambda * rc) on a corpus;
/// the quantity checkpoint selection minimizes.
double validation_loss(const AgentModel& model, const std::vector<Trajectory>& samples,
                       const RoleRegistry& roles, const std::string& agent_role,
                       const TrainConfig& config);

}  // namespace roleclarity
