#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "roleclarity/tensor.hpp"

namespace roleclarity {

using Tokens = std::vector<std::uint32_t>;

enum class Reduction { kSum, kMean };

struct ModelConfig {
    std::size_t vocab_size = 256;  // byte-level
    std::size_t d_model = 32;
    std::size_t n_layers = 1;
    std::size_t context_len = 512;
    std::uint64_t seed = 0;

    std::size_t lora_rank = 4;
    double lora_alpha = 4.0;
    double lora_dropout = 0.05;

    /// r=16, alpha=16, dropout 0.05 — the configuration the method was
    /// reported with; not low-rank relative to d_model=32, kept for
    /// larger d_model runs.
    static ModelConfig paper_preset();

    void validate() const;
};

struct ForwardOptions {
    bool training = false;
    bool use_lora = true;
    bool need_logits = true;
    SplitMix64* dropout_rng = nullptr;  // required when training with dropout > 0
};

/// Frozen base weight plus trainable low-rank update. The effective
/// weight is w0 + (alpha/r) * B * A with B zero-initialized, so a fresh
/// layer is an exact no-op on top of the base.
///
/// Internally the factors are stored in the orientation the layer is
/// applied in (row-activations vs column-activations); accessors speak
/// the logical orientation: w0 (d_out x d_in), A (r x d_in), B (d_out x r).
class LoraLayer {
public:
    enum class Apply { kRows, kCols };

    LoraLayer(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha,
              double dropout, Apply mode, SplitMix64& init_rng);
    /// Rebuild from logical-orientation tensors (checkpoint load).
    LoraLayer(Tensor w0_logical, Tensor a_logical, Tensor b_logical, double alpha,
              double dropout, Apply mode);

    std::size_t d_in() const { return d_in_; }
    std::size_t d_out() const { return d_out_; }
    std::size_t rank() const { return rank_; }
    double alpha() const { return alpha_; }
    double dropout() const { return dropout_; }
    Apply mode() const { return mode_; }

    Tensor base_weight() const;  // d_out x d_in
    Tensor a() const;            // r x d_in
    Tensor b() const;            // d_out x r

    /// w0 + (alpha/r) * B * A, logical orientation.
    Tensor merged_weight() const;

    /// Replace trainable factors, given in stored orientation.
    void set_stored_factors(Tensor a_stored, Tensor b_stored);
    const Tensor& stored_w0() const { return w0_stored_; }
    const Tensor& stored_a() const { return a_stored_; }
    const Tensor& stored_b() const { return b_stored_; }

private:
    Apply mode_;
    std::size_t d_in_ = 0, d_out_ = 0, rank_ = 0;
    double alpha_ = 0.0, dropout_ = 0.0;
    Tensor w0_stored_;
    Tensor a_stored_;
    Tensor b_stored_;
};

/// Effective-weight application to a single input vector (eval-style
/// semantics unless training is set; dropout then applies to the
/// low-rank path only). Off-tape arithmetic.
Tensor lora_forward(const LoraLayer& layer, const Tensor& x, bool training = false,
                    SplitMix64* dropout_rng = nullptr);

enum class Proj { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

struct LoraNodes {
    Tensor w0;
    Tensor a;
    Tensor b;
};

/// Per-tape registration of the model's parameters. Gradients from a
/// backward pass are read back through these nodes.
struct ModelBinding {
    Tape* tape = nullptr;
    LoraNodes proj[4];
    Tensor head;  // d_model x vocab (embedding transpose), constant
};

struct ForwardResult {
    Tensor hidden;  // T x d_model final-layer states
    Tensor logits;  // T x vocab (when requested)
};

/// Byte-level autoregressive model: frozen token embeddings, one causal
/// mixing layer whose q/k/v/o projections carry LoRA adapters, output
/// head tied to the embedding table. Only the LoRA factors train.
class AgentModel {
public:
    explicit AgentModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    bool merged_flag() const { return merged_; }

    Tokens tokenize(std::string_view text) const;

    ModelBinding bind(Tape& tape, bool trainable) const;
    ForwardResult build_forward(ModelBinding& binding, std::span<const std::uint32_t> tokens,
                                const ForwardOptions& opts) const;
    /// Scalar NLL node for one (context, target) pair, sum over target
    /// positions. Context must be nonempty (the first target token needs
    /// a conditioning prefix).
    Tensor build_nll(ModelBinding& binding, std::span<const std::uint32_t> context,
                     std::span<const std::uint32_t> target, const ForwardOptions& opts) const;

    Tensor forward_logits(std::span<const std::uint32_t> tokens) const;
    Tensor encode_hidden_states(std::span<const std::uint32_t> tokens) const;
    Tensor encode_hidden_states(std::span<const std::uint32_t> tokens,
                                const ForwardOptions& opts) const;

    double nll_loss(const std::vector<std::pair<Tokens, Tokens>>& batch,
                    Reduction reduction = Reduction::kSum) const;

    const LoraLayer& lora(Proj p) const { return lora_[static_cast<int>(p)]; }
    LoraLayer& lora(Proj p) { return lora_[static_cast<int>(p)]; }
    const Tensor& embedding() const { return embedding_; }

    /// Fold every adapter into its base weight; resulting model has zero
    /// LoRA factors and identical eval outputs.
    AgentModel merged() const;

    /// Hash of everything that must never change during training:
    /// config, embedding table, base projection weights.
    std::uint64_t frozen_hash() const;

    void save(const std::string& path) const;
    static AgentModel load(const std::string& path);

private:
    struct FromParts {};
    AgentModel(FromParts, ModelConfig config, Tensor embedding, std::vector<LoraLayer> lora,
               bool merged);
    void rebuild_head();
    friend AgentModel load_model(const std::string& path);

    ModelConfig config_;
    Tensor embedding_;   // vocab x d_model, frozen
    Tensor embedding_t_; // d_model x vocab
    std::vector<LoraLayer> lora_;  // q, k, v, o
    double attn_tau_ = 1.0;
    bool merged_ = false;
};

void save_model(const AgentModel& model, const std::string& path);
AgentModel load_model(const std::string& path);

}  // namespace roleclarity
