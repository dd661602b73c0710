#include "roleclarity/model.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

namespace roleclarity {

using nlohmann::json;

namespace {

constexpr double kCausalMaskValue = -1e9;

Tensor transpose2d(const Tensor& t) {
    std::size_t m = t.rows(), n = t.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = t.at(i, j);
    }
    return Tensor({n, m}, std::move(out));
}

Tensor gaussian_tensor(std::size_t rows, std::size_t cols, double stddev, SplitMix64& rng) {
    std::vector<double> data(rows * cols);
    for (auto& v : data) v = rng.gaussian(0.0, stddev);
    return Tensor({rows, cols}, std::move(data));
}

/// Elementwise product with a constant mask, composed from the fixed
/// primitive set via the polarization identity
///   x (.) m == 0.25 * ((x + m)^2 - (x - m)^2).
Tensor hadamard_const(Tape& t, const Tensor& x, const Tensor& mask_node) {
    Tensor plus = t.square(t.add(x, mask_node));
    Tensor minus = t.square(t.subtract(x, mask_node));
    return t.scalar_multiply(t.subtract(plus, minus), 0.25);
}

/// Sum of x over positions selected by a constant 0/1 mask, same trick.
Tensor masked_sum(Tape& t, const Tensor& x, const Tensor& mask_node) {
    Tensor plus = t.sum(t.square(t.add(x, mask_node)));
    Tensor minus = t.sum(t.square(t.subtract(x, mask_node)));
    return t.scalar_multiply(t.subtract(plus, minus), 0.25);
}

json tensor_to_json(const Tensor& t) {
    json j;
    j["shape"] = t.shape();
    j["data"] = t.data();
    return j;
}

Tensor tensor_from_json(const json& j) {
    std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
    std::vector<double> data = j.at("data").get<std::vector<double>>();
    return Tensor(std::move(shape), std::move(data));
}

void hash_tensor(std::uint64_t& h, const Tensor& t) {
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
}

}  // namespace

// ------------------------------------------------------------ ModelConfig

ModelConfig ModelConfig::paper_preset() {
    ModelConfig cfg;
    cfg.lora_rank = 16;
    cfg.lora_alpha = 16.0;
    cfg.lora_dropout = 0.05;
    return cfg;
}

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ValidationError("model config: vocab_size must be >= 2");
    if (d_model < 2) throw ValidationError("model config: d_model must be >= 2");
    if (context_len < 1) throw ValidationError("model config: context_len must be >= 1");
    if (n_layers != 1) {
        throw ValidationError("model config: exactly one mixing layer is supported");
    }
    if (lora_rank == 0 || lora_rank >= d_model) {
        throw ValidationError("model config: lora rank must satisfy 0 < r < d_model");
    }
    if (lora_dropout < 0.0 || lora_dropout > 1.0) {
        throw ValidationError("model config: dropout must lie in [0,1]");
    }
}

// -------------------------------------------------------------- LoraLayer

LoraLayer::LoraLayer(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha,
                     double dropout, Apply mode, SplitMix64& init_rng)
    : mode_(mode), d_in_(d_in), d_out_(d_out), rank_(rank), alpha_(alpha), dropout_(dropout) {
    if (rank_ == 0 || rank_ >= std::min(d_in_, d_out_)) {
        throw ValidationError("lora: rank must satisfy 0 < r < min(d_in, d_out)");
    }
    // Draw in logical orientation so the stream of random values does not
    // depend on the application mode.
    Tensor w0 = gaussian_tensor(d_out_, d_in_, 1.0 / std::sqrt(static_cast<double>(d_in_)),
                                init_rng);
    Tensor a = gaussian_tensor(rank_, d_in_, 0.1, init_rng);
    Tensor b = Tensor::zeros({d_out_, rank_});
    if (mode_ == Apply::kRows) {
        w0_stored_ = transpose2d(w0);
        a_stored_ = transpose2d(a);
        b_stored_ = transpose2d(b);
    } else {
        w0_stored_ = w0;
        a_stored_ = a;
        b_stored_ = b;
    }
}

LoraLayer::LoraLayer(Tensor w0_logical, Tensor a_logical, Tensor b_logical, double alpha,
                     double dropout, Apply mode)
    : mode_(mode), alpha_(alpha), dropout_(dropout) {
    d_out_ = w0_logical.rows();
    d_in_ = w0_logical.cols();
    rank_ = a_logical.rows();
    if (a_logical.cols() != d_in_ || b_logical.rows() != d_out_ || b_logical.cols() != rank_) {
        throw ValidationError("lora: factor shapes inconsistent with base weight");
    }
    if (rank_ == 0 || rank_ >= std::min(d_in_, d_out_)) {
        throw ValidationError("lora: rank must satisfy 0 < r < min(d_in, d_out)");
    }
    if (mode_ == Apply::kRows) {
        w0_stored_ = transpose2d(w0_logical);
        a_stored_ = transpose2d(a_logical);
        b_stored_ = transpose2d(b_logical);
    } else {
        w0_stored_ = std::move(w0_logical);
        a_stored_ = std::move(a_logical);
        b_stored_ = std::move(b_logical);
    }
}

Tensor LoraLayer::base_weight() const {
    return mode_ == Apply::kRows ? transpose2d(w0_stored_) : w0_stored_;
}

Tensor LoraLayer::a() const {
    return mode_ == Apply::kRows ? transpose2d(a_stored_) : a_stored_;
}

Tensor LoraLayer::b() const {
    return mode_ == Apply::kRows ? transpose2d(b_stored_) : b_stored_;
}

Tensor LoraLayer::merged_weight() const {
    Tensor w0 = base_weight();
    Tensor ba = a();  // r x d_in
    Tensor bb = b();  // d_out x r
    double scale = alpha_ / static_cast<double>(rank_);
    std::vector<double> out = w0.data();
    for (std::size_t i = 0; i < d_out_; ++i) {
        for (std::size_t l = 0; l < rank_; ++l) {
            double bv = bb.at(i, l) * scale;
            if (bv == 0.0) continue;
            for (std::size_t j = 0; j < d_in_; ++j) {
                out[i * d_in_ + j] += bv * ba.at(l, j);
            }
        }
    }
    return Tensor({d_out_, d_in_}, std::move(out));
}

void LoraLayer::set_stored_factors(Tensor a_stored, Tensor b_stored) {
    if (a_stored.shape() != a_stored_.shape() || b_stored.shape() != b_stored_.shape()) {
        throw ValidationError("lora: factor update changes shape");
    }
    a_stored_ = std::move(a_stored);
    b_stored_ = std::move(b_stored);
}

Tensor lora_forward(const LoraLayer& layer, const Tensor& x, bool training,
                    SplitMix64* dropout_rng) {
    if (x.rank() != 1 || x.size() != layer.d_in()) {
        throw ValidationError("lora_forward: input size must equal d_in");
    }
    Tensor w0 = layer.base_weight();
    Tensor a = layer.a();
    Tensor b = layer.b();

    std::vector<double> xin = x.data();
    if (training && layer.dropout() > 0.0) {
        if (layer.dropout() >= 1.0) {
            std::fill(xin.begin(), xin.end(), 0.0);
        } else {
            if (dropout_rng == nullptr) {
                throw ValidationError("lora_forward: training dropout requires an rng");
            }
            double keep = 1.0 - layer.dropout();
            for (auto& v : xin) {
                v = (dropout_rng->uniform01() < layer.dropout()) ? 0.0 : v / keep;
            }
        }
    }

    std::vector<double> ax(layer.rank(), 0.0);
    for (std::size_t l = 0; l < layer.rank(); ++l) {
        for (std::size_t j = 0; j < layer.d_in(); ++j) ax[l] += a.at(l, j) * xin[j];
    }
    double scale = layer.alpha() / static_cast<double>(layer.rank());
    std::vector<double> out(layer.d_out(), 0.0);
    for (std::size_t i = 0; i < layer.d_out(); ++i) {
        double base = 0.0;
        for (std::size_t j = 0; j < layer.d_in(); ++j) base += w0.at(i, j) * x.at(j);
        double low = 0.0;
        for (std::size_t l = 0; l < layer.rank(); ++l) low += b.at(i, l) * ax[l];
        out[i] = base + scale * low;
    }
    return Tensor({layer.d_out()}, std::move(out));
}

// ------------------------------------------------------------- AgentModel

AgentModel::AgentModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    SplitMix64 rng(config_.seed);
    embedding_ = gaussian_tensor(config_.vocab_size, config_.d_model, 0.5, rng);
    for (int p = 0; p < 4; ++p) {
        LoraLayer::Apply mode =
            (static_cast<Proj>(p) == Proj::kKey) ? LoraLayer::Apply::kCols
                                                 : LoraLayer::Apply::kRows;
        lora_.emplace_back(config_.d_model, config_.d_model, config_.lora_rank,
                           config_.lora_alpha, config_.lora_dropout, mode, rng);
    }
    attn_tau_ = std::sqrt(static_cast<double>(config_.d_model));
    rebuild_head();
}

AgentModel::AgentModel(FromParts, ModelConfig config, Tensor embedding,
                       std::vector<LoraLayer> lora, bool merged)
    : config_(std::move(config)), embedding_(std::move(embedding)), lora_(std::move(lora)),
      merged_(merged) {
    config_.validate();
    if (embedding_.rows() != config_.vocab_size || embedding_.cols() != config_.d_model) {
        throw ValidationError("model: embedding shape inconsistent with config");
    }
    attn_tau_ = std::sqrt(static_cast<double>(config_.d_model));
    rebuild_head();
}

void AgentModel::rebuild_head() { embedding_t_ = transpose2d(embedding_); }

Tokens AgentModel::tokenize(std::string_view text) const {
    Tokens out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        if (c >= config_.vocab_size) {
            throw ValidationError("tokenize: byte out of vocabulary range");
        }
        out.push_back(c);
    }
    return out;
}

ModelBinding AgentModel::bind(Tape& tape, bool trainable) const {
    ModelBinding binding;
    binding.tape = &tape;
    for (int p = 0; p < 4; ++p) {
        const LoraLayer& layer = lora_[static_cast<std::size_t>(p)];
        binding.proj[p].w0 = tape.constant(layer.stored_w0());
        Tensor a = layer.stored_a();
        Tensor b = layer.stored_b();
        binding.proj[p].a = tape.leaf(Tensor(a.shape(), a.data(), trainable));
        binding.proj[p].b = tape.leaf(Tensor(b.shape(), b.data(), trainable));
    }
    binding.head = tape.constant(embedding_t_);
    return binding;
}

namespace {

/// Applies one LoRA projection on the tape. Row mode: activations are
/// T x d rows; col mode: d x T columns. Stored factor orientation matches.
Tensor apply_lora(Tape& t, const LoraNodes& nodes, const LoraLayer& layer, const Tensor& x,
                  const ForwardOptions& opts) {
    Tensor base = layer.mode() == LoraLayer::Apply::kRows ? t.matmul(x, nodes.w0)
                                                          : t.matmul(nodes.w0, x);
    if (!opts.use_lora) return base;

    Tensor low_in = x;
    if (opts.training && layer.dropout() > 0.0) {
        if (layer.dropout() >= 1.0) {
            low_in = t.scalar_multiply(x, 0.0);
        } else {
            if (opts.dropout_rng == nullptr) {
                throw ValidationError("forward: training dropout requires an rng");
            }
            double keep = 1.0 - layer.dropout();
            std::vector<double> mask(x.size());
            for (auto& v : mask) {
                v = (opts.dropout_rng->uniform01() < layer.dropout()) ? 0.0 : 1.0 / keep;
            }
            low_in = hadamard_const(t, x, t.constant(Tensor(x.shape(), std::move(mask))));
        }
    }
    Tensor low = layer.mode() == LoraLayer::Apply::kRows
                     ? t.matmul(t.matmul(low_in, nodes.a), nodes.b)
                     : t.matmul(nodes.b, t.matmul(nodes.a, low_in));
    double scale = layer.alpha() / static_cast<double>(layer.rank());
    return t.add(base, t.scalar_multiply(low, scale));
}

}  // namespace

ForwardResult AgentModel::build_forward(ModelBinding& binding,
                                        std::span<const std::uint32_t> tokens,
                                        const ForwardOptions& opts) const {
    if (binding.tape == nullptr) throw ValidationError("forward: unbound model");
    Tape& t = *binding.tape;
    std::size_t len = tokens.size();
    if (len == 0) throw ValidationError("forward: empty sequence");
    if (len > config_.context_len) {
        throw ValidationError("forward: sequence exceeds context_len");
    }
    std::size_t d = config_.d_model;

    std::vector<double> xdata(len * d);
    for (std::size_t i = 0; i < len; ++i) {
        std::uint32_t tok = tokens[i];
        if (tok >= config_.vocab_size) throw ValidationError("forward: token out of range");
        const double* row = embedding_.data().data() + tok * d;
        std::copy(row, row + d, xdata.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Tensor x_rows = t.constant(Tensor({len, d}, xdata));
    std::vector<double> xtdata(d * len);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < d; ++j) xtdata[j * len + i] = xdata[i * d + j];
    }
    Tensor x_cols = t.constant(Tensor({d, len}, std::move(xtdata)));

    Tensor q = apply_lora(t, binding.proj[0], lora_[0], x_rows, opts);   // T x d
    Tensor k_cols = apply_lora(t, binding.proj[1], lora_[1], x_cols, opts);  // d x T
    Tensor v = apply_lora(t, binding.proj[2], lora_[2], x_rows, opts);   // T x d

    // Causal mask: -1e9 on future positions underflows to an exact zero
    // probability after the softmax, which keeps position t bit-for-bit
    // independent of tokens after t.
    std::vector<double> mask(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = i + 1; j < len; ++j) mask[i * len + j] = kCausalMaskValue;
    }
    Tensor scores = t.add(t.matmul(q, k_cols), t.constant(Tensor({len, len}, std::move(mask))));
    Tensor attn = t.row_softmax(scores, attn_tau_);
    Tensor mixed = apply_lora(t, binding.proj[3], lora_[3], t.matmul(attn, v), opts);

    // No residual shortcut: the states stay fully adapter-responsive,
    // which the clarity regularizer relies on at this scale.
    ForwardResult result;
    result.hidden = mixed;
    if (opts.need_logits) {
        result.logits = t.matmul(result.hidden, binding.head);
    }
    return result;
}

Tensor AgentModel::build_nll(ModelBinding& binding, std::span<const std::uint32_t> context,
                             std::span<const std::uint32_t> target,
                             const ForwardOptions& opts) const {
    if (binding.tape == nullptr) throw ValidationError("nll: unbound model");
    if (context.empty()) throw ValidationError("nll: context must be nonempty");
    if (target.empty()) throw ValidationError("nll: target must be nonempty");
    Tape& t = *binding.tape;

    Tokens full(context.begin(), context.end());
    full.insert(full.end(), target.begin(), target.end());
    ForwardOptions fopts = opts;
    fopts.need_logits = true;
    ForwardResult fr = build_forward(binding, full, fopts);
    const Tensor& logits = fr.logits;
    std::size_t len = full.size();
    std::size_t vocab = config_.vocab_size;

    // log-sum-exp per row, assembled from the primitive set:
    // lse = log(sum_j exp(x - max)) + max.
    Tensor ms = t.row_max_subtract(logits);
    Tensor ones_col = t.constant(Tensor::full({vocab, 1}, 1.0));
    Tensor z = t.matmul(t.exp(ms), ones_col);  // T x 1
    Tensor mean_col = t.constant(Tensor::full({vocab, 1}, 1.0 / static_cast<double>(vocab)));
    Tensor max_col = t.matmul(t.subtract(logits, ms), mean_col);  // T x 1, rows are constant
    Tensor lse = t.add(t.log(z), max_col);

    std::size_t first = context.size() - 1;  // row predicting target[0]
    std::vector<double> row_mask(len, 0.0);
    std::vector<double> pick_mask(len * vocab, 0.0);
    for (std::size_t p = 0; p < target.size(); ++p) {
        row_mask[first + p] = 1.0;
        pick_mask[(first + p) * vocab + target[p]] = 1.0;
    }
    Tensor lse_sum = masked_sum(t, lse, t.constant(Tensor({len, 1}, std::move(row_mask))));
    Tensor picked = masked_sum(t, logits, t.constant(Tensor({len, vocab}, std::move(pick_mask))));
    return t.subtract(lse_sum, picked);
}

Tensor AgentModel::forward_logits(std::span<const std::uint32_t> tokens) const {
    Tape tape;
    ModelBinding binding = bind(tape, false);
    ForwardOptions opts;
    ForwardResult fr = build_forward(binding, tokens, opts);
    return Tensor(fr.logits.shape(), fr.logits.data());
}

Tensor AgentModel::encode_hidden_states(std::span<const std::uint32_t> tokens) const {
    ForwardOptions opts;
    return encode_hidden_states(tokens, opts);
}

Tensor AgentModel::encode_hidden_states(std::span<const std::uint32_t> tokens,
                                        const ForwardOptions& opts) const {
    Tape tape;
    ModelBinding binding = bind(tape, false);
    ForwardOptions local = opts;
    local.need_logits = false;
    ForwardResult fr = build_forward(binding, tokens, local);
    return Tensor(fr.hidden.shape(), fr.hidden.data());
}

double AgentModel::nll_loss(const std::vector<std::pair<Tokens, Tokens>>& batch,
                            Reduction reduction) const {
    if (batch.empty()) throw ValidationError("nll_loss: empty batch");
    double total = 0.0;
    std::size_t positions = 0;
    for (const auto& [context, target] : batch) {
        Tape tape;
        ModelBinding binding = bind(tape, false);
        ForwardOptions opts;
        total += build_nll(binding, context, target, opts).value();
        positions += target.size();
    }
    if (reduction == Reduction::kMean) {
        return total / static_cast<double>(positions);
    }
    return total;
}

AgentModel AgentModel::merged() const {
    std::vector<LoraLayer> merged_layers;
    for (int p = 0; p < 4; ++p) {
        const LoraLayer& layer = lora_[static_cast<std::size_t>(p)];
        merged_layers.emplace_back(layer.merged_weight(),
                                   Tensor::zeros({layer.rank(), layer.d_in()}),
                                   Tensor::zeros({layer.d_out(), layer.rank()}),
                                   layer.alpha(), layer.dropout(), layer.mode());
    }
    return AgentModel(FromParts{}, config_, embedding_, std::move(merged_layers), true);
}

std::uint64_t AgentModel::frozen_hash() const {
    std::uint64_t h = fnv1a64("roleclarity-frozen");
    h = fnv1a64(&config_.vocab_size, sizeof(config_.vocab_size), h);
    h = fnv1a64(&config_.d_model, sizeof(config_.d_model), h);
    h = fnv1a64(&config_.context_len, sizeof(config_.context_len), h);
    hash_tensor(h, embedding_);
    for (const auto& layer : lora_) {
        Tensor w0 = layer.base_weight();
        hash_tensor(h, w0);
    }
    return h;
}

void AgentModel::save(const std::string& path) const { save_model(*this, path); }

AgentModel AgentModel::load(const std::string& path) { return load_model(path); }

void save_model(const AgentModel& model, const std::string& path) {
    const ModelConfig& cfg = model.config();
    json j;
    j["format"] = "roleclarity-model";
    j["format_version"] = 1;
    j["merged"] = model.merged_flag();
    j["config"] = {
        {"vocab_size", cfg.vocab_size},   {"d_model", cfg.d_model},
        {"n_layers", cfg.n_layers},       {"context_len", cfg.context_len},
        {"seed", cfg.seed},               {"lora_rank", cfg.lora_rank},
        {"lora_alpha", cfg.lora_alpha},   {"lora_dropout", cfg.lora_dropout},
    };
    j["embedding"] = tensor_to_json(model.embedding());
    static const char* names[4] = {"q", "k", "v", "o"};
    json layer;
    for (int p = 0; p < 4; ++p) {
        const LoraLayer& l = model.lora(static_cast<Proj>(p));
        layer[names[p]] = {{"w0", tensor_to_json(l.base_weight())},
                           {"a", tensor_to_json(l.a())},
                           {"b", tensor_to_json(l.b())}};
    }
    j["layers"] = json::array({layer});

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("save_model: cannot open " + path);
    out << j.dump(1) << "\n";
    if (!out) throw ValidationError("save_model: write failed for " + path);
}

AgentModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("load_model: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("load_model: malformed JSON in " + path + ": " + e.what());
    }
    if (j.value("format", "") != "roleclarity-model") {
        throw ValidationError("load_model: not a model file: " + path);
    }
    if (j.value("format_version", 0) != 1) {
        throw ValidationError("load_model: unsupported format version");
    }
    const json& jc = j.at("config");
    ModelConfig cfg;
    cfg.vocab_size = jc.at("vocab_size").get<std::size_t>();
    cfg.d_model = jc.at("d_model").get<std::size_t>();
    cfg.n_layers = jc.at("n_layers").get<std::size_t>();
    cfg.context_len = jc.at("context_len").get<std::size_t>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();
    cfg.lora_rank = jc.at("lora_rank").get<std::size_t>();
    cfg.lora_alpha = jc.at("lora_alpha").get<double>();
    cfg.lora_dropout = jc.at("lora_dropout").get<double>();

    Tensor embedding = tensor_from_json(j.at("embedding"));
    const json& layer = j.at("layers").at(0);
    static const char* names[4] = {"q", "k", "v", "o"};
    std::vector<LoraLayer> lora;
    for (int p = 0; p < 4; ++p) {
        const json& jl = layer.at(names[p]);
        LoraLayer::Apply mode = (static_cast<Proj>(p) == Proj::kKey)
                                    ? LoraLayer::Apply::kCols
                                    : LoraLayer::Apply::kRows;
        lora.emplace_back(tensor_from_json(jl.at("w0")), tensor_from_json(jl.at("a")),
                          tensor_from_json(jl.at("b")), cfg.lora_alpha, cfg.lora_dropout, mode);
    }
    return AgentModel(AgentModel::FromParts{}, cfg, std::move(embedding), std::move(lora),
                      j.value("merged", false));
}

}  // namespace roleclarity
