#include "roleclarity/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "roleclarity/metrics.hpp"

namespace roleclarity {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lambda < 0.0) throw ValidationError("train config: lambda must be >= 0");
    if (!(lr > 0.0)) throw ValidationError("train config: learning rate must be positive");
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (checkpoint_every < 1) throw ValidationError("train config: checkpoint_every must be >= 1");
    if (!(tau > 0.0)) throw ValidationError("train config: tau must be positive");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ValidationError("train config: momentum must lie in [0,1)");
    }
}

json TrainConfig::to_json() const {
    return json{{"lambda", lambda},
                {"lr", lr},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"checkpoint_every", checkpoint_every},
                {"validation_size", validation_size},
                {"seed", seed},
                {"reduction", reduction == Reduction::kSum ? "sum" : "mean"},
                {"tau", tau},
                {"momentum", momentum}};
}

double total_loss(double mle, double rc, double lambda) {
    if (!std::isfinite(mle) || !std::isfinite(rc)) {
        throw ValidationError("total_loss: non-finite inputs");
    }
    if (lambda < 0.0) throw ValidationError("total_loss: lambda must be >= 0");
    return mle + lambda * rc;
}

json TrainReport::to_json() const {
    json steps_json = json::array();
    for (const auto& s : steps) {
        steps_json.push_back({{"step", s.step},
                              {"epoch", s.epoch},
                              {"samples", s.samples},
                              {"total", s.total},
                              {"mle", s.mle},
                              {"rc", s.rc},
                              {"softmax_rows", s.softmax_rows}});
    }
    json ckpts = json::array();
    for (const auto& c : checkpoints) {
        ckpts.push_back({{"step", c.step}, {"file", c.file}, {"val_loss", c.val_loss}});
    }
    return json{{"agent_role", agent_role},
                {"own_index", own_index},
                {"seed", seed},
                {"train_size", train_size},
                {"validation_size", validation_size},
                {"steps", steps_json},
                {"epoch_clarity", epoch_clarity},
                {"checkpoints", ckpts},
                {"selected_checkpoint", selected_checkpoint},
                {"selected_step", selected_step},
                {"frozen_hash_start", frozen_hash_start},
                {"frozen_hash_end", frozen_hash_end},
                {"diverged", diverged},
                {"config", config_echo}};
}

namespace {

struct SampleView {
    const Trajectory* trajectory;
    Tokens tokens;  // own-message byte stream, truncated
};

std::vector<SampleView> prepare_samples(const std::vector<Trajectory>& trajs,
                                        const AgentModel& model, const std::string& agent_role) {
    std::vector<SampleView> out;
    for (const auto& t : trajs) {
        SampleView view;
        view.trajectory = &t;
        std::string text =
            trajectory_text_for_role(t, agent_role, model.config().context_len);
        view.tokens = model.tokenize(text);
        if (view.tokens.size() < 2) {
            throw ValidationError("train: trajectory " + t.run_id +
                                  " is too short to model (needs >= 2 bytes)");
        }
        out.push_back(std::move(view));
    }
    return out;
}

std::vector<double> softmax_row_of(const Tensor& behavior, const std::vector<Tensor>& roles,
                                   double tau) {
    std::vector<double> sims(roles.size());
    for (std::size_t j = 0; j < roles.size(); ++j) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < behavior.size(); ++i) {
            dot += behavior.data()[i] * roles[j].data()[i];
            sa += behavior.data()[i] * behavior.data()[i];
            sb += roles[j].data()[i] * roles[j].data()[i];
        }
        sims[j] = dot / (std::sqrt(sa) * std::sqrt(sb));
    }
    Tensor p = normalize_assignments(Tensor({1, roles.size()}, sims), tau);
    return p.data();
}

double objective_of_sample(const AgentModel& model, const SampleView& sample,
                           const std::vector<Tensor>& role_embeddings, std::size_t own_index,
                           const TrainConfig& config) {
    Tape tape;
    ModelBinding binding = model.bind(tape, false);
    ForwardOptions opts;  // eval mode
    std::vector<Tensor> role_nodes;
    role_nodes.reserve(role_embeddings.size());
    for (const auto& r : role_embeddings) role_nodes.push_back(tape.constant(r));

    Tensor b = embed_text_node(model, binding, sample.tokens, opts);
    double rc = rc_row_loss_node(tape, b, role_nodes, own_index, config.tau).value();

    std::span<const std::uint32_t> all(sample.tokens);
    Tensor nll = model.build_nll(binding, all.subspan(0, 1), all.subspan(1), opts);
    double mle = nll.value();
    if (config.reduction == Reduction::kMean) {
        mle /= static_cast<double>(sample.tokens.size() - 1);
    }
    return total_loss(mle, rc, config.lambda);
}

double mean_objective(const AgentModel& model, const std::vector<SampleView>& samples,
                      const std::vector<Tensor>& role_embeddings, std::size_t own_index,
                      const TrainConfig& config) {
    double total = 0.0;
    for (const auto& s : samples) {
        total += objective_of_sample(model, s, role_embeddings, own_index, config);
    }
    return total / static_cast<double>(samples.size());
}

std::string checkpoint_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step-%06zu.json", step);
    return buf;
}

struct MomentumState {
    std::vector<double> a[4];
    std::vector<double> b[4];
};

void apply_update(AgentModel& model, const ModelBinding& binding, const GradientMap& grads,
                  const TrainConfig& config, MomentumState& momentum) {
    for (int p = 0; p < 4; ++p) {
        LoraLayer& layer = model.lora(static_cast<Proj>(p));
        const Tensor& a_node = binding.proj[p].a;
        const Tensor& b_node = binding.proj[p].b;

        auto updated = [&](const Tensor& node, const Tensor& stored,
                           std::vector<double>& velocity) {
            std::vector<double> next = stored.data();
            if (!grads.contains(node)) return Tensor(stored.shape(), next);
            const Tensor& g = grads.grad(node);
            if (config.momentum > 0.0) {
                if (velocity.size() != next.size()) velocity.assign(next.size(), 0.0);
                for (std::size_t i = 0; i < next.size(); ++i) {
                    velocity[i] = config.momentum * velocity[i] + g.data()[i];
                    next[i] -= config.lr * velocity[i];
                }
            } else {
                for (std::size_t i = 0; i < next.size(); ++i) {
                    next[i] -= config.lr * g.data()[i];
                }
            }
            return Tensor(stored.shape(), next);
        };

        Tensor new_a = updated(a_node, layer.stored_a(), momentum.a[p]);
        Tensor new_b = updated(b_node, layer.stored_b(), momentum.b[p]);
        layer.set_stored_factors(std::move(new_a), std::move(new_b));
    }
}

}  // namespace

double validation_loss(const AgentModel& model, const std::vector<Trajectory>& samples,
                       const RoleRegistry& roles, const std::string& agent_role,
                       const TrainConfig& config) {
    if (samples.empty()) throw ValidationError("validation_loss: empty sample set");
    std::size_t own_index = roles.index_of(agent_role);
    RoleEmbeddingCache cache(model, roles);
    std::vector<SampleView> views = prepare_samples(samples, model, agent_role);
    return mean_objective(model, views, cache.embeddings(), own_index, config);
}

std::string select_checkpoint(const std::vector<std::string>& checkpoint_files,
                              const std::vector<Trajectory>& validation,
                              const RoleRegistry& roles, const std::string& agent_role,
                              const TrainConfig& config) {
    if (checkpoint_files.empty()) throw ValidationError("select_checkpoint: no checkpoints");
    if (validation.empty()) throw ValidationError("select_checkpoint: empty validation set");
    std::string best;
    double best_loss = 0.0;
    for (const auto& file : checkpoint_files) {
        AgentModel model = AgentModel::load(file);
        double loss = validation_loss(model, validation, roles, agent_role, config);
        if (best.empty() || loss < best_loss) {  // strict <: ties keep the earliest
            best = file;
            best_loss = loss;
        }
    }
    return best;
}

TrainResult train_agent(const AgentModel& base, const std::vector<Trajectory>& dataset,
                        const RoleRegistry& roles, const std::string& agent_role,
                        const TrainConfig& config, const std::string& checkpoint_dir) {
    config.validate();
    if (dataset.empty()) throw ValidationError("train_agent: empty dataset");
    std::size_t own_index = roles.index_of(agent_role);  // throws when missing
    std::filesystem::create_directories(checkpoint_dir);

    SplitResult split = split_dataset(dataset, config.validation_size, config.seed);

    AgentModel model = base;
    TrainReport report;
    report.agent_role = agent_role;
    report.own_index = own_index;
    report.seed = config.seed;
    report.train_size = split.train.size();
    report.validation_size = split.validation.size();
    report.config_echo = config.to_json();
    report.frozen_hash_start = hex64(model.frozen_hash());

    // Role embeddings from the frozen base, cached once (Algorithm lines 3-6).
    RoleEmbeddingCache role_cache(model, roles);
    const std::vector<Tensor>& role_embeddings = role_cache.embeddings();

    std::vector<SampleView> train_views = prepare_samples(split.train, model, agent_role);
    std::vector<SampleView> val_views = prepare_samples(split.validation, model, agent_role);

    ClarityConfig clarity_cfg;
    clarity_cfg.tau = config.tau;
    auto epoch_clarity_now = [&]() {
        return corpus_clarity(split.train, roles, model, clarity_cfg, true).mean_score;
    };
    report.epoch_clarity.push_back(epoch_clarity_now());

    SplitMix64 rng(config.seed ^ 0x7261696e5f726eULL);  // dropout stream
    MomentumState momentum;
    std::size_t step = 0;
    std::size_t last_ckpt_step = 0;

    auto save_checkpoint = [&](std::size_t at_step) {
        std::string name = checkpoint_name(at_step);
        std::string path = (std::filesystem::path(checkpoint_dir) / name).string();
        model.save(path);
        double vloss = val_views.empty()
                           ? 0.0
                           : mean_objective(model, val_views, role_embeddings, own_index, config);
        report.checkpoints.push_back({at_step, name, vloss});
        last_ckpt_step = at_step;
    };

    bool aborted = false;
    for (std::size_t epoch = 1; epoch <= config.epochs && !aborted; ++epoch) {
        for (std::size_t start = 0; start < train_views.size() && !aborted;
             start += config.batch_size) {
            std::size_t end = std::min(start + config.batch_size, train_views.size());
            try {
                Tape tape;
                ModelBinding binding = model.bind(tape, true);
                std::vector<Tensor> role_nodes;
                role_nodes.reserve(role_embeddings.size());
                for (const auto& r : role_embeddings) role_nodes.push_back(tape.constant(r));

                ForwardOptions train_opts;
                train_opts.training = true;
                train_opts.dropout_rng = &rng;

                Tensor nll_acc, rc_acc;
                std::size_t target_tokens = 0;
                StepRecord record;
                for (std::size_t i = start; i < end; ++i) {
                    const SampleView& sample = train_views[i];
                    Tensor b = embed_text_node(model, binding, sample.tokens, train_opts);
                    Tensor rc_i =
                        rc_row_loss_node(tape, b, role_nodes, own_index, config.tau);
                    std::span<const std::uint32_t> all(sample.tokens);
                    Tensor nll_i = model.build_nll(binding, all.subspan(0, 1), all.subspan(1),
                                                   train_opts);
                    target_tokens += sample.tokens.size() - 1;
                    nll_acc = (i == start) ? nll_i : tape.add(nll_acc, nll_i);
                    rc_acc = (i == start) ? rc_i : tape.add(rc_acc, rc_i);
                    record.softmax_rows.push_back(
                        softmax_row_of(Tensor(b.shape(), b.data()), role_embeddings,
                                       config.tau));
                }
                std::size_t n_samples = end - start;
                if (config.reduction == Reduction::kMean) {
                    nll_acc = tape.scalar_multiply(nll_acc,
                                                   1.0 / static_cast<double>(target_tokens));
                }
                rc_acc = tape.scalar_multiply(rc_acc, 1.0 / static_cast<double>(n_samples));
                Tensor total_node =
                    tape.add(nll_acc, tape.scalar_multiply(rc_acc, config.lambda));

                GradientMap grads = tape.backward(total_node);
                apply_update(model, binding, grads, config, momentum);

                ++step;
                record.step = step;
                record.epoch = epoch;
                record.samples = n_samples;
                record.mle = nll_acc.value();
                record.rc = rc_acc.value();
                record.total = total_node.value();
                report.steps.push_back(std::move(record));

                if (step % config.checkpoint_every == 0) save_checkpoint(step);
            } catch (const NonFiniteError&) {
                report.diverged = true;
                aborted = true;
            }
        }
        if (!aborted) report.epoch_clarity.push_back(epoch_clarity_now());
    }

    if (!aborted && step > 0 && last_ckpt_step != step) save_checkpoint(step);
    if (report.checkpoints.empty() && !aborted) {
        // zero-step run (empty train split); keep the starting state
        save_checkpoint(0);
    }
    if (report.checkpoints.empty()) {
        throw ValidationError("train_agent: diverged before the first checkpoint");
    }

    // validation-loss argmin; without a validation set keep the newest
    std::size_t best = 0;
    for (std::size_t i = 1; i < report.checkpoints.size(); ++i) {
        if (val_views.empty()) {
            best = i;
        } else if (report.checkpoints[i].val_loss < report.checkpoints[best].val_loss) {
            best = i;
        }
    }
    report.selected_checkpoint = report.checkpoints[best].file;
    report.selected_step = report.checkpoints[best].step;

    report.frozen_hash_end = hex64(model.frozen_hash());
    if (report.frozen_hash_end != report.frozen_hash_start) {
        throw std::logic_error("train_agent: frozen parameters changed during training");
    }

    json manifest;
    manifest["selected"] = report.selected_checkpoint;
    manifest["selected_step"] = report.selected_step;
    json ckpts = json::array();
    for (const auto& c : report.checkpoints) {
        ckpts.push_back({{"step", c.step}, {"file", c.file}, {"val_loss", c.val_loss}});
    }
    manifest["checkpoints"] = ckpts;
    manifest["agent_role"] = agent_role;
    manifest["diverged"] = report.diverged;
    std::ofstream mf((std::filesystem::path(checkpoint_dir) / "manifest.json").string(),
                     std::ios::binary);
    if (!mf) throw ValidationError("train_agent: cannot write manifest");
    mf << manifest.dump(1) << "\n";

    TrainResult result{std::move(model), std::move(report)};
    if (result.report.diverged) {
        // retain the last finite checkpoint as the result state
        std::string path = (std::filesystem::path(checkpoint_dir) /
                            result.report.checkpoints.back().file)
                               .string();
        result.model = AgentModel::load(path);
    }
    return result;
}

}  // namespace roleclarity
