#include "roleclarity/selfcheck.hpp"

#include <cmath>
#include <sstream>

#include "roleclarity/clarity.hpp"
#include "roleclarity/model.hpp"
#include "roleclarity/tensor.hpp"
#include "roleclarity/trajectory.hpp"

namespace roleclarity {

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, SplitMix64& rng, double scale = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) v = rng.gaussian(0.0, scale);
    return Tensor(std::move(shape), std::move(data));
}

/// finite_diff_check with an optional corruption of the analytic side,
/// so the negative control can prove the suite detects bad adjoints.
double checked_error(const TapeFn& f, const Tensor& x, bool corrupt) {
    Tape tape;
    Tensor xl = tape.leaf(Tensor(x.shape(), x.data(), true));
    Tensor loss = f(tape, xl);
    GradientMap grads = tape.backward(loss);
    std::vector<double> analytic(x.size(), 0.0);
    if (grads.contains(xl)) analytic = grads.grad(xl).data();
    if (corrupt && !analytic.empty()) analytic[0] += 0.5;

    auto eval_at = [&](const std::vector<double>& data) {
        Tape t;
        Tensor out = f(t, t.leaf(Tensor(x.shape(), data, false)));
        return out.value();
    };
    const double h = 1e-5;
    double worst = 0.0;
    std::vector<double> probe = x.data();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        double orig = probe[i];
        probe[i] = orig + h;
        double up = eval_at(probe);
        probe[i] = orig - h;
        double down = eval_at(probe);
        probe[i] = orig;
        double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) /
                                    std::max(1.0, std::abs(numeric)));
    }
    return worst;
}

SuiteResult gradient_suite(const SelfCheckOptions& options) {
    SuiteResult result{"gradient", true, ""};
    double worst_primitive = 0.0;
    std::size_t primitive_seeds = options.seeds * 5;

    for (std::uint64_t seed = 1; seed <= primitive_seeds && result.passed; ++seed) {
        SplitMix64 rng(seed);
        std::size_t m = 1 + rng.below(8);
        std::size_t n = 1 + rng.below(8);
        std::size_t k = 1 + rng.below(8);
        Tensor A = random_tensor({m, k}, rng);
        Tensor B = random_tensor({k, n}, rng);
        Tensor X = random_tensor({m, n}, rng);
        std::vector<double> pos(m * n);
        for (auto& v : pos) v = 0.2 + rng.uniform01() * 3.0;
        Tensor Pos({m, n}, pos);
        Tensor u = random_tensor({n}, rng);
        Tensor v = random_tensor({n}, rng);
        double tau = 0.3 + rng.uniform01() * 2.0;
        bool corrupt = options.inject_gradient_bug && seed == 1;

        std::vector<std::pair<const char*, double>> errs;
        errs.emplace_back("matmul", checked_error(
            [&](Tape& t, const Tensor& x) {
                return t.sum(t.square(t.matmul(x, t.constant(B))));
            }, A, corrupt));
        errs.emplace_back("add/subtract", checked_error(
            [&](Tape& t, const Tensor& x) {
                return t.sum(t.square(t.subtract(t.add(x, t.constant(X)), t.constant(Pos))));
            }, X, corrupt));
        errs.emplace_back("scalar_multiply", checked_error(
            [&](Tape& t, const Tensor& x) { return t.sum(t.square(t.scalar_multiply(x, 1.7))); },
            X, corrupt));
        errs.emplace_back("exp", checked_error(
            [&](Tape& t, const Tensor& x) { return t.sum(t.square(t.exp(x))); }, X, corrupt));
        errs.emplace_back("log", checked_error(
            [&](Tape& t, const Tensor& x) { return t.sum(t.square(t.log(x))); }, Pos, corrupt));
        errs.emplace_back("row_mean", checked_error(
            [&](Tape& t, const Tensor& x) { return t.sum(t.square(t.row_mean(x))); }, X,
            corrupt));
        errs.emplace_back("row_max_subtract", checked_error(
            [&](Tape& t, const Tensor& x) { return t.sum(t.square(t.row_max_subtract(x))); }, X,
            corrupt));
        errs.emplace_back("sum/square", checked_error(
            [&](Tape& t, const Tensor& x) { return t.square(t.sum(x)); }, X, corrupt));
        errs.emplace_back("l2_norm", checked_error(
            [&](Tape& t, const Tensor& x) { return t.l2_norm(x); }, X, corrupt));
        errs.emplace_back("cosine_similarity", checked_error(
            [&](Tape& t, const Tensor& x) {
                return t.cosine_similarity(x, t.constant(v));
            }, u, corrupt));
        errs.emplace_back("row_softmax", checked_error(
            [&](Tape& t, const Tensor& x) {
                return t.sum(t.square(t.row_softmax(x, tau)));
            }, X, corrupt));

        for (const auto& [name, err] : errs) {
            worst_primitive = std::max(worst_primitive, err);
            if (err > 1e-6) {
                result.passed = false;
                std::ostringstream msg;
                msg << "primitive adjoint '" << name << "' off by " << err << " at seed "
                    << seed;
                result.detail = msg.str();
                break;
            }
        }
    }

    // end-to-end: total objective (nll + lambda * rc) through encoder,
    // LoRA and the regularizer, differentiated per adapter factor
    double worst_e2e = 0.0;
    RoleRegistry roles(
        {{"CEO", "vision, strategy, final call"}, {"CPO", "requirements, backlog, scope"}});
    for (std::uint64_t seed = 1; seed <= options.seeds && result.passed; ++seed) {
        ModelConfig cfg;
        cfg.d_model = 8;
        cfg.context_len = 48;
        cfg.seed = seed;
        cfg.lora_rank = 2;
        cfg.lora_alpha = 2.0;
        cfg.lora_dropout = 0.0;
        AgentModel model(cfg);

        std::vector<Tensor> role_embeddings;
        ForwardOptions base_opts;
        base_opts.use_lora = false;
        for (const auto& role : roles.roles()) {
            role_embeddings.push_back(embed_text(model, role.description, base_opts));
        }

        SplitMix64 trng(seed * 31 + 7);
        std::string text = "agent turn ";
        for (int i = 0; i < 8; ++i) {
            text.push_back(static_cast<char>('a' + trng.below(26)));
        }
        Tokens tokens = model.tokenize(text);
        const double lambda = 0.1;
        const double tau = 1.0;

        // push the adapters off the zero init so both factors matter
        SplitMix64 frng(seed * 17 + 3);
        for (int p = 0; p < 4; ++p) {
            LoraLayer& layer = model.lora(static_cast<Proj>(p));
            std::vector<double> bdata(layer.stored_b().size());
            for (auto& x : bdata) x = frng.gaussian(0.0, 0.05);
            layer.set_stored_factors(layer.stored_a(),
                                     Tensor(layer.stored_b().shape(), bdata));
        }

        for (int p = 0; p < 4 && result.passed; ++p) {
            for (int which = 0; which < 2 && result.passed; ++which) {
                const LoraLayer& target = model.lora(static_cast<Proj>(p));
                Tensor x0 = which == 0 ? target.stored_a() : target.stored_b();

                auto objective = [&](Tape& t, const Tensor& xl) {
                    ModelBinding binding;
                    binding.tape = &t;
                    for (int q = 0; q < 4; ++q) {
                        const LoraLayer& layer = model.lora(static_cast<Proj>(q));
                        binding.proj[q].w0 = t.constant(layer.stored_w0());
                        binding.proj[q].a = (q == p && which == 0)
                                                ? xl
                                                : t.constant(layer.stored_a());
                        binding.proj[q].b = (q == p && which == 1)
                                                ? xl
                                                : t.constant(layer.stored_b());
                    }
                    binding.head = t.constant(Tensor({cfg.d_model, cfg.vocab_size},
                                                     [&] {
                                                         Tensor e = model.embedding();
                                                         std::vector<double> tr(e.size());
                                                         for (std::size_t i = 0;
                                                              i < cfg.vocab_size; ++i) {
                                                             for (std::size_t j = 0;
                                                                  j < cfg.d_model; ++j) {
                                                                 tr[j * cfg.vocab_size + i] =
                                                                     e.at(i, j);
                                                             }
                                                         }
                                                         return tr;
                                                     }()));
                    ForwardOptions opts;  // eval mode: deterministic function
                    std::vector<Tensor> role_nodes;
                    for (const auto& r : role_embeddings) role_nodes.push_back(t.constant(r));
                    Tensor b = embed_text_node(model, binding, tokens, opts);
                    Tensor rc = rc_row_loss_node(t, b, role_nodes, 0, tau);
                    std::span<const std::uint32_t> all(tokens);
                    Tensor nll =
                        model.build_nll(binding, all.subspan(0, 1), all.subspan(1), opts);
                    return t.add(nll, t.scalar_multiply(rc, lambda));
                };

                double err = checked_error(objective, x0, false);
                worst_e2e = std::max(worst_e2e, err);
                if (err > 1e-4) {
                    result.passed = false;
                    std::ostringstream msg;
                    msg << "end-to-end objective gradient off by " << err << " at seed " << seed;
                    result.detail = msg.str();
                }
            }
        }

        // frozen parameters receive no gradient
        if (result.passed) {
            Tape t;
            ModelBinding binding = model.bind(t, true);
            std::vector<Tensor> role_nodes;
            for (const auto& r : role_embeddings) role_nodes.push_back(t.constant(r));
            ForwardOptions opts;
            Tensor b = embed_text_node(model, binding, tokens, opts);
            Tensor rc = rc_row_loss_node(t, b, role_nodes, 0, tau);
            std::span<const std::uint32_t> all(tokens);
            Tensor nll = model.build_nll(binding, all.subspan(0, 1), all.subspan(1), opts);
            Tensor totalv = t.add(nll, t.scalar_multiply(rc, lambda));
            GradientMap grads = t.backward(totalv);
            bool frozen_clean = !grads.contains(binding.head);
            for (int q = 0; q < 4; ++q) {
                frozen_clean = frozen_clean && !grads.contains(binding.proj[q].w0);
            }
            for (const auto& r : role_nodes) frozen_clean = frozen_clean && !grads.contains(r);
            if (!frozen_clean) {
                result.passed = false;
                result.detail = "gradient leaked into frozen parameters";
            }
        }
    }

    if (result.passed) {
        std::ostringstream msg;
        msg << "primitive max rel err " << worst_primitive << ", end-to-end max rel err "
            << worst_e2e;
        result.detail = msg.str();
    }
    return result;
}

Tensor random_stochastic(std::size_t n, SplitMix64& rng) {
    std::vector<double> p(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            p[i * n + j] = 0.01 + rng.uniform01();
            total += p[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= total;
    }
    return Tensor({n, n}, std::move(p));
}

SuiteResult decomposition_suite(std::size_t trials) {
    SuiteResult result{"decomposition", true, ""};
    SplitMix64 rng(20260809);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        std::size_t n = 2 + rng.below(7);
        Tensor P = random_stochastic(n, rng);
        double direct_sq = 0.0, off_sq = 0.0, diag_sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double m = P.at(i, j) - (i == j ? 1.0 : 0.0);
                direct_sq += m * m;
                if (i == j) {
                    diag_sq += m * m;
                } else {
                    off_sq += P.at(i, j) * P.at(i, j);
                }
            }
        }
        double gap = std::abs(direct_sq - (off_sq + diag_sq));
        worst = std::max(worst, gap);
        if (gap > 1e-12) {
            result.passed = false;
            result.detail = "decomposition identity broke at trial " + std::to_string(trial);
            return result;
        }
    }
    std::ostringstream msg;
    msg << trials << " matrices, max identity gap " << worst;
    result.detail = msg.str();
    return result;
}

SuiteResult bound_suite(std::size_t trials) {
    SuiteResult result{"bound", true, ""};
    SplitMix64 rng(777);
    std::size_t violations = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        std::size_t n = 2 + rng.below(7);
        Tensor P = random_stochastic(n, rng);
        AssignmentMatrices am = clarity_matrix(P);
        double bound = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double miss = 1.0 - P.at(i, i);
            bound += miss * miss;
        }
        if (am.frob * am.frob > 2.0 * bound + 1e-12) ++violations;
    }
    if (violations > 0) {
        result.passed = false;
        result.detail = std::to_string(violations) + " bound violations";
    } else {
        result.detail = std::to_string(trials) + " matrices, zero violations";
    }
    return result;
}

SuiteResult merge_suite() {
    SuiteResult result{"merge-equivalence", true, ""};
    SplitMix64 rng(4242);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t d = 3 + rng.below(8);
        std::size_t r = 1 + rng.below(std::min<std::size_t>(d - 1, 3));
        LoraLayer::Apply mode =
            trial % 2 == 0 ? LoraLayer::Apply::kRows : LoraLayer::Apply::kCols;
        LoraLayer seeded(d, d, r, 1.0 + rng.uniform01() * 8.0, 0.0, mode, rng);
        std::vector<double> av(r * d), bv(d * r);
        for (auto& x : av) x = rng.gaussian(0.0, 0.4);
        for (auto& x : bv) x = rng.gaussian(0.0, 0.4);
        LoraLayer layer(seeded.base_weight(), Tensor({r, d}, av), Tensor({d, r}, bv),
                        seeded.alpha(), 0.0, mode);
        std::vector<double> xv(d);
        for (auto& x : xv) x = rng.gaussian();
        Tensor probe = Tensor::row_vector(xv);
        Tensor unmerged = lora_forward(layer, probe);
        Tensor merged = layer.merged_weight();
        for (std::size_t i = 0; i < d; ++i) {
            double expect = 0.0;
            for (std::size_t j = 0; j < d; ++j) expect += merged.at(i, j) * probe.at(j);
            worst = std::max(worst, std::abs(expect - unmerged.at(i)));
        }
    }
    if (worst > 1e-10) {
        result.passed = false;
        std::ostringstream msg;
        msg << "merge deviation " << worst << " exceeds 1e-10";
        result.detail = msg.str();
        return result;
    }

    // zero-init equivalence at the model level, bit for bit
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context_len = 64;
    cfg.seed = 99;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.lora_dropout = 0.0;
    AgentModel model(cfg);
    Tokens toks = model.tokenize("zero-init adapters are invisible");
    Tensor with_lora = model.forward_logits(toks);
    Tape tape;
    ModelBinding binding = model.bind(tape, false);
    ForwardOptions opts;
    opts.use_lora = false;
    ForwardResult base = model.build_forward(binding, toks, opts);
    if (with_lora.data() != base.logits.data()) {
        result.passed = false;
        result.detail = "zero-initialized adapters changed the base outputs";
        return result;
    }
    std::ostringstream msg;
    msg << "1000 probes, max merge deviation " << worst << "; zero-init bit-exact";
    result.detail = msg.str();
    return result;
}

}  // namespace

std::vector<SuiteResult> run_selfcheck(const SelfCheckOptions& options) {
    std::vector<SuiteResult> results;
    results.push_back(gradient_suite(options));
    results.push_back(decomposition_suite(1000));
    results.push_back(bound_suite(1000));
    results.push_back(merge_suite());
    return results;
}

bool all_passed(const std::vector<SuiteResult>& results) {
    for (const auto& r : results) {
        if (!r.passed) return false;
    }
    return true;
}

}  // namespace roleclarity
