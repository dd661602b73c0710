#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "roleclarity/clarity.hpp"

using namespace roleclarity;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context_len = 128;
    cfg.seed = seed;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.lora_dropout = 0.0;
    return cfg;
}

Message make_msg(const std::string& run, int round, const std::string& role,
                 const std::string& content) {
    Message m;
    m.run_id = run;
    m.task_id = run;
    m.round = round;
    m.agent_id = role;
    m.role_id = role;
    m.content = content;
    m.terminated = content.find("<INFO>") != std::string::npos;
    return m;
}

Tensor random_stochastic(std::size_t n, SplitMix64& rng) {
    std::vector<double> p(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            p[i * n + j] = 0.05 + rng.uniform01();
            total += p[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= total;
    }
    return Tensor({n, n}, std::move(p));
}

}  // namespace

TEST_CASE("embed_text is mean pooling") {
    // hand-checkable via a hidden-state matrix; use the arithmetic directly
    // through a real encoder: single token equals that token's state.
    AgentModel model(tiny_config());
    Tokens one{65};
    Tensor h = model.encode_hidden_states(one);
    Tensor e = embed_text(model, one);
    for (std::size_t j = 0; j < e.size(); ++j) CHECK(e.at(j) == h.at(0, j));

    CHECK_THROWS_AS(embed_text(model, Tokens{}), ValidationError);
    // determinism
    Tokens text = model.tokenize("clarity embedding");
    CHECK(embed_text(model, text).data() == embed_text(model, text).data());
}

TEST_CASE("mean pooling arithmetic: [[1,2],[3,4]] -> [2,3]") {
    // checked at the primitive level; the encoder path reuses it
    Tape tape;
    Tensor h = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Tensor mean = tape.row_mean(h);
    CHECK(mean.at(0) == 2.0);
    CHECK(mean.at(1) == 3.0);
}

TEST_CASE("trajectory_text concatenates own messages with the separator") {
    Trajectory t;
    t.run_id = "r";
    t.rounds = 2;
    t.messages = {make_msg("r", 1, "CEO", "alpha"), make_msg("r", 1, "CPO", "noise"),
                  make_msg("r", 2, "CEO", "beta")};
    std::string text = trajectory_text(t, "CEO", 512);
    CHECK(text == std::string("alpha") + kMessageSeparator + "beta");
    CHECK_THROWS_AS(trajectory_text(t, "CTO", 512), ValidationError);

    // truncation keeps the most recent bytes
    std::string tail = trajectory_text(t, "CEO", 4);
    CHECK(tail == "beta");
}

TEST_CASE("embed_trajectory: one message equals embed_text; deterministic; order-sensitive") {
    AgentModel model(tiny_config(3));
    Trajectory one;
    one.run_id = "one";
    one.rounds = 1;
    one.messages = {make_msg("one", 1, "CEO", "single message body")};
    Tensor via_traj = embed_trajectory(model, one, "CEO");
    Tensor via_text = embed_text(model, std::string("single message body"));
    CHECK(via_traj.data() == via_text.data());

    Trajectory two;
    two.run_id = "two";
    two.rounds = 2;
    two.messages = {make_msg("two", 1, "CEO", "first part"),
                    make_msg("two", 2, "CEO", "second part")};
    Tensor fwd = embed_trajectory(model, two, "CEO");
    CHECK(fwd.data() == embed_trajectory(model, two, "CEO").data());

    Trajectory swapped = two;
    swapped.messages[0].content = "second part";
    swapped.messages[1].content = "first part";
    Tensor rev = embed_trajectory(model, swapped, "CEO");
    double diff = 0.0;
    for (std::size_t i = 0; i < fwd.size(); ++i) diff += std::abs(fwd.at(i) - rev.at(i));
    CHECK(diff > 1e-9);
}

TEST_CASE("assignment matrix hand values") {
    EmbeddingSet e;
    e.behavior_embeddings = {Tensor::row_vector({1, 0}), Tensor::row_vector({0, 1})};
    e.role_embeddings = {Tensor::row_vector({1, 0}), Tensor::row_vector({0, 1})};
    Tensor S = assignment_matrix(e);
    CHECK(S.at(0, 0) == doctest::Approx(1.0));
    CHECK(S.at(0, 1) == doctest::Approx(0.0));
    CHECK(S.at(1, 1) == doctest::Approx(1.0));

    EmbeddingSet hand;
    hand.behavior_embeddings = {Tensor::row_vector({1, 1})};
    hand.role_embeddings = {Tensor::row_vector({1, 0})};
    CHECK(assignment_matrix(hand).at(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));

    EmbeddingSet anti;
    anti.behavior_embeddings = {Tensor::row_vector({2, -1})};
    anti.role_embeddings = {Tensor::row_vector({-2, 1})};
    CHECK(assignment_matrix(anti).at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));

    EmbeddingSet zero;
    zero.behavior_embeddings = {Tensor::row_vector({0, 0})};
    zero.role_embeddings = {Tensor::row_vector({1, 0})};
    CHECK_THROWS_AS(assignment_matrix(zero), ValidationError);
}

TEST_CASE("normalize_assignments analytic fixtures") {
    Tensor I2({2, 2}, {1, 0, 0, 1});
    Tensor P = normalize_assignments(I2, 1.0);
    double e = std::exp(1.0);
    CHECK(P.at(0, 0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-12));
    CHECK(P.at(0, 0) == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(P.at(0, 1) == doctest::Approx(0.268941).epsilon(1e-6));

    Tensor Phalf = normalize_assignments(I2, 0.5);
    CHECK(Phalf.at(0, 0) == doctest::Approx(0.880797).epsilon(1e-6));

    Tensor constant_rows({3, 3}, std::vector<double>(9, 0.37));
    Tensor Pu = normalize_assignments(constant_rows, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(Pu.at(i, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(normalize_assignments(I2, 0.0), ValidationError);
}

TEST_CASE("clarity matrix hand values") {
    Tensor I3({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    AssignmentMatrices identity = clarity_matrix(I3);
    CHECK(identity.frob == 0.0);
    for (double v : identity.M.data()) CHECK(v == 0.0);

    Tensor U2({2, 2}, {0.5, 0.5, 0.5, 0.5});
    AssignmentMatrices uniform2 = clarity_matrix(U2);
    CHECK(uniform2.M.at(0, 0) == doctest::Approx(-0.5));
    CHECK(uniform2.M.at(0, 1) == doctest::Approx(0.5));
    CHECK(uniform2.frob == doctest::Approx(1.0).epsilon(1e-12));

    Tensor U3({3, 3}, std::vector<double>(9, 1.0 / 3.0));
    CHECK(clarity_matrix(U3).frob == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));

    Tensor bad({2, 2}, {0.9, 0.2, 0.5, 0.5});
    CHECK_THROWS_AS(clarity_matrix(bad), ValidationError);
}

TEST_CASE("is_role_clear boundary uses <=") {
    CHECK(is_role_clear(0.5, 0.6));
    CHECK_FALSE(is_role_clear(0.5, 0.4));
    CHECK(is_role_clear(0.5, 0.5));
    CHECK_THROWS_AS(is_role_clear(-0.1, 0.5), ValidationError);
    CHECK_THROWS_AS(is_role_clear(0.5, 0.0), ValidationError);
}

TEST_CASE("clarity score values and monotonicity") {
    CHECK(clarity_score(0.0) == 1.0);
    CHECK(clarity_score(1.0) == 0.5);
    CHECK(clarity_score(0.8769) == doctest::Approx(0.5328).epsilon(5e-5));
    double prev = clarity_score(0.0);
    for (double f = 0.1; f < 3.0; f += 0.1) {
        double cur = clarity_score(f);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("rc_regularizer values") {
    Tensor P = normalize_assignments(Tensor({2, 2}, {1, 0, 0, 1}), 1.0);
    CHECK(rc_regularizer(P) == doctest::Approx(0.313262).epsilon(1e-5));

    Tensor U3({3, 3}, std::vector<double>(9, 1.0 / 3.0));
    CHECK(rc_regularizer(U3) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    // near-one diagonal drives the loss to zero
    Tensor sharp({2, 2}, {1.0 - 1e-12, 1e-12, 1e-12, 1.0 - 1e-12});
    CHECK(rc_regularizer(sharp) == doctest::Approx(0.0).epsilon(1e-9));

    Tensor zero_diag({2, 2}, {0.0, 1.0, 1.0, 0.0});
    CHECK_THROWS_AS(rc_regularizer(zero_diag), ValidationError);
}

TEST_CASE("decomposition identity and monotonicity bound on random stochastic matrices") {
    SplitMix64 rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 2 + rng.below(7);
        Tensor P = random_stochastic(n, rng);
        AssignmentMatrices am = clarity_matrix(P);  // embeds the 1e-12 identity check
        double frob_sq = am.frob * am.frob;
        double bound = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double miss = 1.0 - P.at(i, i);
            bound += miss * miss;
        }
        CHECK(frob_sq <= 2.0 * bound + 1e-12);
    }
}

TEST_CASE("row-local monotonicity: raising the diagonal logit helps") {
    Tensor S({2, 2}, {0.3, 0.6, -0.2, 0.4});
    auto row_terms = [&](double s00) {
        Tensor s({2, 2}, {s00, 0.6, -0.2, 0.4});
        Tensor P = normalize_assignments(s, 1.0);
        AssignmentMatrices am = clarity_matrix(P);
        double row0 = 0.0;
        for (std::size_t j = 0; j < 2; ++j) row0 += am.M.at(0, j) * am.M.at(0, j);
        return std::pair<double, double>(row0, -std::log(P.at(0, 0)));
    };
    auto [row_lo, nll_lo] = row_terms(0.3);
    auto [row_hi, nll_hi] = row_terms(0.9);
    CHECK(row_hi < row_lo);
    CHECK(nll_hi < nll_lo);
}

TEST_CASE("n=1 degenerate case") {
    Tensor S({1, 1}, {0.8});
    Tensor P = normalize_assignments(S, 1.0);
    CHECK(P.at(0, 0) == 1.0);
    AssignmentMatrices am = clarity_matrix(P);
    CHECK(am.degenerate);
    CHECK(am.frob == 0.0);
    CHECK(clarity_score(am.frob) == 1.0);
}

TEST_CASE("rc gradient flows through behavior embeddings, not roles") {
    AgentModel model(tiny_config(8));
    Tape tape;
    ModelBinding binding = model.bind(tape, true);
    ForwardOptions opts;

    std::vector<Tensor> role_nodes;
    role_nodes.push_back(tape.constant(embed_text(model, std::string("role one text"),
                                                  ForwardOptions{.use_lora = false})));
    role_nodes.push_back(tape.constant(embed_text(model, std::string("role two text"),
                                                  ForwardOptions{.use_lora = false})));

    Tokens behavior = model.tokenize("behavior bytes here");
    Tensor b = embed_text_node(model, binding, behavior, opts);
    Tensor loss = rc_row_loss_node(tape, b, role_nodes, 0, 1.0);
    GradientMap grads = tape.backward(loss);
    for (int p = 0; p < 4; ++p) {
        CHECK(grads.contains(binding.proj[p].a));
        CHECK(grads.contains(binding.proj[p].b));
        CHECK_FALSE(grads.contains(binding.proj[p].w0));
    }
    for (const auto& r : role_nodes) CHECK_FALSE(grads.contains(r));
}

TEST_CASE("rc regularizer gradient matches finite differences through raw embeddings") {
    // x is the behavior embedding itself; role embeddings constant.
    SplitMix64 rng(5);
    std::vector<double> role1(6), role2(6), behav(6);
    for (auto& v : role1) v = rng.gaussian();
    for (auto& v : role2) v = rng.gaussian();
    for (auto& v : behav) v = rng.gaussian();
    Tensor r1 = Tensor::row_vector(role1);
    Tensor r2 = Tensor::row_vector(role2);

    double err = finite_diff_check(
        [&](Tape& t, const Tensor& x) {
            std::vector<Tensor> roles = {t.constant(r1), t.constant(r2)};
            return rc_row_loss_node(t, x, roles, 0, 0.7);
        },
        Tensor::row_vector(behav), 1e-5);
    CHECK(err <= 1e-4);
    CHECK(err <= 1e-7);  // raw-embedding path is smooth; expect better
}

TEST_CASE("scalar-composition softmax equals the matrix softmax row") {
    // the training-path row loss must agree with the eval-path matrices
    Tensor b = Tensor::row_vector({0.3, -0.1, 0.9});
    Tensor r1 = Tensor::row_vector({0.5, 0.5, 0.1});
    Tensor r2 = Tensor::row_vector({-0.2, 0.8, 0.3});

    EmbeddingSet e;
    e.behavior_embeddings = {b, b};
    e.role_embeddings = {r1, r2};
    AssignmentMatrices am = compute_assignment(e, 0.8);

    Tape tape;
    std::vector<Tensor> roles = {tape.constant(r1), tape.constant(r2)};
    Tensor loss = rc_row_loss_node(tape, tape.constant(b), roles, 0, 0.8);
    CHECK(loss.value() == doctest::Approx(-std::log(am.P.at(0, 0))).epsilon(1e-12));

    std::vector<Tensor> behaviors = {tape.constant(b), tape.constant(b)};
    Tensor reg = rc_regularizer_node(tape, behaviors, roles, 0.8);
    CHECK(reg.value() == doctest::Approx(rc_regularizer(am.P)).epsilon(1e-12));
}
