#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "roleclarity/metrics.hpp"

using namespace roleclarity;

namespace {

ModelConfig metrics_config(std::uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.context_len = 96;
    cfg.seed = seed;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.lora_dropout = 0.0;
    return cfg;
}

RoleRegistry two_roles() {
    return RoleRegistry(
        {{"CEO", "Sets company vision, approves strategy, gives the final greenlight."},
         {"CPO", "Writes product requirements, owns scope, orders the feature backlog."}});
}

Message make_msg(const std::string& run, int round, const std::string& role,
                 const std::string& content, const std::string& subset = "") {
    Message m;
    m.run_id = run;
    m.task_id = run;
    m.round = round;
    m.agent_id = role;
    m.role_id = role;
    m.content = content;
    m.terminated = content.find("<INFO>") != std::string::npos;
    if (!subset.empty()) m.extra["subset"] = subset;
    return m;
}

Trajectory compliant_traj(const std::string& run, const std::string& subset = "") {
    Trajectory t;
    t.run_id = run;
    t.rounds = 2;
    t.messages = {make_msg(run, 1, "CEO", "We set direction for " + run, subset),
                  make_msg(run, 1, "CPO", "Scoping requirements for " + run, subset),
                  make_msg(run, 2, "CEO", "Go ahead. <INFO>", subset),
                  make_msg(run, 2, "CPO", "Locked. <INFO>", subset)};
    return t;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

FilterRule cpo_rule() {
    FilterRule rule;
    rule.required_agents = {"CPO"};
    return rule;
}

}  // namespace

TEST_CASE("overstep_rate arithmetic matches published totals") {
    CHECK(overstep_rate(42, 500) == 0.084);
    CHECK(overstep_rate(0, 500) == 0.0);
    CHECK(overstep_rate(217, 500) == 0.434);
    CHECK_THROWS_AS(overstep_rate(1, 0), ValidationError);
    CHECK_THROWS_AS(overstep_rate(5, 4), ValidationError);
    CHECK(overstep_rate(std::vector<bool>{true, false, false, false}) == 0.25);
}

TEST_CASE("token-format judge flags unauthorized use and missing tokens") {
    RoleRegistry roles = two_roles();
    OverstepJudgeConfig cfg;
    cfg.method = OverstepJudgeConfig::Method::kTokenFormat;
    cfg.token_rule = cpo_rule();

    // clean case: CPO concludes with the token, CEO stays away from it
    Trajectory clean;
    clean.run_id = "clean";
    clean.rounds = 1;
    clean.messages = {make_msg("clean", 1, "CEO", "Direction set."),
                      make_msg("clean", 1, "CPO", "Requirements done. <INFO>")};
    OverstepCase c1 = judge_overstep(clean, roles, cfg);
    CHECK_FALSE(c1.overstep_strict);
    CHECK_FALSE(c1.overstep_relaxed);
    CHECK(c1.events.empty());

    // CEO uses the CPO-reserved decision token
    Trajectory grab;
    grab.run_id = "grab";
    grab.rounds = 1;
    grab.messages = {make_msg("grab", 1, "CEO", "I conclude this myself. <INFO>"),
                     make_msg("grab", 1, "CPO", "Confirmed. <INFO>")};
    OverstepCase c2 = judge_overstep(grab, roles, cfg);
    CHECK(c2.overstep_strict);
    CHECK(c2.overstep_relaxed);
    REQUIRE(!c2.events.empty());
    CHECK(c2.events[0].judge == "token-format");
    CHECK(c2.events[0].role_id == "CEO");

    // relaxed-format output: INFO without brackets
    Trajectory sloppy;
    sloppy.run_id = "sloppy";
    sloppy.rounds = 1;
    sloppy.messages = {make_msg("sloppy", 1, "CEO", "Direction."),
                       make_msg("sloppy", 1, "CPO", "INFO: requirements done")};
    OverstepCase c3 = judge_overstep(sloppy, roles, cfg);
    CHECK(c3.overstep_strict);         // strict literal missing
    CHECK_FALSE(c3.overstep_relaxed);  // intent still expressed

    // strict violations are always a superset of relaxed violations
    for (const OverstepCase* c : {&c1, &c2, &c3}) {
        if (c->overstep_relaxed) CHECK(c->overstep_strict);
    }
}

TEST_CASE("assignment-argmax judge needs an encoder and flags planted drift") {
    RoleRegistry roles = two_roles();
    AgentModel encoder(metrics_config(11));
    RoleEmbeddingCache cache(encoder, roles);

    OverstepJudgeConfig cfg;
    cfg.method = OverstepJudgeConfig::Method::kAssignmentArgmax;
    cfg.token_rule = cpo_rule();

    Trajectory t = compliant_traj("argmax");
    CHECK_THROWS_AS(judge_overstep(t, roles, cfg), ValidationError);

    // a message body that is literally the other role's description text
    // embeds nearest the other role under any encoder
    Trajectory planted;
    planted.run_id = "planted";
    planted.rounds = 1;
    planted.messages = {
        make_msg("planted", 1, "CEO", roles.at("CPO").description),
        make_msg("planted", 1, "CPO", roles.at("CPO").description),
    };
    OverstepCase flagged = judge_overstep(planted, roles, cfg, &encoder, &cache, 1.0);
    bool ceo_event = false;
    for (const auto& e : flagged.events) {
        if (e.role_id == "CEO") {
            ceo_event = true;
            CHECK(e.judge == "assignment-argmax");
        }
    }
    CHECK(ceo_event);
    CHECK(flagged.overstep_strict);
    CHECK(flagged.overstep_relaxed);
}

TEST_CASE("token_format_hook plugs into rejection_filter") {
    RoleRegistry roles = two_roles();
    FilterRule rule = cpo_rule();
    OverstepHook hook = token_format_hook(roles, rule);

    Trajectory offending;
    offending.run_id = "off";
    offending.rounds = 1;
    offending.messages = {make_msg("off", 1, "CEO", "mine now <INFO>"),
                          make_msg("off", 1, "CPO", "ok <INFO>")};
    FilterResult result = rejection_filter({offending, compliant_traj("fine")}, rule, hook);
    // "fine" has CEO token use too (round 2 CEO <INFO>), so check precisely:
    // offending rejected for overstep; compliant_traj CEO also uses token ->
    // also rejected under a CPO-only rule
    for (const auto& r : result.rejected) {
        CHECK(r.reasons[0] == "overstep");
    }
    CHECK(result.accepted.empty());

    Trajectory clean;
    clean.run_id = "clean";
    clean.rounds = 1;
    clean.messages = {make_msg("clean", 1, "CEO", "direction"),
                      make_msg("clean", 1, "CPO", "done <INFO>")};
    FilterResult ok = rejection_filter({clean}, rule, hook);
    CHECK(ok.accepted.size() == 1);
}

TEST_CASE("corpus clarity: synthetic aligned corpus approaches 1 as tau shrinks") {
    RoleRegistry roles = two_roles();
    AgentModel encoder(metrics_config(5));
    std::vector<Trajectory> corpus;
    // behavior text equals the role description itself: b_i == r_i, so the
    // similarity matrix has a dominant diagonal; sharpening tau drives C up
    Trajectory t;
    t.run_id = "aligned";
    t.rounds = 1;
    t.messages = {make_msg("aligned", 1, "CEO", roles.at("CEO").description),
                  make_msg("aligned", 1, "CPO", roles.at("CPO").description)};
    corpus.push_back(t);

    ClarityConfig c1;
    c1.tau = 1.0;
    ClarityConfig c2;
    c2.tau = 0.05;
    double mild = corpus_clarity(corpus, roles, encoder, c1, false).mean_score;
    double sharp = corpus_clarity(corpus, roles, encoder, c2, false).mean_score;
    CHECK(sharp > mild);
    CHECK(sharp > 0.95);
    CHECK(sharp < 1.0);
}

TEST_CASE("corpus clarity: uniform 2x2 case scores one half") {
    // hand value through the public seam: P uniform -> frob 1 -> C = 0.5
    Tensor uniform({2, 2}, {0.5, 0.5, 0.5, 0.5});
    AssignmentMatrices am = clarity_matrix(uniform);
    CHECK(clarity_score(am.frob) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("corpus clarity is deterministic and supports role subsets") {
    RoleRegistry roles = two_roles();
    AgentModel encoder(metrics_config(7));
    std::vector<Trajectory> corpus = {compliant_traj("a"), compliant_traj("b")};
    // one case covering only the CPO
    Trajectory solo;
    solo.run_id = "solo";
    solo.rounds = 1;
    solo.messages = {make_msg("solo", 1, "CPO", "only the product role speaks here")};
    corpus.push_back(solo);

    ClarityConfig cfg;
    CorpusClarity first = corpus_clarity(corpus, roles, encoder, cfg, true);
    CorpusClarity second = corpus_clarity(corpus, roles, encoder, cfg, true);
    CHECK(first.mean_score == second.mean_score);
    CHECK(first.n_cases == 3);
    CHECK(first.degenerate_cases == 1);  // the solo case
    REQUIRE(first.cases.size() == 3);
    CHECK(first.cases[2].roles == std::vector<std::string>{"CPO"});
    CHECK(first.cases[2].score == 1.0);

    // streaming-mean property: adding a case with C equal to the current
    // mean leaves the mean unchanged
    double mean = first.mean_score;
    double updated = (mean * 3 + mean) / 4.0;
    CHECK(updated == doctest::Approx(mean).epsilon(1e-15));
}

TEST_CASE("completeness alpha counts placeholder-free files") {
    TempDir dir("alpha_files");
    std::vector<std::string> files;
    for (int i = 0; i < 10; ++i) {
        std::string path = (dir.path / ("f" + std::to_string(i) + ".py")).string();
        std::ofstream out(path);
        if (i < 2) {
            out << "def f():\n    # TODO: finish\n    pass\n";
        } else {
            out << "def f():\n    return " << i << "\n";
        }
        files.push_back(path);
    }
    CHECK(completeness_alpha(files) == doctest::Approx(0.8).epsilon(1e-12));

    std::vector<std::string> clean_files(files.begin() + 2, files.end());
    CHECK(completeness_alpha(clean_files) == 1.0);

    std::vector<std::string> flagged(files.begin(), files.begin() + 2);
    CHECK(completeness_alpha(flagged) == 0.0);

    // case-insensitive, and order-invariant
    std::vector<std::string> shuffled(files.rbegin(), files.rend());
    CHECK(completeness_alpha(shuffled) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK_THROWS_AS(completeness_alpha({}), ValidationError);
}

TEST_CASE("consistency gamma: identical texts give 1, clamping reported") {
    AgentModel encoder(metrics_config(9));
    GammaResult same = consistency_gamma("the same text", "the same text", encoder);
    CHECK(same.gamma == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(same.raw_cosine == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(consistency_gamma("", "x", encoder), ValidationError);
    CHECK_THROWS_AS(consistency_gamma("x", "", encoder), ValidationError);
    // clamping: gamma always lands in [0,1] even when raw cosine dips below
    GammaResult other = consistency_gamma("alpha beta gamma", "zzz qqq 999", encoder);
    CHECK(other.gamma >= 0.0);
    CHECK(other.gamma <= 1.0);
}

TEST_CASE("quality_q reproduces published rows") {
    CHECK(quality_q(0.7272, 0.9561, 0.3894) == doctest::Approx(0.6909).epsilon(5e-5));
    CHECK(quality_q(0.7635, 0.8716, 0.3937) == doctest::Approx(0.6763).epsilon(5e-5));
    CHECK(quality_q(1, 1, 1) == 1.0);
    CHECK_THROWS_AS(quality_q(1.2, 0.5, 0.5), ValidationError);
    CHECK_THROWS_AS(quality_q(0.5, -0.1, 0.5), ValidationError);
}

TEST_CASE("evaluate_corpus assembles a full report with subsets") {
    RoleRegistry roles = two_roles();
    AgentModel encoder(metrics_config(3));
    std::vector<Trajectory> corpus = {compliant_traj("e1", "easy"), compliant_traj("e2", "easy"),
                                      compliant_traj("h1", "hard")};

    EvalOptions options;
    options.encoder = &encoder;
    options.judge.method = OverstepJudgeConfig::Method::kBoth;
    options.judge.token_rule.required_agents = {"CEO", "CPO"};
    options.encoder_checkpoint_label = "";

    ClarityReport report = evaluate_corpus(corpus, roles, options);
    CHECK(report.n_cases == 3);
    CHECK(report.judge == "both");
    CHECK(report.overstep_rate_strict ==
          overstep_rate(report.overstep_count_strict, report.n_cases));
    CHECK(report.overstep_rate_relaxed <= report.overstep_rate_strict);
    CHECK(report.clarity_score_mean > 0.0);
    CHECK(report.clarity_score_mean < 1.0);
    REQUIRE(report.subsets.size() == 2);
    CHECK(report.subsets[0].name == "easy");
    CHECK(report.subsets[0].n_cases == 2);
    CHECK(report.subsets[1].name == "hard");
    CHECK(report.subsets[1].n_cases == 1);

    nlohmann::json j = report.to_json();
    for (const char* field :
         {"n_cases", "overstep_rate_strict", "overstep_rate_relaxed", "clarity_score_mean",
          "frobenius_mean", "alpha", "beta", "gamma", "quality", "judge", "tau",
          "encoder_checkpoint"}) {
        CHECK(j.contains(field));
    }
    CHECK(j["alpha"].is_null());
    CHECK(j["quality"].is_null());

    std::string csv = report.to_csv();
    CHECK(csv.find("subset,n_cases,overstep_rate_strict") == 0);
    CHECK(csv.find("total,3") != std::string::npos);
    CHECK(csv.find("easy,2") != std::string::npos);

    // rates recomputed from raw counts in the report reproduce the values
    CHECK(j["overstep_rate_strict"].get<double>() ==
          overstep_rate(j["overstep_count_strict"].get<std::size_t>(),
                        j["n_cases"].get<std::size_t>()));

    // SRDD-lite dimensions flow into quality when all three are present
    TempDir dir("eval_alpha");
    std::string clean_file = (dir.path / "main.py").string();
    std::ofstream(clean_file) << "print('done')\n";
    options.alpha_files = {clean_file};
    options.beta = 1.0;
    options.requirement_text = "a calculator that adds numbers";
    options.artifact_text = "a calculator that adds numbers";
    ClarityReport full = evaluate_corpus(corpus, roles, options);
    REQUIRE(full.alpha.has_value());
    REQUIRE(full.beta.has_value());
    REQUIRE(full.gamma.has_value());
    REQUIRE(full.quality.has_value());
    CHECK(*full.quality ==
          doctest::Approx(quality_q(*full.alpha, *full.beta, *full.gamma)).epsilon(1e-15));
}
