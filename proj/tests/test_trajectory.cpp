#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "roleclarity/trajectory.hpp"

using namespace roleclarity;

namespace {

RoleRegistry two_roles() {
    return RoleRegistry({{"CEO", "Sets the vision and makes final calls."},
                         {"CPO", "Owns product requirements and scope."}});
}

Message make_msg(const std::string& run, int round, const std::string& role,
                 const std::string& content) {
    Message m;
    m.run_id = run;
    m.task_id = "task-" + run;
    m.round = round;
    m.agent_id = role;
    m.role_id = role;
    m.content = content;
    m.terminated = content.find("<INFO>") != std::string::npos;
    return m;
}

Trajectory make_traj(const std::string& run, std::vector<Message> msgs) {
    Trajectory t;
    t.run_id = run;
    int k = 0;
    for (const auto& m : msgs) k = std::max(k, m.round);
    t.rounds = k;
    t.messages = std::move(msgs);
    return t;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::filesystem::remove(path); }
};

}  // namespace

TEST_CASE("role registry parses and validates") {
    RoleRegistry r = two_roles();
    CHECK(r.size() == 2);
    CHECK(r.contains("CEO"));
    CHECK(r.index_of("CPO") == 1);
    CHECK_THROWS_AS(r.at("CTO"), ValidationError);
    CHECK_THROWS_AS(r.add({"CEO", "duplicate"}), ValidationError);
    CHECK_THROWS_AS(r.add({"", "missing id"}), ValidationError);
    CHECK_THROWS_AS(r.add({"CTO", ""}), ValidationError);

    RoleRegistry parsed = RoleRegistry::from_json(r.to_json());
    CHECK(parsed.size() == 2);
    CHECK(parsed.at("CEO").description == r.at("CEO").description);
}

TEST_CASE("empty file loads to empty set with zero issues") {
    TempFile tmp("empty_traj.jsonl");
    std::ofstream(tmp.path).close();
    LoadResult result = load_trajectories(tmp.path);
    CHECK(result.trajectories.empty());
    CHECK(result.issues.empty());
}

TEST_CASE("missing file throws") {
    CHECK_THROWS_AS(load_trajectories("definitely_not_here.jsonl"), ValidationError);
}

TEST_CASE("fixture of 2 runs x 10 rounds loads as 2 trajectories with K=10") {
    TempFile tmp("tworuns_traj.jsonl");
    std::vector<Trajectory> trajs;
    for (int run = 0; run < 2; ++run) {
        std::vector<Message> msgs;
        for (int k = 1; k <= 10; ++k) {
            msgs.push_back(make_msg("run" + std::to_string(run), k, "CEO", "ceo turn"));
            msgs.push_back(make_msg("run" + std::to_string(run), k, "CPO", "cpo turn"));
        }
        trajs.push_back(make_traj("run" + std::to_string(run), std::move(msgs)));
    }
    save_trajectories(tmp.path, trajs);
    RoleRegistry roles = two_roles();
    LoadResult result = load_trajectories(tmp.path, &roles);
    CHECK(result.issues.empty());
    REQUIRE(result.trajectories.size() == 2);
    CHECK(result.trajectories[0].rounds == 10);
    CHECK(result.trajectories[1].rounds == 10);
}

TEST_CASE("malformed lines are reported with line numbers") {
    TempFile tmp("malformed_traj.jsonl");
    {
        std::ofstream out(tmp.path);
        out << message_to_json(make_msg("ok", 1, "CEO", "fine")).dump() << "\n";
        out << "{not json\n";
        Message bad_round = make_msg("bad", 0, "CEO", "zero round");
        bad_round.round = 0;
        out << message_to_json(bad_round).dump() << "\n";
        Message bad_role = make_msg("bad2", 1, "CFO", "unknown role");
        out << message_to_json(bad_role).dump() << "\n";
        Message bad_flag = make_msg("bad3", 1, "CEO", "says <INFO> done");
        bad_flag.terminated = false;
        out << message_to_json(bad_flag).dump() << "\n";
    }
    RoleRegistry roles = two_roles();
    LoadResult result = load_trajectories(tmp.path, &roles);
    CHECK(result.trajectories.size() == 1);
    REQUIRE(result.issues.size() == 4);
    CHECK(result.issues[0].line_no == 2);
    CHECK(result.issues[1].line_no == 3);
    CHECK(result.issues[2].line_no == 4);
    CHECK(result.issues[3].line_no == 5);
}

TEST_CASE("non-contiguous rounds exclude the whole run") {
    TempFile tmp("gap_traj.jsonl");
    {
        std::ofstream out(tmp.path);
        out << message_to_json(make_msg("gap", 1, "CEO", "one")).dump() << "\n";
        out << message_to_json(make_msg("gap", 3, "CPO", "three")).dump() << "\n";
    }
    LoadResult result = load_trajectories(tmp.path);
    CHECK(result.trajectories.empty());
    REQUIRE(result.issues.size() == 1);
}

TEST_CASE("unknown fields survive a save/load round trip byte for byte") {
    TempFile tmp("extra_traj.jsonl");
    TempFile tmp2("extra_traj_2.jsonl");
    Message m = make_msg("r1", 1, "CEO", "hello");
    m.extra["subset"] = "easy";
    m.extra["score"] = 0.25;
    Message m2 = make_msg("r1", 1, "CPO", "world <INFO>");
    save_trajectories(tmp.path, {make_traj("r1", {m, m2})});

    LoadResult first = load_trajectories(tmp.path);
    REQUIRE(first.issues.empty());
    save_trajectories(tmp2.path, first.trajectories);
    CHECK(slurp(tmp.path) == slurp(tmp2.path));
    CHECK(first.trajectories[0].messages[0].extra["subset"] == "easy");
    CHECK(first.trajectories[0].messages[0] == m);
}

TEST_CASE("filter rule validation") {
    FilterRule rule;
    rule.token_strict = "<INFO>";
    rule.token_relaxed = "INFO";
    CHECK_NOTHROW(rule.validate());
    rule.token_relaxed = "DONE";
    CHECK_THROWS_AS(rule.validate(), ValidationError);
}

TEST_CASE("rejection filter: token presence in final round") {
    FilterRule rule;
    rule.required_agents = {"CEO", "CPO"};

    Trajectory good = make_traj(
        "good", {make_msg("good", 1, "CEO", "kick off"), make_msg("good", 1, "CPO", "reply"),
                 make_msg("good", 2, "CEO", "<INFO> Requirements confirmed."),
                 make_msg("good", 2, "CPO", "<INFO> Requirements confirmed.")});
    Trajectory relaxed_only = make_traj(
        "relaxed", {make_msg("relaxed", 1, "CEO", "INFO: done"),
                    make_msg("relaxed", 1, "CPO", "INFO: done")});
    Trajectory no_token = make_traj(
        "none", {make_msg("none", 1, "CEO", "still talking"),
                 make_msg("none", 1, "CPO", "no conclusion")});

    std::vector<Trajectory> corpus = {good, relaxed_only, no_token};

    rule.mode = FilterRule::Mode::kStrict;
    FilterResult strict = rejection_filter(corpus, rule);
    CHECK(strict.accepted.size() == 1);
    CHECK(strict.accepted[0].run_id == "good");
    REQUIRE(strict.rejected.size() == 2);
    CHECK(strict.rejected[0].reasons[0] == "missing-token");

    rule.mode = FilterRule::Mode::kRelaxed;
    FilterResult relaxed = rejection_filter(corpus, rule);
    CHECK(relaxed.accepted.size() == 2);

    // strict-accepted is a subset of relaxed-accepted
    for (const auto& t : strict.accepted) {
        bool found = false;
        for (const auto& r : relaxed.accepted) found = found || r.run_id == t.run_id;
        CHECK(found);
    }
}

TEST_CASE("rejection filter is idempotent and honors the overstep hook") {
    FilterRule rule;
    rule.required_agents = {"CPO"};
    Trajectory t1 = make_traj("a", {make_msg("a", 1, "CPO", "<INFO> ok")});
    Trajectory t2 = make_traj("b", {make_msg("b", 1, "CPO", "<INFO> ok overstep-marker")});

    FilterResult once = rejection_filter({t1, t2}, rule);
    CHECK(once.accepted.size() == 2);
    FilterResult twice = rejection_filter(once.accepted, rule);
    CHECK(twice.accepted.size() == once.accepted.size());
    CHECK(twice.rejected.empty());

    auto hook = [](const Trajectory& t) {
        for (const auto& m : t.messages) {
            if (m.content.find("overstep-marker") != std::string::npos) return true;
        }
        return false;
    };
    FilterResult judged = rejection_filter({t1, t2}, rule, hook);
    CHECK(judged.accepted.size() == 1);
    REQUIRE(judged.rejected.size() == 1);
    CHECK(judged.rejected[0].reasons[0] == "overstep");
}

TEST_CASE("token in a non-final round does not count") {
    FilterRule rule;
    rule.required_agents = {"CPO"};
    Trajectory t = make_traj("early", {make_msg("early", 1, "CPO", "<INFO> premature"),
                                       make_msg("early", 2, "CPO", "actually not done")});
    FilterResult result = rejection_filter({t}, rule);
    CHECK(result.accepted.empty());
}

TEST_CASE("split_dataset basics") {
    std::vector<Trajectory> data;
    for (int i = 0; i < 500; ++i) {
        data.push_back(make_traj("r" + std::to_string(i),
                                 {make_msg("r" + std::to_string(i), 1, "CEO", "x")}));
    }
    SplitResult split = split_dataset(data, 100, 7);
    CHECK(split.train.size() == 400);
    CHECK(split.validation.size() == 100);

    // disjoint and union equals input
    std::set<std::string> seen;
    for (const auto& t : split.train) seen.insert(t.run_id);
    for (const auto& t : split.validation) {
        CHECK(seen.count(t.run_id) == 0);
        seen.insert(t.run_id);
    }
    CHECK(seen.size() == 500);

    SplitResult again = split_dataset(data, 100, 7);
    for (std::size_t i = 0; i < split.validation.size(); ++i) {
        CHECK(split.validation[i].run_id == again.validation[i].run_id);
    }

    SplitResult all_train = split_dataset(data, 0, 7);
    CHECK(all_train.train.size() == 500);
    CHECK(all_train.validation.empty());

    CHECK_THROWS_AS(split_dataset(std::vector<Trajectory>(data.begin(), data.begin() + 5), 5, 1),
                    ValidationError);
}
