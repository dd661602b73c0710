// roleclarity: collect two-role dialogues, filter them by termination
// token, fine-tune a toy agent model with the clarity regularizer, and
// evaluate role consistency.
//
// Exit codes: 0 success, 1 usage, 2 data/validation, 3 transport,
// 4 invariant failure (selfcheck).

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "roleclarity/clarity.hpp"
#include "roleclarity/gateway.hpp"
#include "roleclarity/metrics.hpp"
#include "roleclarity/model.hpp"
#include "roleclarity/selfcheck.hpp"
#include "roleclarity/training.hpp"
#include "roleclarity/trajectory.hpp"

using namespace roleclarity;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitTransport = 3;
constexpr int kExitInvariant = 4;

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(csv);
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << content;
    if (!out) throw ValidationError("write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// ----------------------------------------------------------- shared flags

struct ModelFlags {
    std::size_t d_model = 32;
    std::size_t context_len = 512;
    std::uint64_t seed = 0;
    std::string preset = "toy";  // toy | paper
    std::size_t rank = 0;        // 0 = preset default
    double alpha = 0.0;
    double dropout = -1.0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--d-model", d_model, "model width");
        cmd->add_option("--context-len", context_len, "max sequence length in bytes");
        cmd->add_option("--seed", seed, "seed for every random draw");
        cmd->add_option("--preset", preset, "lora preset: toy (r=4,a=4) or paper (r=16,a=16)")
            ->check(CLI::IsMember({"toy", "paper"}));
        cmd->add_option("--rank", rank, "lora rank (overrides preset)");
        cmd->add_option("--alpha", alpha, "lora scaling alpha (overrides preset)");
        cmd->add_option("--dropout", dropout, "lora dropout (overrides preset)");
    }

    ModelConfig resolve() const {
        ModelConfig cfg = preset == "paper" ? ModelConfig::paper_preset() : ModelConfig{};
        cfg.d_model = d_model;
        cfg.context_len = context_len;
        cfg.seed = seed;
        if (rank > 0) cfg.lora_rank = rank;
        if (alpha > 0.0) cfg.lora_alpha = alpha;
        if (dropout >= 0.0) cfg.lora_dropout = dropout;
        return cfg;
    }

    json echo() const {
        ModelConfig cfg = resolve();
        return json{{"d_model", cfg.d_model},       {"context_len", cfg.context_len},
                    {"seed", cfg.seed},             {"preset", preset},
                    {"lora_rank", cfg.lora_rank},   {"lora_alpha", cfg.lora_alpha},
                    {"lora_dropout", cfg.lora_dropout}};
    }
};

struct RuleFlags {
    std::string token = "<INFO>";
    std::string relaxed_token = "INFO";
    std::string mode = "strict";
    std::string required = "";

    void attach(CLI::App* cmd) {
        cmd->add_option("--token", token, "strict termination token");
        cmd->add_option("--relaxed-token", relaxed_token, "relaxed termination token");
        cmd->add_option("--mode", mode, "token matching mode")
            ->check(CLI::IsMember({"strict", "relaxed"}));
        cmd->add_option("--required", required,
                        "comma-separated role ids that must emit the token");
    }

    FilterRule resolve() const {
        FilterRule rule;
        rule.token_strict = token;
        rule.token_relaxed = relaxed_token;
        rule.mode = mode == "strict" ? FilterRule::Mode::kStrict : FilterRule::Mode::kRelaxed;
        rule.required_agents = split_csv(required);
        rule.validate();
        return rule;
    }

    json echo() const {
        return json{{"token", token},
                    {"relaxed_token", relaxed_token},
                    {"mode", mode},
                    {"required", split_csv(required)}};
    }
};

// --------------------------------------------------------------- collect

struct CollectArgs {
    std::string roles_path;
    std::string tasks_path;
    std::string out_path;
    std::string mock_script;
    std::string agents;
    std::string accepted_path;
    std::string rejected_path;
    RuleFlags rule;
    EndpointConfig endpoint;
    std::uint64_t seed = 0;
};

int cmd_collect(const CollectArgs& args) {
    RoleRegistry registry = RoleRegistry::from_file(args.roles_path);
    std::vector<TaskSpec> tasks = load_tasks(args.tasks_path);
    FilterRule rule = args.rule.resolve();

    std::vector<std::string> agent_ids = split_csv(args.agents);
    if (agent_ids.empty()) {
        for (const auto& r : registry.roles()) {
            if (agent_ids.size() < 2) agent_ids.push_back(r.role_id);
        }
    }
    if (agent_ids.size() != 2) {
        throw ValidationError("collect: exactly two dialogue roles required (--agents A,B)");
    }
    std::vector<RoleDescription> pair = {registry.at(agent_ids[0]), registry.at(agent_ids[1])};

    std::unique_ptr<ChatBackend> backend;
    if (!args.mock_script.empty()) {
        backend = std::make_unique<MockChatBackend>(DialogueScript::from_file(args.mock_script));
    } else if (!args.endpoint.base_url.empty()) {
        backend = std::make_unique<HttpChatBackend>(args.endpoint);
    } else {
        throw ValidationError("collect: provide --mock <script.json> or --base-url <url>");
    }

    CollectReport report =
        collect_dataset(tasks, pair, *backend, rule, args.endpoint, args.out_path);

    if (!args.accepted_path.empty()) save_trajectories(args.accepted_path, report.accepted);
    if (!args.rejected_path.empty()) {
        std::ostringstream lines;
        for (const auto& r : report.rejected) {
            lines << json{{"run_id", r.run_id}, {"reasons", r.reasons}}.dump() << "\n";
        }
        write_text(args.rejected_path, lines.str());
    }

    json summary;
    summary["config"] = {{"roles", args.roles_path},
                         {"tasks", args.tasks_path},
                         {"out", args.out_path},
                         {"backend", backend->describe()},
                         {"agents", agent_ids},
                         {"rounds", args.endpoint.max_rounds},
                         {"temperature", args.endpoint.temperature},
                         {"seed", args.seed},
                         {"rule", args.rule.echo()}};
    summary["attempted"] = report.attempted;
    summary["skipped"] = report.skipped_tasks.size();
    summary["collected"] = report.collected.size();
    summary["accepted"] = report.accepted.size();
    summary["rejected"] = report.rejected.size();
    summary["transport_failed"] = report.failed_tasks;
    summary["acceptance_rate"] = report.acceptance_rate;
    std::cout << summary.dump(1) << "\n";
    return report.failed_tasks.empty() ? kExitOk : kExitTransport;
}

// ---------------------------------------------------------------- filter

struct FilterArgs {
    std::string in_path;
    std::string roles_path;
    std::string accepted_path;
    std::string rejected_path;
    bool judge_token_format = false;
    RuleFlags rule;
};

int cmd_filter(const FilterArgs& args) {
    FilterRule rule = args.rule.resolve();
    RoleRegistry registry;
    bool have_roles = !args.roles_path.empty();
    if (have_roles) registry = RoleRegistry::from_file(args.roles_path);

    LoadResult loaded = load_trajectories(args.in_path, have_roles ? &registry : nullptr);
    for (const auto& issue : loaded.issues) {
        std::cerr << "filter: line " << issue.line_no << ": " << issue.message << "\n";
    }

    OverstepHook hook;
    if (args.judge_token_format) hook = token_format_hook(registry, rule);
    FilterResult result = rejection_filter(loaded.trajectories, rule, hook);

    save_trajectories(args.accepted_path, result.accepted);
    std::ostringstream rejected_lines;
    for (const auto& issue : loaded.issues) {
        rejected_lines << json{{"line_no", issue.line_no},
                               {"reasons", json::array({"schema"})},
                               {"detail", issue.message}}
                              .dump()
                       << "\n";
    }
    for (const auto& r : result.rejected) {
        rejected_lines << json{{"run_id", r.run_id}, {"reasons", r.reasons}}.dump() << "\n";
    }
    write_text(args.rejected_path, rejected_lines.str());

    json summary;
    summary["config"] = {{"in", args.in_path},
                         {"roles", args.roles_path},
                         {"accepted", args.accepted_path},
                         {"rejected", args.rejected_path},
                         {"judge_token_format", args.judge_token_format},
                         {"rule", args.rule.echo()}};
    summary["loaded"] = loaded.trajectories.size();
    summary["schema_issues"] = loaded.issues.size();
    summary["accepted"] = result.accepted.size();
    summary["rejected"] = result.rejected.size();
    std::cout << summary.dump(1) << "\n";
    return kExitOk;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
    std::string data_path;
    std::string roles_path;
    std::string agent;
    std::string ckpt_dir;
    std::string report_path;
    ModelFlags model;
    TrainConfig config;
    std::string reduction = "sum";
};

int cmd_train(const TrainArgs& args) {
    RoleRegistry registry = RoleRegistry::from_file(args.roles_path);
    LoadResult loaded = load_trajectories(args.data_path, &registry);
    for (const auto& issue : loaded.issues) {
        std::cerr << "train: line " << issue.line_no << ": " << issue.message << "\n";
    }

    TrainConfig config = args.config;
    config.seed = args.model.seed;
    config.reduction = args.reduction == "mean" ? Reduction::kMean : Reduction::kSum;
    ModelConfig model_cfg = args.model.resolve();
    AgentModel base(model_cfg);

    TrainResult result =
        train_agent(base, loaded.trajectories, registry, args.agent, config, args.ckpt_dir);

    // deployable artifact: merge the selected checkpoint's adapters
    std::filesystem::path dir(args.ckpt_dir);
    AgentModel selected = AgentModel::load((dir / result.report.selected_checkpoint).string());
    std::string merged_path = (dir / "merged.json").string();
    selected.merged().save(merged_path);

    json report = result.report.to_json();
    report["model_config"] = args.model.echo();
    report["cli"] = {{"data", args.data_path},
                     {"roles", args.roles_path},
                     {"agent", args.agent},
                     {"ckpt", args.ckpt_dir},
                     {"reduction", args.reduction}};
    report["merged_checkpoint"] = "merged.json";
    std::string serialized = report.dump(1) + "\n";
    if (!args.report_path.empty()) write_text(args.report_path, serialized);

    json summary;
    summary["selected_checkpoint"] = result.report.selected_checkpoint;
    summary["merged_checkpoint"] = merged_path;
    summary["steps"] = result.report.steps.size();
    summary["epoch_clarity"] = result.report.epoch_clarity;
    summary["diverged"] = result.report.diverged;
    std::cout << summary.dump(1) << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
    std::string data_path;
    std::string roles_path;
    std::string ckpt_path;
    std::vector<std::string> role_ckpts;  // ROLE=path pairs for composed eval
    std::string report_path;
    std::string csv_path;
    std::string judge = "both";
    double tau = 1.0;
    double epsilon = 0.5;
    RuleFlags rule;
    ModelFlags model;
    std::vector<std::string> alpha_files;
    std::vector<std::string> alpha_patterns;
    double beta = -1.0;
    std::string beta_cmd;
    std::vector<std::string> beta_targets;
    std::string requirement_path;
    std::string artifact_path;
};

int cmd_eval(const EvalArgs& args) {
    RoleRegistry registry = RoleRegistry::from_file(args.roles_path);
    LoadResult loaded = load_trajectories(args.data_path, &registry);
    for (const auto& issue : loaded.issues) {
        std::cerr << "eval: line " << issue.line_no << ": " << issue.message << "\n";
    }

    AgentModel encoder = args.ckpt_path.empty() ? AgentModel(args.model.resolve())
                                                : AgentModel::load(args.ckpt_path);

    // composed evaluation: each role's behavior under its own checkpoint
    std::vector<std::pair<std::string, AgentModel>> role_models;
    for (const auto& spec : args.role_ckpts) {
        std::size_t eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 >= spec.size()) {
            throw ValidationError("eval: --ckpt-role expects ROLE=path, got " + spec);
        }
        role_models.emplace_back(spec.substr(0, eq), AgentModel::load(spec.substr(eq + 1)));
    }

    EvalOptions options;
    options.encoder = &encoder;
    options.encoder_checkpoint_label = args.ckpt_path;
    for (const auto& [role, model] : role_models) {
        if (!registry.contains(role)) {
            throw ValidationError("eval: --ckpt-role names unknown role " + role);
        }
        options.role_encoders[role] = &model;
    }
    options.clarity.tau = args.tau;
    options.clarity.epsilon = args.epsilon;
    options.judge.token_rule = args.rule.resolve();
    if (args.judge == "token-format") {
        options.judge.method = OverstepJudgeConfig::Method::kTokenFormat;
    } else if (args.judge == "assignment-argmax") {
        options.judge.method = OverstepJudgeConfig::Method::kAssignmentArgmax;
    } else {
        options.judge.method = OverstepJudgeConfig::Method::kBoth;
    }
    // when a non-merged checkpoint is evaluated, also report the clarity
    // the frozen base assigns to the same corpus
    if (!args.ckpt_path.empty() && !encoder.merged_flag()) {
        options.base_encoder = &encoder;
    }

    options.alpha_files = args.alpha_files;
    options.alpha_patterns = args.alpha_patterns;
    if (args.beta >= 0.0) {
        options.beta = args.beta;
    } else if (!args.beta_cmd.empty()) {
        if (args.beta_targets.empty()) {
            throw ValidationError("eval: --beta-cmd requires at least one --beta-target");
        }
        std::size_t passed = 0;
        for (const auto& target : args.beta_targets) {
            std::string command = args.beta_cmd + " \"" + target + "\"";
            int status = std::system(command.c_str());
            if (status == 0) ++passed;
        }
        options.beta = static_cast<double>(passed) / static_cast<double>(args.beta_targets.size());
    }
    if (!args.requirement_path.empty()) {
        options.requirement_text = read_text(args.requirement_path);
    }
    if (!args.artifact_path.empty()) {
        options.artifact_text = read_text(args.artifact_path);
    }

    ClarityReport report = evaluate_corpus(loaded.trajectories, registry, options);

    json out = report.to_json();
    out["config"] = {{"data", args.data_path},     {"roles", args.roles_path},
                     {"ckpt", args.ckpt_path},     {"ckpt_role", args.role_ckpts},
                     {"judge", args.judge},
                     {"tau", args.tau},            {"epsilon", args.epsilon},
                     {"rule", args.rule.echo()},   {"model", args.model.echo()},
                     {"beta_cmd", args.beta_cmd},  {"alpha_files", args.alpha_files},
                     {"requirement", args.requirement_path}, {"artifact", args.artifact_path}};
    std::string serialized = out.dump(1) + "\n";
    if (!args.report_path.empty()) {
        write_text(args.report_path, serialized);
        json summary = {{"report", args.report_path},
                        {"n_cases", report.n_cases},
                        {"clarity_score_mean", report.clarity_score_mean},
                        {"overstep_rate_strict", report.overstep_rate_strict}};
        std::cout << summary.dump(1) << "\n";
    } else {
        std::cout << serialized;
    }
    if (!args.csv_path.empty()) write_text(args.csv_path, report.to_csv());
    return kExitOk;
}

// ------------------------------------------------------------- selfcheck

int cmd_selfcheck(std::size_t seeds, bool inject_bug) {
    SelfCheckOptions options;
    options.seeds = seeds;
    options.inject_gradient_bug = inject_bug;
    std::vector<SuiteResult> results = run_selfcheck(options);
    for (const auto& r : results) {
        std::cout << "[" << r.name << "] " << (r.passed ? "PASS" : "FAIL") << " — " << r.detail
                  << "\n";
    }
    return all_passed(results) ? kExitOk : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"role clarity toolkit: collect, filter, train, eval, selfcheck"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read defaults from a TOML/INI file");

    CollectArgs collect_args;
    auto* collect = app.add_subcommand("collect", "run two-role dialogues into a JSONL file");
    collect->add_option("--roles", collect_args.roles_path, "role registry JSON")->required();
    collect->add_option("--tasks", collect_args.tasks_path, "task list JSONL")->required();
    collect->add_option("--out", collect_args.out_path, "output trajectory JSONL")->required();
    collect->add_option("--mock", collect_args.mock_script, "dialogue script for the mock backend");
    collect->add_option("--base-url", collect_args.endpoint.base_url, "chat-completions endpoint");
    collect->add_option("--model", collect_args.endpoint.model, "model name on the wire");
    collect->add_option("--api-key-env", collect_args.endpoint.api_key_env,
                        "environment variable holding the bearer key");
    collect->add_option("--rounds", collect_args.endpoint.max_rounds, "max dialogue rounds K");
    collect->add_option("--temperature", collect_args.endpoint.temperature,
                        "sampling temperature, forwarded verbatim");
    collect->add_option("--timeout", collect_args.endpoint.timeout_seconds, "request timeout (s)");
    collect->add_option("--retries", collect_args.endpoint.max_retries, "transport retry budget");
    collect->add_option("--max-tokens", collect_args.endpoint.max_tokens, "completion cap");
    collect->add_option("--agents", collect_args.agents, "the two dialogue roles, e.g. CEO,CPO");
    collect->add_option("--accepted", collect_args.accepted_path, "also write accepted runs here");
    collect->add_option("--rejected", collect_args.rejected_path, "also write rejection reasons");
    collect->add_option("--seed", collect_args.seed, "seed (logged for reproducibility)");
    collect_args.rule.attach(collect);

    FilterArgs filter_args;
    auto* filter = app.add_subcommand("filter", "rejection-sample trajectories by token rule");
    filter->add_option("--in", filter_args.in_path, "input trajectory JSONL")->required();
    filter->add_option("--roles", filter_args.roles_path, "role registry JSON (validates ids)");
    filter->add_option("--accepted", filter_args.accepted_path, "accepted output JSONL")
        ->required();
    filter->add_option("--rejected", filter_args.rejected_path, "rejection reasons JSONL")
        ->required();
    filter->add_flag("--judge-token-format", filter_args.judge_token_format,
                     "also reject trajectories the token-format judge flags");
    filter_args.rule.attach(filter);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "LoRA fine-tuning with the clarity regularizer");
    train->add_option("--data", train_args.data_path, "accepted trajectory JSONL")->required();
    train->add_option("--roles", train_args.roles_path, "role registry JSON")->required();
    train->add_option("--agent", train_args.agent, "role id to fine-tune")->required();
    train->add_option("--ckpt", train_args.ckpt_dir, "checkpoint directory")->required();
    train->add_option("--report", train_args.report_path, "training report JSON path");
    train->add_option("--lambda", train_args.config.lambda, "regularization weight");
    train->add_option("--lr", train_args.config.lr, "learning rate");
    train->add_option("--epochs", train_args.config.epochs, "training epochs");
    train->add_option("--batch", train_args.config.batch_size, "sequences per update");
    train->add_option("--checkpoint-every", train_args.config.checkpoint_every,
                      "steps between checkpoints");
    train->add_option("--validation-size", train_args.config.validation_size,
                      "held-out examples for checkpoint selection");
    train->add_option("--tau", train_args.config.tau, "regularizer softmax temperature");
    train->add_option("--momentum", train_args.config.momentum, "SGD momentum");
    train->add_option("--reduction", train_args.reduction, "nll reduction: sum or mean")
        ->check(CLI::IsMember({"sum", "mean"}));
    train_args.model.attach(train);

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "role-consistency and SRDD-style evaluation");
    eval->add_option("--data", eval_args.data_path, "trajectory JSONL")->required();
    eval->add_option("--roles", eval_args.roles_path, "role registry JSON")->required();
    eval->add_option("--ckpt", eval_args.ckpt_path, "encoder checkpoint (base encoder if absent)");
    eval->add_option("--ckpt-role", eval_args.role_ckpts,
                     "ROLE=path, per-role behavior encoder for composed evaluation");
    eval->add_option("--report", eval_args.report_path, "report JSON path (stdout if absent)");
    eval->add_option("--csv", eval_args.csv_path, "flat CSV export path");
    eval->add_option("--judge", eval_args.judge, "overstep judge method")
        ->check(CLI::IsMember({"token-format", "assignment-argmax", "both"}));
    eval->add_option("--tau", eval_args.tau, "softmax temperature");
    eval->add_option("--epsilon", eval_args.epsilon, "role-clear threshold");
    eval->add_option("--alpha-file", eval_args.alpha_files, "artifact file for completeness");
    eval->add_option("--alpha-pattern", eval_args.alpha_patterns,
                     "placeholder pattern (repeatable)");
    eval->add_option("--beta", eval_args.beta, "externally computed executability in [0,1]");
    eval->add_option("--beta-cmd", eval_args.beta_cmd,
                     "command run per --beta-target; exit 0 counts as pass");
    eval->add_option("--beta-target", eval_args.beta_targets, "artifact given to --beta-cmd");
    eval->add_option("--requirement", eval_args.requirement_path, "requirement text file");
    eval->add_option("--artifact", eval_args.artifact_path, "artifact text file");
    eval_args.rule.attach(eval);
    eval_args.model.attach(eval);

    std::size_t selfcheck_seeds = 20;
    bool inject_bug = false;
    auto* selfcheck = app.add_subcommand("selfcheck", "run the numeric invariant suites");
    selfcheck->add_option("--seeds", selfcheck_seeds, "seeds for the gradient suites");
    selfcheck->add_flag("--inject-bug", inject_bug)->group("");  // negative-control hook

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (collect->parsed()) return cmd_collect(collect_args);
        if (filter->parsed()) return cmd_filter(filter_args);
        if (train->parsed()) return cmd_train(train_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (selfcheck->parsed()) return cmd_selfcheck(selfcheck_seeds, inject_bug);
        std::cerr << "no subcommand selected\n";
        return kExitUsage;
    } catch (const TransportError& e) {
        std::cerr << "transport error: " << e.what() << "\n";
        return kExitTransport;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
