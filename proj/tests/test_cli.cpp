/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Drives the built binary (path in the KTUNE_CLI environment variable)
// through every subcommand: artifact sets, determinism across reruns,
// overwrite refusal, and the error texts a user actually sees.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "helpers.hpp"
#include "ktune/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ktune;
using namespace ktune::testing;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr interleaved

    bool contains(const std::string& needle) const {
        return output.find(needle) != std::string::npos;
    }
};

CliResult run_cli(const std::string& args) {
    const char* bin = std::getenv("KTUNE_CLI");
    REQUIRE(bin != nullptr);
    std::string cmd = std::string(bin) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult result;
    char buffer[4096];
    while (std::size_t got = fread(buffer, 1, sizeof buffer, pipe))
        result.output.append(buffer, got);
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

bool same_bytes(const fs::path& a, const fs::path& b) {
    return read_file(a) == read_file(b);
}

/// Inputs, checkpoints, and one baseline + one classifier-guided run,
/// produced once through the binary and shared read-only by the cases.
struct SharedRuns {
    fs::path dir;
    fs::path space = "space.json";
    fs::path workload = "workload.json";
    fs::path sim = "sim.json";
    fs::path run_config = "run.json";
    fs::path pre_dir = "pre";
    fs::path base_dir = "base";
    fs::path cf_dir = "cf";
    std::string cf_hash;

    fs::path in(const fs::path& p) const { return dir / p; }
};

const SharedRuns& shared_runs() {
    static SharedRuns s = [] {
        SharedRuns r;
        r.dir = make_temp_dir("cli");
        save_knob_space(r.in(r.space), make_space());
        save_json(r.in(r.workload), workload_to_json(generate_synthetic_workload(7, 3, 2, 3, 1, 2)));

        auto sim = run_cli("simulate-spec --space " + q(r.in(r.space)) +
                           " --seed 5 --queries 3 --out " + q(r.in(r.sim)));
        REQUIRE(sim.exit_code == 0);
        auto hist = run_cli("simulate-spec --space " + q(r.in(r.space)) +
                            " --seed 11 --queries 3 --out " + q(r.in("sim_hist.json")));
        REQUIRE(hist.exit_code == 0);

        json pre_config{{"n", 6},
                        {"d", 16},
                        {"seed", 33},
                        {"holdout_fraction", 0.2},
                        {"importance_repeats", 3},
                        {"tasks",
                         json::array({json{{"task_id", "hist-a"},
                                           {"knob_space", r.space.string()},
                                           {"workload", r.workload.string()},
                                           {"simulator", "sim_hist.json"},
                                           {"eval_count", 24}}})}};
        save_json(r.in("pretrain.json"), pre_config);
        auto pre = run_cli("pretrain --config " + q(r.in("pretrain.json")) + " --out " +
                           q(r.in(r.pre_dir)));
        REQUIRE(pre.exit_code == 0);

        json run{{"knob_space", r.space.string()},
                 {"workload", r.workload.string()},
                 {"backend", json{{"simulator", r.sim.string()}, {"time_scale", 0.0}}},
                 {"tuner", "bo"},
                 {"n", 6},
                 {"init_count", 8},
                 {"iterations", 10},
                 {"seed", 4},
                 {"m_min", 2},
                 {"tau", 0.2},
                 {"finetune_after", 8}};
        save_json(r.in(r.run_config), run);

        auto base = run_cli("tune --config " + q(r.in(r.run_config)) +
                            " --baseline full-eval --out " + q(r.in(r.base_dir)));
        REQUIRE(base.exit_code == 0);
        auto cf = run_cli("tune --config " + q(r.in(r.run_config)) + " --classifier " +
                          q(r.in(r.pre_dir / "classifier.json")) + " --embedding " +
                          q(r.in(r.pre_dir / "embedding.json")) + " --out " + q(r.in(r.cf_dir)));
        REQUIRE(cf.exit_code == 0);
        r.cf_hash = load_json(r.in(r.cf_dir / "config.json")).at("config_hash").get<std::string>();
        return r;
    }();
    return s;
}

} // namespace

TEST_CASE("simulate-spec is deterministic and validates its inputs") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");

    auto again = run_cli("simulate-spec --space " + q(s.in(s.space)) +
                         " --seed 5 --queries 3 --out " + q(dir / "again.json"));
    REQUIRE(again.exit_code == 0);
    CHECK(same_bytes(s.in(s.sim), dir / "again.json"));

    auto other = run_cli("simulate-spec --space " + q(s.in(s.space)) +
                         " --seed 6 --queries 3 --out " + q(dir / "other.json"));
    REQUIRE(other.exit_code == 0);
    CHECK_FALSE(same_bytes(s.in(s.sim), dir / "other.json"));

    auto spec = load_simulator_spec(dir / "again.json");
    CHECK(spec.queries.size() == 3);
    CHECK(load_json(dir / "again.json").contains("config_hash"));

    auto missing = run_cli("simulate-spec --space " + q(dir / "nope.json") + " --out " +
                           q(dir / "x.json"));
    CHECK(missing.exit_code == 1);
    CHECK(missing.contains("does not exist"));

    auto clobber = run_cli("simulate-spec --space " + q(s.in(s.space)) + " --out " +
                           q(dir / "again.json"));
    CHECK(clobber.exit_code == 1);
    CHECK(clobber.contains("--force"));
}

TEST_CASE("pretrain writes checkpoints and reruns byte-identically") {
    const auto& s = shared_runs();
    for (const char* name : {"classifier.json", "embedding.json", "union_space.json",
                             "training_set.json", "pretrain_summary.json", "config.json"})
        CHECK(fs::exists(s.in(s.pre_dir / name)));

    auto model = load_classifier(s.in(s.pre_dir / "classifier.json"));
    CHECK(model.n == 6);
    CHECK(model.pretrain_tasks == std::vector<std::string>{"hist-a"});
    CHECK(model.finetune_task.empty());

    json summary = load_json(s.in(s.pre_dir / "pretrain_summary.json"));
    CHECK(summary.at("holdout_present").get<bool>());
    CHECK(summary.at("holdout").at("accuracy").get<double>() >= 0.0);
    CHECK(summary.at("config_hash") ==
          load_json(s.in(s.pre_dir / "classifier.json")).at("config_hash"));

    auto dir = make_temp_dir("cli");
    auto rerun = run_cli("pretrain --config " + q(s.in("pretrain.json")) + " --out " +
                         q(dir / "pre2"));
    REQUIRE(rerun.exit_code == 0);
    for (const char* name : {"classifier.json", "embedding.json", "training_set.json",
                             "union_space.json"})
        CHECK(same_bytes(s.in(s.pre_dir / name), dir / "pre2" / name));
}

TEST_CASE("pretrain rejects a task-free config") {
    auto dir = make_temp_dir("cli");
    save_json(dir / "empty.json", json{{"n", 4}, {"tasks", json::array()}});
    auto r = run_cli("pretrain --config " + q(dir / "empty.json") + " --out " + q(dir / "out"));
    CHECK(r.exit_code == 1);
    CHECK(r.contains("lists no tasks"));
}

TEST_CASE("baseline tune executes every query of every iteration") {
    const auto& s = shared_runs();
    auto rows = parse_eval_log(read_file(s.in(s.base_dir / "eval_log.csv")));
    REQUIRE(rows.size() == (8 + 10) * 3);
    for (const auto& row : rows)
        CHECK(row.mode == EvalMode::Executed);

    json report = load_json(s.in(s.base_dir / "report.json"));
    CHECK(report.at("baseline").get<bool>());
    CHECK(report.at("executed_queries").get<long>() == (8 + 10) * 3);
    CHECK(report.at("estimated_queries").get<long>() == 0);
}

TEST_CASE("tune refuses to overwrite a run directory without --force") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    std::string cmd = "tune --config " + q(s.in(s.run_config)) +
                      " --iters 0 --baseline full-eval --out " + q(dir / "run");
    REQUIRE(run_cli(cmd).exit_code == 0);
    auto refused = run_cli(cmd);
    CHECK(refused.exit_code == 1);
    CHECK(refused.contains("already holds artifacts"));
    CHECK(run_cli(cmd + " --force").exit_code == 0);
}

TEST_CASE("classifier-guided tune skips evaluations and logs them as estimated") {
    const auto& s = shared_runs();
    json report = load_json(s.in(s.cf_dir / "report.json"));
    CHECK(report.at("estimated_queries").get<long>() > 0);
    CHECK(report.at("executed_queries").get<long>() >= 8 * 3);

    auto rows = parse_eval_log(read_file(s.in(s.cf_dir / "eval_log.csv")));
    REQUIRE(rows.size() == (8 + 10) * 3);
    long estimated = 0;
    for (const auto& row : rows) {
        CHECK(row.label.width == 6);
        if (row.mode == EvalMode::Estimated)
            ++estimated;
    }
    CHECK(estimated == report.at("estimated_queries").get<long>());

    // Every artifact names the run configuration that produced it.
    std::string log_text = read_file(s.in(s.cf_dir / "eval_log.csv"));
    CHECK(log_text.rfind("# config_hash=" + s.cf_hash, 0) == 0);
    CHECK(report.at("config_hash").get<std::string>() == s.cf_hash);
    CHECK(load_json(s.in(s.cf_dir / "configs.json")).at("config_hash") == s.cf_hash);

    // The in-run refit at iteration 8 leaves a provenance-stamped checkpoint.
    auto tuned = load_classifier(s.in(s.cf_dir / "classifier_finetuned.json"));
    CHECK(tuned.finetune_task == "run-" + s.cf_hash);
    CHECK(tuned.pretrain_tasks == std::vector<std::string>{"hist-a"});
}

TEST_CASE("tune reruns produce byte-identical logs in a fresh directory") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    auto rerun = run_cli("tune --config " + q(s.in(s.run_config)) + " --classifier " +
                         q(s.in(s.pre_dir / "classifier.json")) + " --embedding " +
                         q(s.in(s.pre_dir / "embedding.json")) + " --out " + q(dir / "cf2"));
    REQUIRE(rerun.exit_code == 0);
    // series.csv carries measured per-iteration wall seconds, so only the
    // evaluation artifacts are expected to be byte-stable.
    CHECK(same_bytes(s.in(s.cf_dir / "eval_log.csv"), dir / "cf2" / "eval_log.csv"));
    CHECK(same_bytes(s.in(s.cf_dir / "configs.json"), dir / "cf2" / "configs.json"));
    CHECK(same_bytes(s.in(s.cf_dir / "classifier_finetuned.json"),
                     dir / "cf2" / "classifier_finetuned.json"));
}

TEST_CASE("tune diagnostics name the mismatched dimension and missing pieces") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    auto width = run_cli("tune --config " + q(s.in(s.run_config)) + " --n 5 --classifier " +
                         q(s.in(s.pre_dir / "classifier.json")) + " --embedding " +
                         q(s.in(s.pre_dir / "embedding.json")) + " --out " + q(dir / "w"));
    CHECK(width.exit_code == 1);
    CHECK(width.contains("label width mismatch"));

    auto no_ckpt = run_cli("tune --config " + q(s.in(s.run_config)) + " --out " + q(dir / "c"));
    CHECK(no_ckpt.exit_code == 1);
    CHECK(no_ckpt.contains("--classifier"));

    auto bad_tuner = run_cli("tune --config " + q(s.in(s.run_config)) +
                             " --tuner hillclimb --baseline full-eval --out " + q(dir / "t"));
    CHECK(bad_tuner.exit_code == 1);
    CHECK(bad_tuner.contains("unknown tuner 'hillclimb'"));

    auto both = run_cli("tune --config " + q(s.in(s.run_config)) +
                        " --simulator a.json --command b --baseline full-eval --out " +
                        q(dir / "b"));
    CHECK(both.exit_code != 0);
    CHECK(both.contains("excludes"));
}

TEST_CASE("tune drives an external command backend") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    fs::path script = dir / "fake_dbms.sh";
    write_file(script,
               "#!/bin/sh\n"
               "q=\"\"\n"
               "while [ $# -gt 0 ]; do\n"
               "  case \"$1\" in\n"
               "    --query) q=\"$2\"; shift 2;;\n"
               "    *) shift;;\n"
               "  esac\n"
               "done\n"
               "case \"$q\" in\n"
               "  q0) echo latency_seconds=0.5;;\n"
               "  q1) echo latency_seconds=0.7;;\n"
               "  *) echo latency_seconds=0.9;;\n"
               "esac\n");
    fs::permissions(script, fs::perms::owner_all);

    auto r = run_cli("tune --space " + q(s.in(s.space)) + " --workload " +
                     q(s.in(s.workload)) + " --command " + q(script) +
                     " --init 2 --iters 1 --n 4 --baseline full-eval --out " + q(dir / "run"));
    REQUIRE(r.exit_code == 0);
    auto rows = parse_eval_log(read_file(dir / "run" / "eval_log.csv"));
    REQUIRE(rows.size() == 3 * 3);
    for (const auto& row : rows) {
        double expect = row.query_id == "q0" ? 0.5 : row.query_id == "q1" ? 0.7 : 0.9;
        CHECK(row.latency == expect);
    }
}

TEST_CASE("report summarizes a log and compares it to a baseline") {
    const auto& s = shared_runs();
    auto to_stdout = run_cli("report --log " + q(s.in(s.cf_dir / "eval_log.csv")) +
                             " --baseline-log " + q(s.in(s.base_dir / "eval_log.csv")) +
                             " --simulator " + q(s.in(s.sim)) + " --space " +
                             q(s.in(s.space)) + " --configs " +
                             q(s.in(s.cf_dir / "configs.json")));
    REQUIRE(to_stdout.exit_code == 0);
    json doc = json::parse(to_stdout.output);

    CHECK(doc.at("run").at("iterations").get<int>() == 18);
    CHECK(doc.at("run").at("run_config_hash").get<std::string>() == s.cf_hash);
    CHECK(doc.at("baseline").at("estimated_queries").get<long>() == 0);
    double ratio = doc.at("comparison").at("executed_ratio").get<double>();
    CHECK(ratio > 0.0);
    CHECK(ratio < 1.0);
    CHECK(doc.at("comparison").at("best_total_ratio").get<double>() > 0.0);
    auto& metrics = doc.at("label_metrics");
    CHECK(metrics.at("accuracy").get<double>() >= 0.0);
    CHECK(metrics.at("accuracy").get<double>() <= 1.0);

    auto dir = make_temp_dir("cli");
    auto to_file = run_cli("report --log " + q(s.in(s.cf_dir / "eval_log.csv")) + " --out " +
                           q(dir / "report.json"));
    REQUIRE(to_file.exit_code == 0);
    json saved = load_json(dir / "report.json");
    CHECK(saved.at("run").at("executed_queries") == doc.at("run").at("executed_queries"));
}

TEST_CASE("report rejects empty logs and names malformed lines") {
    auto dir = make_temp_dir("cli");
    write_file(dir / "empty.csv", std::string(kEvalLogHeader) + "\n");
    auto empty = run_cli("report --log " + q(dir / "empty.csv"));
    CHECK(empty.exit_code == 1);
    CHECK(empty.contains("no rows"));

    write_file(dir / "bad.csv", std::string(kEvalLogHeader) +
                                    "\n1,k1,q0,executed,0.5,000001\nnot,a,row\n");
    auto bad = run_cli("report --log " + q(dir / "bad.csv"));
    CHECK(bad.exit_code == 1);
    CHECK(bad.contains("line 3"));
}

TEST_CASE("finetune stamps provenance and refuses thin history") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    auto r = run_cli("finetune --classifier " + q(s.in(s.pre_dir / "classifier.json")) +
                     " --embedding " + q(s.in(s.pre_dir / "embedding.json")) + " --space " +
                     q(s.in(s.space)) + " --workload " + q(s.in(s.workload)) + " --log " +
                     q(s.in(s.cf_dir / "eval_log.csv")) + " --configs " +
                     q(s.in(s.cf_dir / "configs.json")) + " --seed 4 --out " +
                     q(dir / "tuned.json"));
    REQUIRE(r.exit_code == 0);
    auto tuned = load_classifier(dir / "tuned.json");
    CHECK(tuned.finetune_task == "run-" + s.cf_hash);  // derived from the log itself
    CHECK(tuned.n == 6);

    // Two executed rows per query is below the per-query floor of 8.
    std::string thin = std::string(kEvalLogHeader) + "\n";
    auto rows = parse_eval_log(read_file(s.in(s.cf_dir / "eval_log.csv")));
    std::map<std::string, int> kept;
    for (const auto& row : rows) {
        if (row.mode != EvalMode::Executed || kept[row.query_id] >= 2)
            continue;
        kept[row.query_id]++;
        thin += std::to_string(row.iteration) + "," + row.config_id + "," + row.query_id +
                ",executed," + format_double(row.latency) + "," + row.label.to_string() + "\n";
    }
    write_file(dir / "thin.csv", thin);
    auto refused = run_cli("finetune --classifier " + q(s.in(s.pre_dir / "classifier.json")) +
                           " --embedding " + q(s.in(s.pre_dir / "embedding.json")) +
                           " --space " + q(s.in(s.space)) + " --workload " +
                           q(s.in(s.workload)) + " --log " + q(dir / "thin.csv") +
                           " --configs " + q(s.in(s.cf_dir / "configs.json")) + " --out " +
                           q(dir / "no.json"));
    CHECK(refused.exit_code == 1);
    CHECK(refused.contains("need at least 8"));
}

TEST_CASE("sweep runs every label width and summarizes the spread") {
    const auto& s = shared_runs();
    auto dir = make_temp_dir("cli");
    auto r = run_cli("sweep --config " + q(s.in(s.run_config)) + " --pretrain " +
                     q(s.in("pretrain.json")) + " --dims 4,6 --out " + q(dir / "sweep"));
    REQUIRE(r.exit_code == 0);

    json summary = load_json(dir / "sweep" / "sweep_summary.json");
    CHECK(summary.at("dims") == json::array({4, 6}));
    REQUIRE(summary.at("results").size() == 2);
    for (const auto& row : summary.at("results")) {
        int n = row.at("n").get<int>();
        fs::path sub = dir / "sweep" / ("n" + std::to_string(n));
        CHECK(fs::exists(sub / "pretrain" / "classifier.json"));
        CHECK(fs::exists(sub / "tune" / "eval_log.csv"));
        CHECK(load_classifier(sub / "pretrain" / "classifier.json").n == n);
        CHECK(row.at("holdout_accuracy").get<double>() >= 0.0);
    }
    CHECK(summary.at("accuracy_spread").get<double>() >= 0.0);
    CHECK(summary.at("best_total_spread_fraction").get<double>() >= 0.0);
}
