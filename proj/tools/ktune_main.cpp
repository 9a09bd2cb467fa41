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

// Command-line surface over the tuning library. Subcommands cover the
// whole pipeline: pretrain on historical tasks, fine-tune a checkpoint on
// a run's executed history, tune a live task, summarize logs, generate
// simulator specs, and sweep the label dimension. Every command is
// deterministic given its configuration and seeds, and every artifact
// carries the hash of the configuration that produced it.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ktune/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ktune;

namespace {

// ---- Shared plumbing -------------------------------------------------

std::string hash_of(const json& doc) {
    return hex64(fnv1a64(doc.dump()));
}

fs::path resolve_path(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path))
        fail(what + " file '" + path.string() + "' does not exist");
}

/// Run directories are immutable once written; reruns must be forced.
void prepare_run_dir(const fs::path& dir, bool force) {
    if (dir.empty())
        fail("no output directory; pass --out");
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir))
            fail("output path '" + dir.string() + "' exists and is not a directory");
        if (!fs::is_empty(dir) && !force)
            fail("run directory '" + dir.string() +
                 "' already holds artifacts; pass --force to overwrite");
    }
    fs::create_directories(dir);
}

void prepare_out_file(const fs::path& path, bool force) {
    if (path.empty())
        fail("no output path; pass --out");
    if (fs::exists(path) && !force)
        fail("output file '" + path.string() + "' exists; pass --force to overwrite");
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
}

void save_with_hash(const fs::path& path, json doc, const std::string& config_hash) {
    doc["config_hash"] = config_hash;
    save_json(path, doc);
}

json configs_to_json(const std::map<std::string, KnobConfiguration>& configs,
                     const std::string& config_hash) {
    json entries = json::object();
    for (const auto& [id, config] : configs)
        entries[id] = configuration_to_json(config);
    return json{{"version", 1}, {"config_hash", config_hash}, {"configs", std::move(entries)}};
}

std::map<std::string, KnobConfiguration> configs_from_json(const json& doc) {
    std::map<std::string, KnobConfiguration> configs;
    const json& entries = doc.contains("configs") ? doc.at("configs") : doc;
    for (const auto& [id, content] : entries.items())
        configs.emplace(id, configuration_from_json(content));
    return configs;
}

/// Plain evaluation records: `query_id,config_id,latency_seconds`.
std::vector<LatencyRecord> parse_records_csv(const std::string& text) {
    std::vector<LatencyRecord> records;
    int line_no = 0;
    for (const auto& line : split(text, '\n')) {
        ++line_no;
        if (line.empty() || line.front() == '#' ||
            line == "query_id,config_id,latency_seconds")
            continue;
        auto fields = split(line, ',');
        if (fields.size() != 3)
            fail("records line " + std::to_string(line_no) + ": expected 3 fields");
        records.push_back({std::string(fields[0]), std::string(fields[1]),
                           parse_double(fields[2])});
    }
    return records;
}

/// First `# config_hash=<hex>` comment of a log, if present.
std::string log_config_hash(const std::string& text) {
    const std::string tag = "# config_hash=";
    for (const auto& line : split(text, '\n')) {
        if (line.rfind(tag, 0) == 0)
            return line.substr(tag.size());
        if (!line.empty() && line.front() != '#')
            break;
    }
    return {};
}

std::unique_ptr<Tuner> make_tuner(const std::string& choice, const KnobSpace& space,
                                  std::uint64_t seed) {
    if (choice == "bo")
        return std::make_unique<BoTuner>(space, mix_seed(seed, 0x74756E72ULL));
    if (choice == "random")
        return std::make_unique<RandomTuner>(space, mix_seed(seed, 0x74756E72ULL));
    fail("unknown tuner '" + choice + "' (expected 'bo' or 'random')");
}

// ---- Run configuration ------------------------------------------------

struct BackendConfig {
    std::string simulator;  // spec file path
    std::string command;    // external command line
    double time_scale = 0.0;
};

/// Mirrors the run-config file verbatim; `out` is operational and stays
/// outside the config hash so reruns into fresh directories still match.
struct RunConfig {
    std::string knob_space;
    std::string workload;
    BackendConfig backend;
    std::string tuner = "bo";
    int n = 16;
    int init_count = 20;
    int iterations = 100;
    std::uint64_t seed = 0;
    int m_min = kDefaultMMin;
    double tau = kDefaultTau;
    int finetune_after = kDefaultFinetuneIterations;
    std::string out;
    fs::path base;  // directory of the config file, for relative paths
};

RunConfig run_config_from_json(const json& doc, fs::path base) {
    RunConfig c;
    c.base = std::move(base);
    if (doc.contains("knob_space")) c.knob_space = doc["knob_space"].get<std::string>();
    if (doc.contains("workload")) c.workload = doc["workload"].get<std::string>();
    if (doc.contains("backend")) {
        const json& b = doc["backend"];
        if (b.contains("simulator")) c.backend.simulator = b["simulator"].get<std::string>();
        if (b.contains("command")) c.backend.command = b["command"].get<std::string>();
        if (b.contains("time_scale")) c.backend.time_scale = b["time_scale"].get<double>();
    }
    if (doc.contains("tuner")) c.tuner = doc["tuner"].get<std::string>();
    if (doc.contains("n")) c.n = doc["n"].get<int>();
    if (doc.contains("init_count")) c.init_count = doc["init_count"].get<int>();
    if (doc.contains("iterations")) c.iterations = doc["iterations"].get<int>();
    if (doc.contains("seed")) c.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("m_min")) c.m_min = doc["m_min"].get<int>();
    if (doc.contains("tau")) c.tau = doc["tau"].get<double>();
    if (doc.contains("finetune_after")) c.finetune_after = doc["finetune_after"].get<int>();
    if (doc.contains("out")) c.out = doc["out"].get<std::string>();
    return c;
}

json run_config_to_json(const RunConfig& c) {
    json backend = json::object();
    if (!c.backend.simulator.empty()) backend["simulator"] = c.backend.simulator;
    if (!c.backend.command.empty()) backend["command"] = c.backend.command;
    backend["time_scale"] = c.backend.time_scale;
    return json{{"knob_space", c.knob_space},
                {"workload", c.workload},
                {"backend", std::move(backend)},
                {"tuner", c.tuner},
                {"n", c.n},
                {"init_count", c.init_count},
                {"iterations", c.iterations},
                {"seed", c.seed},
                {"m_min", c.m_min},
                {"tau", c.tau},
                {"finetune_after", c.finetune_after}};
}

void validate_run_config(const RunConfig& c) {
    if (c.n < 1 || c.n > 64)
        fail("run config: n must be in [1, 64]");
    if (c.knob_space.empty())
        fail("run config: missing knob_space");
    if (c.workload.empty())
        fail("run config: missing workload");
    bool sim = !c.backend.simulator.empty();
    bool cmd = !c.backend.command.empty();
    if (sim == cmd)
        fail("run config: backend needs exactly one of 'simulator' or 'command'");
    require_file(resolve_path(c.base, c.knob_space), "knob space");
    require_file(resolve_path(c.base, c.workload), "workload");
    if (sim)
        require_file(resolve_path(c.base, c.backend.simulator), "simulator spec");
}

std::unique_ptr<EvalBackend> make_backend(const RunConfig& c, const KnobSpace& space) {
    if (!c.backend.simulator.empty()) {
        auto spec = load_simulator_spec(resolve_path(c.base, c.backend.simulator));
        return std::make_unique<SimulatorBackend>(std::move(spec), space,
                                                  c.backend.time_scale);
    }
    return std::make_unique<ExternalCommandBackend>(c.backend.command);
}

/// Checkpoint-vs-run compatibility; diagnostics name the dimension.
void check_compatibility(const ClassifierModel& classifier, int embedding_d,
                         const KnobSpace& space, int n) {
    if (classifier.d != embedding_d)
        fail("embedding width mismatch: classifier expects d=" +
             std::to_string(classifier.d) + ", embedding checkpoint has d=" +
             std::to_string(embedding_d));
    auto width = static_cast<int>(space.encoding_width());
    if (classifier.encoding_width != width)
        fail("knob encoding width mismatch: classifier expects " +
             std::to_string(classifier.encoding_width) + ", knob space encodes to " +
             std::to_string(width));
    if (classifier.n != n)
        fail("label width mismatch: classifier outputs n=" + std::to_string(classifier.n) +
             ", run config has n=" + std::to_string(n));
}

/// Executes one tuning run and writes the full artifact set into `dir`:
/// streamed evaluation log, report, series, config snapshot, the contents
/// of every visited configuration, and the fine-tuned checkpoint when the
/// in-run refit fired.
TuningOutcome execute_tune(const fs::path& dir, const RunConfig& config,
                           const std::string& config_hash, const KnobSpace& space,
                           const Workload& workload, bool baseline,
                           ClassifierPredictor* predictor) {
    auto backend = make_backend(config, space);
    auto tuner = make_tuner(config.tuner, space, config.seed);
    auto query_ids = workload_query_ids(workload);
    for (const auto& id : query_ids)
        if (!backend->knows_query(id))
            fail("backend does not know query '" + id + "'");

    TuningParams params;
    params.task_id = "run-" + config_hash;
    params.n = config.n;
    params.init_count = config.init_count;
    params.iterations = config.iterations;
    params.seed = config.seed;
    params.m_min = config.m_min;
    params.tau = config.tau;
    params.finetune_after = config.finetune_after;

    std::ofstream log(dir / "eval_log.csv");
    if (!log)
        fail("cannot write " + (dir / "eval_log.csv").string());
    log << "# config_hash=" << config_hash << "\n" << kEvalLogHeader << "\n";
    auto on_row = [&](const DatasetRow& row) {
        std::string text;
        append_eval_log_row(text, row);
        log << text << std::flush;
    };

    TuningOutcome outcome;
    if (baseline) {
        outcome = run_full_eval_baseline(query_ids, space, *backend, *tuner, params, on_row);
    } else {
        outcome = run_tuning(query_ids, space, *backend, *tuner, *predictor, params, on_row);
    }
    log.close();

    json snapshot = run_config_to_json(config);
    snapshot["out"] = dir.string();
    snapshot["baseline"] = baseline;
    save_with_hash(dir / "config.json", std::move(snapshot), config_hash);

    json report = report_to_json(outcome.report);
    report["baseline"] = baseline;
    report["queries"] = query_ids;
    save_with_hash(dir / "report.json", std::move(report), config_hash);

    write_file(dir / "series.csv",
               "# config_hash=" + config_hash + "\n" + series_to_csv(outcome.report.series));

    std::map<std::string, KnobConfiguration> visited;
    for (const auto& row : outcome.dataset)
        visited.emplace(row.config_id, row.config);
    save_json(dir / "configs.json", configs_to_json(visited, config_hash));

    // The in-run refit warns and keeps the pretrained weights when any
    // query is short on executed history; the provenance stamp is the
    // marker that it actually ran.
    bool finetuned = predictor != nullptr && !baseline &&
                     predictor->model().finetune_task == "run-" + config_hash;
    if (finetuned)
        save_with_hash(dir / "classifier_finetuned.json",
                       classifier_to_json(predictor->model()), config_hash);
    return outcome;
}

// ---- pretrain ----------------------------------------------------------

struct PretrainTaskConfig {
    std::string task_id;
    std::string knob_space;
    std::string workload;
    std::string simulator;  // generate records through the simulator, or
    std::string records;    // load plain records...
    std::string eval_log;   // ...or executed rows of a tuning run's log
    std::string configs;    // config id -> content, for records/eval_log
    int eval_count = 100;
};

struct PretrainConfig {
    int n = 16;
    int d = kDefaultEmbeddingWidth;
    std::uint64_t seed = 0;
    double tau = kDefaultTau;
    double holdout_fraction = 0.2;
    int importance_repeats = kDefaultImportanceRepeats;
    std::vector<PretrainTaskConfig> tasks;
    fs::path base;
};

PretrainConfig pretrain_config_from_json(const json& doc, fs::path base) {
    PretrainConfig c;
    c.base = std::move(base);
    if (doc.contains("n")) c.n = doc["n"].get<int>();
    if (doc.contains("d")) c.d = doc["d"].get<int>();
    if (doc.contains("seed")) c.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("tau")) c.tau = doc["tau"].get<double>();
    if (doc.contains("holdout_fraction"))
        c.holdout_fraction = doc["holdout_fraction"].get<double>();
    if (doc.contains("importance_repeats"))
        c.importance_repeats = doc["importance_repeats"].get<int>();
    if (doc.contains("tasks"))
        for (const auto& t : doc["tasks"]) {
            PretrainTaskConfig task;
            task.task_id = t.at("task_id").get<std::string>();
            task.knob_space = t.at("knob_space").get<std::string>();
            task.workload = t.at("workload").get<std::string>();
            if (t.contains("simulator")) task.simulator = t["simulator"].get<std::string>();
            if (t.contains("records")) task.records = t["records"].get<std::string>();
            if (t.contains("eval_log")) task.eval_log = t["eval_log"].get<std::string>();
            if (t.contains("configs")) task.configs = t["configs"].get<std::string>();
            if (t.contains("eval_count")) task.eval_count = t["eval_count"].get<int>();
            c.tasks.push_back(std::move(task));
        }
    return c;
}

json pretrain_config_to_json(const PretrainConfig& c) {
    json tasks = json::array();
    for (const auto& t : c.tasks) {
        json task{{"task_id", t.task_id},
                  {"knob_space", t.knob_space},
                  {"workload", t.workload}};
        if (!t.simulator.empty()) {
            task["simulator"] = t.simulator;
            task["eval_count"] = t.eval_count;
        }
        if (!t.records.empty()) task["records"] = t.records;
        if (!t.eval_log.empty()) task["eval_log"] = t.eval_log;
        if (!t.configs.empty()) task["configs"] = t.configs;
        tasks.push_back(std::move(task));
    }
    return json{{"n", c.n},
                {"d", c.d},
                {"seed", c.seed},
                {"tau", c.tau},
                {"holdout_fraction", c.holdout_fraction},
                {"importance_repeats", c.importance_repeats},
                {"tasks", std::move(tasks)}};
}

std::vector<PretrainTask> load_pretrain_tasks(const PretrainConfig& config) {
    if (config.tasks.empty())
        fail("pretrain config lists no tasks");
    std::vector<PretrainTask> tasks;
    for (const auto& t : config.tasks) {
        auto space_path = resolve_path(config.base, t.knob_space);
        auto workload_path = resolve_path(config.base, t.workload);
        require_file(space_path, "knob space");
        require_file(workload_path, "workload");
        auto space = load_knob_space(space_path);
        auto workload = load_workload(workload_path);

        if (!t.simulator.empty()) {
            auto sim_path = resolve_path(config.base, t.simulator);
            require_file(sim_path, "simulator spec");
            tasks.push_back(simulate_task(t.task_id, std::move(space), std::move(workload),
                                          load_simulator_spec(sim_path), t.eval_count,
                                          config.seed));
            continue;
        }

        if (t.configs.empty())
            fail("task '" + t.task_id + "': records or eval_log input needs 'configs'");
        auto configs_path = resolve_path(config.base, t.configs);
        require_file(configs_path, "configs");
        PretrainTask task;
        task.task_id = t.task_id;
        task.space = std::move(space);
        task.workload = std::move(workload);
        task.configs = configs_from_json(load_json(configs_path));
        if (!t.records.empty()) {
            auto path = resolve_path(config.base, t.records);
            require_file(path, "records");
            task.records = parse_records_csv(read_file(path));
        } else if (!t.eval_log.empty()) {
            auto path = resolve_path(config.base, t.eval_log);
            require_file(path, "evaluation log");
            for (const auto& row : parse_eval_log(read_file(path)))
                if (row.mode == EvalMode::Executed)
                    task.records.push_back({row.query_id, row.config_id, row.latency});
        } else {
            fail("task '" + t.task_id + "': needs one of 'simulator', 'records', 'eval_log'");
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

json holdout_to_json(const ClassificationMetrics& m) {
    return json{{"accuracy", m.accuracy},
                {"precision", m.precision},
                {"recall", m.recall},
                {"accuracy_defaulted", m.accuracy_defaulted},
                {"precision_defaulted", m.precision_defaulted},
                {"recall_defaulted", m.recall_defaulted},
                {"tp", m.tp},
                {"tn", m.tn},
                {"fp", m.fp},
                {"fn", m.fn}};
}

PretrainResult execute_pretrain(const fs::path& dir, const PretrainConfig& config,
                                const std::string& config_hash) {
    auto tasks = load_pretrain_tasks(config);
    PretrainOptions options;
    options.n = config.n;
    options.d = config.d;
    options.seed = config.seed;
    options.tau = config.tau;
    options.holdout_fraction = config.holdout_fraction;
    options.importance_repeats = config.importance_repeats;
    auto result = pretrain(tasks, options);

    save_with_hash(dir / "classifier.json", classifier_to_json(result.classifier),
                   config_hash);
    save_with_hash(dir / "embedding.json",
                   embedding_to_json(result.embedding, result.head), config_hash);
    save_with_hash(dir / "union_space.json", knob_space_to_json(result.union_space),
                   config_hash);
    save_with_hash(dir / "training_set.json", training_set_to_json(result), config_hash);

    json summary{{"version", 1},
                 {"n", config.n},
                 {"d", config.d},
                 {"seed", config.seed},
                 {"embedding_epochs", result.embedding_train.epochs},
                 {"classifier_epochs", result.classifier_train.epochs},
                 {"holdout_present", result.holdout_present}};
    json task_list = json::array();
    for (const auto& task : tasks)
        task_list.push_back(json{{"task_id", task.task_id},
                                 {"configs", task.configs.size()},
                                 {"records", task.records.size()}});
    summary["tasks"] = std::move(task_list);
    if (result.holdout_present)
        summary["holdout"] = holdout_to_json(result.holdout);
    save_with_hash(dir / "pretrain_summary.json", std::move(summary), config_hash);

    json snapshot = pretrain_config_to_json(config);
    snapshot["out"] = dir.string();
    save_with_hash(dir / "config.json", std::move(snapshot), config_hash);
    return result;
}

// ---- report ------------------------------------------------------------

struct IterationSummary {
    int iteration = 0;
    double total = 0.0;
    double executed_seconds = 0.0;
    long executed = 0;
    long estimated = 0;
};

std::vector<IterationSummary> summarize_iterations(const std::vector<EvalLogRow>& rows) {
    std::vector<IterationSummary> out;
    for (const auto& row : rows) {
        if (out.empty() || out.back().iteration != row.iteration) {
            out.push_back({});
            out.back().iteration = row.iteration;
        }
        auto& it = out.back();
        it.total += row.latency;
        if (row.mode == EvalMode::Executed) {
            it.executed++;
            it.executed_seconds += row.latency;
        } else {
            it.estimated++;
        }
    }
    return out;
}

json report_from_log(const std::string& text, const std::string& name) {
    auto rows = parse_eval_log(text);
    if (rows.empty())
        fail("evaluation log '" + name + "' has no rows");
    auto iterations = summarize_iterations(rows);

    long executed = 0, estimated = 0;
    for (const auto& it : iterations) {
        executed += it.executed;
        estimated += it.estimated;
    }
    std::size_t best = 0;
    std::vector<double> totals;
    for (std::size_t i = 0; i < iterations.size(); ++i) {
        totals.push_back(iterations[i].total);
        if (iterations[i].total < iterations[best].total)
            best = i;
    }
    double executed_seconds = 0.0;
    json series = json::array();
    double running_best = std::numeric_limits<double>::infinity();
    for (const auto& it : iterations) {
        executed_seconds += it.executed_seconds;
        running_best = std::min(running_best, it.total);
        series.push_back(json{{"cumulative_executed_seconds", executed_seconds},
                              {"best_total_seconds", running_best}});
    }

    json doc{{"log", name},
             {"iterations", iterations.size()},
             {"executed_queries", executed},
             {"estimated_queries", estimated},
             {"estimated_fraction",
              static_cast<double>(estimated) / static_cast<double>(executed + estimated)},
             {"best_iteration", iterations[best].iteration},
             {"best_total_seconds", iterations[best].total},
             {"average_executed_seconds_per_iteration",
              executed_seconds / static_cast<double>(iterations.size())},
             {"p90_iteration_total_seconds", nearest_rank(totals, 0.9)},
             {"series", std::move(series)}};
    std::string source_hash = log_config_hash(text);
    if (!source_hash.empty())
        doc["run_config_hash"] = source_hash;
    return doc;
}

/// Scores the logged labels against simulator ground truth: bit r of the
/// truth label marks the regime the configuration actually lands in.
json accuracy_vs_ground_truth(const std::vector<EvalLogRow>& rows,
                              const SimulatorBackend& backend,
                              const std::map<std::string, KnobConfiguration>& configs) {
    std::vector<CategoryLabel> predictions, truths;
    for (const auto& row : rows) {
        auto it = configs.find(row.config_id);
        if (it == configs.end())
            fail("log references config '" + row.config_id + "' missing from --configs");
        int regime = backend.regime_of(it->second, row.query_id);
        CategoryLabel truth(0, row.label.width);
        truth.set(regime);
        predictions.push_back(row.label);
        truths.push_back(truth);
    }
    return holdout_to_json(classification_metrics(predictions, truths));
}

// ---- main --------------------------------------------------------------

struct CommonArgs {
    std::string out;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--out", args.out, "output directory or file");
    auto* seed = cmd->add_option("--seed", args.seed, "seed override");
    cmd->add_flag("--force", args.force, "overwrite existing outputs");
    seed->each([&args](const std::string&) { args.seed_given = true; });
}

int run(int argc, char** argv) {
    CLI::App app{"uncertainty-aware knob tuning for query workloads"};
    app.require_subcommand(1);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train embedding + classifier checkpoints "
                                               "from historical tasks");
    CommonArgs pre_args;
    std::string pre_config_path;
    pre->add_option("--config", pre_config_path, "pretrain config file")->required();
    add_common(pre, pre_args);
    pre->callback([&] {
        fs::path config_path(pre_config_path);
        auto config = pretrain_config_from_json(load_json(config_path),
                                                config_path.parent_path());
        if (pre_args.seed_given)
            config.seed = pre_args.seed;
        std::string config_hash = hash_of(pretrain_config_to_json(config));
        fs::path dir(pre_args.out);
        prepare_run_dir(dir, pre_args.force);
        auto result = execute_pretrain(dir, config, config_hash);
        std::cout << "pretrained on " << config.tasks.size() << " task(s), n=" << config.n
                  << ", d=" << config.d << "\n";
        if (result.holdout_present)
            std::cout << "holdout accuracy " << format_double(result.holdout.accuracy)
                      << " precision " << format_double(result.holdout.precision)
                      << " recall " << format_double(result.holdout.recall) << "\n";
        std::cout << "checkpoints in " << dir.string() << " (config " << config_hash
                  << ")\n";
    });

    // finetune
    auto* fine = app.add_subcommand("finetune", "refit a classifier checkpoint on a "
                                                "run's executed history");
    CommonArgs fine_args;
    std::string fine_classifier, fine_embedding, fine_space, fine_workload, fine_log,
        fine_configs, fine_task;
    double fine_tau = kDefaultTau;
    fine->add_option("--classifier", fine_classifier, "classifier checkpoint")->required();
    fine->add_option("--embedding", fine_embedding, "embedding checkpoint")->required();
    fine->add_option("--space", fine_space, "knob space file")->required();
    fine->add_option("--workload", fine_workload, "workload file")->required();
    fine->add_option("--log", fine_log, "evaluation log with executed rows")->required();
    fine->add_option("--configs", fine_configs, "configs.json of the same run")->required();
    fine->add_option("--task", fine_task, "task id recorded as provenance");
    fine->add_option("--tau", fine_tau, "responsibility threshold");
    add_common(fine, fine_args);
    fine->callback([&] {
        for (const auto& [path, what] :
             std::vector<std::pair<std::string, std::string>>{{fine_classifier, "classifier"},
                                                              {fine_embedding, "embedding"},
                                                              {fine_space, "knob space"},
                                                              {fine_workload, "workload"},
                                                              {fine_log, "evaluation log"},
                                                              {fine_configs, "configs"}})
            require_file(path, what);
        auto model = load_classifier(fine_classifier);
        auto [embed_model, head] = load_embedding(fine_embedding);
        auto space = load_knob_space(fine_space);
        auto workload = load_workload(fine_workload);
        check_compatibility(model, embed_model.d, space, model.n);
        auto configs = configs_from_json(load_json(fine_configs));
        std::string log_text = read_file(fine_log);

        std::vector<ExecutedRecord> executed;
        std::map<std::string, std::size_t> per_query;
        for (const auto& row : parse_eval_log(log_text)) {
            if (row.mode != EvalMode::Executed)
                continue;
            auto it = configs.find(row.config_id);
            if (it == configs.end())
                fail("log references config '" + row.config_id + "' missing from --configs");
            executed.push_back({row.query_id, row.config_id,
                                encode_configuration(space, it->second), row.latency});
            per_query[row.query_id]++;
        }
        if (executed.empty())
            fail("evaluation log '" + fine_log + "' has no executed rows");
        for (const auto& [query_id, count] : per_query)
            if (count < 8)
                fail("finetune: query '" + query_id + "' has " + std::to_string(count) +
                     " executed samples, need at least 8");

        std::string task = fine_task;
        if (task.empty()) {
            std::string source = log_config_hash(log_text);
            task = source.empty() ? "live-task" : "run-" + source;
        }
        std::map<std::string, QueryEmbedding> embeddings;
        for (const auto& [query_id, plan] : workload.queries)
            embeddings.emplace(query_id, embed(embed_model, plan));
        ClassifierPredictor predictor(std::move(model), std::move(embeddings), {}, task);
        predictor.finetune(executed, mix_seed(fine_args.seed, 0x66696E65ULL), fine_tau);

        json invocation{{"classifier", fine_classifier}, {"embedding", fine_embedding},
                        {"space", fine_space},           {"workload", fine_workload},
                        {"log", fine_log},               {"configs", fine_configs},
                        {"task", task},                  {"tau", fine_tau},
                        {"seed", fine_args.seed}};
        std::string config_hash = hash_of(invocation);
        fs::path out(fine_args.out.empty() ? "classifier_finetuned.json" : fine_args.out);
        prepare_out_file(out, fine_args.force);
        save_with_hash(out, classifier_to_json(predictor.model()), config_hash);
        std::cout << "finetuned on " << executed.size() << " executed rows across "
                  << per_query.size() << " queries\nwrote " << out.string() << " (config "
                  << config_hash << ")\n";
    });

    // tune
    auto* tune = app.add_subcommand("tune", "run the tuning loop against a workload");
    CommonArgs tune_args;
    std::string tune_config_path, tune_space, tune_workload, tune_simulator, tune_command,
        tune_tuner, tune_classifier, tune_embedding, tune_baseline;
    int tune_n = -1, tune_init = -1, tune_iters = -1, tune_m_min = -1, tune_finetune = -1;
    double tune_tau = -1.0, tune_time_scale = -1.0;
    tune->add_option("--config", tune_config_path, "run config file");
    tune->add_option("--space", tune_space, "knob space file");
    tune->add_option("--workload", tune_workload, "workload file");
    auto* sim_opt = tune->add_option("--simulator", tune_simulator, "simulator spec backend");
    tune->add_option("--command", tune_command, "external command backend")
        ->excludes(sim_opt);
    tune->add_option("--time-scale", tune_time_scale, "simulated seconds to wall seconds");
    tune->add_option("--tuner", tune_tuner, "bo or random");
    tune->add_option("--n", tune_n, "label width");
    tune->add_option("--init", tune_init, "initialization sample count");
    tune->add_option("--iters", tune_iters, "iterative-phase rounds");
    tune->add_option("--m-min", tune_m_min, "history required to trust a label");
    tune->add_option("--tau", tune_tau, "responsibility threshold");
    tune->add_option("--finetune-after", tune_finetune, "refit after this iteration; 0 off");
    tune->add_option("--classifier", tune_classifier, "classifier checkpoint");
    tune->add_option("--embedding", tune_embedding, "embedding checkpoint");
    tune->add_option("--baseline", tune_baseline, "'full-eval' disables judge/estimate");
    add_common(tune, tune_args);
    tune->callback([&] {
        RunConfig config;
        if (!tune_config_path.empty()) {
            fs::path path(tune_config_path);
            config = run_config_from_json(load_json(path), path.parent_path());
        }
        if (!tune_space.empty()) config.knob_space = tune_space;
        if (!tune_workload.empty()) config.workload = tune_workload;
        if (!tune_simulator.empty()) {
            config.backend.simulator = tune_simulator;
            config.backend.command.clear();
        }
        if (!tune_command.empty()) {
            config.backend.command = tune_command;
            config.backend.simulator.clear();
        }
        if (tune_time_scale >= 0.0) config.backend.time_scale = tune_time_scale;
        if (!tune_tuner.empty()) config.tuner = tune_tuner;
        if (tune_n >= 0) config.n = tune_n;
        if (tune_init >= 0) config.init_count = tune_init;
        if (tune_iters >= 0) config.iterations = tune_iters;
        if (tune_m_min >= 0) config.m_min = tune_m_min;
        if (tune_tau >= 0.0) config.tau = tune_tau;
        if (tune_finetune >= 0) config.finetune_after = tune_finetune;
        if (tune_args.seed_given) config.seed = tune_args.seed;
        if (!tune_args.out.empty()) config.out = tune_args.out;
        // Flag-supplied paths are relative to the working directory.
        if (!tune_space.empty() || !tune_workload.empty() || !tune_simulator.empty())
            config.base.clear();
        validate_run_config(config);

        bool baseline = false;
        if (!tune_baseline.empty()) {
            if (tune_baseline != "full-eval")
                fail("unknown baseline '" + tune_baseline + "' (expected 'full-eval')");
            baseline = true;
        }

        auto space = load_knob_space(resolve_path(config.base, config.knob_space));
        auto workload = load_workload(resolve_path(config.base, config.workload));

        json hashed = run_config_to_json(config);
        hashed["baseline"] = baseline;
        std::string config_hash = hash_of(hashed);
        fs::path dir(config.out);
        prepare_run_dir(dir, tune_args.force);

        std::optional<ClassifierPredictor> predictor;
        if (!baseline) {
            if (tune_classifier.empty() || tune_embedding.empty())
                fail("tune needs --classifier and --embedding checkpoints "
                     "(or --baseline full-eval)");
            require_file(tune_classifier, "classifier");
            require_file(tune_embedding, "embedding");
            auto model = load_classifier(tune_classifier);
            auto [embed_model, head] = load_embedding(tune_embedding);
            check_compatibility(model, embed_model.d, space, config.n);
            std::map<std::string, QueryEmbedding> embeddings;
            for (const auto& [query_id, plan] : workload.queries)
                embeddings.emplace(query_id, embed(embed_model, plan));
            predictor.emplace(std::move(model), std::move(embeddings), ClassifierHyper{},
                              "run-" + config_hash);
        }

        auto outcome = execute_tune(dir, config, config_hash, space, workload, baseline,
                                    predictor ? &*predictor : nullptr);
        std::cout << "best config " << outcome.report.best_config_id << " total "
                  << format_double(outcome.report.best_total) << " s\nexecuted "
                  << outcome.report.executed_queries << " estimated "
                  << outcome.report.estimated_queries << " query evaluations\nartifacts in "
                  << dir.string() << " (config " << config_hash << ")\n";
    });

    // report
    auto* rep = app.add_subcommand("report", "summarize evaluation logs");
    CommonArgs rep_args;
    std::string rep_log, rep_baseline_log, rep_simulator, rep_space, rep_configs;
    rep->add_option("--log", rep_log, "evaluation log")->required();
    rep->add_option("--baseline-log", rep_baseline_log, "full-eval log to compare against");
    rep->add_option("--simulator", rep_simulator, "simulator spec for ground-truth labels");
    rep->add_option("--space", rep_space, "knob space file (with --simulator)");
    rep->add_option("--configs", rep_configs, "configs.json of the run (with --simulator)");
    add_common(rep, rep_args);
    rep->callback([&] {
        require_file(rep_log, "evaluation log");
        std::string text = read_file(rep_log);
        json doc{{"version", 1}, {"run", report_from_log(text, rep_log)}};

        if (!rep_simulator.empty() || !rep_space.empty() || !rep_configs.empty()) {
            if (rep_simulator.empty() || rep_space.empty() || rep_configs.empty())
                fail("ground-truth scoring needs --simulator, --space, and --configs");
            require_file(rep_simulator, "simulator spec");
            require_file(rep_space, "knob space");
            require_file(rep_configs, "configs");
            SimulatorBackend backend(load_simulator_spec(rep_simulator),
                                     load_knob_space(rep_space));
            auto configs = configs_from_json(load_json(rep_configs));
            doc["label_metrics"] =
                accuracy_vs_ground_truth(parse_eval_log(text), backend, configs);
        }

        if (!rep_baseline_log.empty()) {
            require_file(rep_baseline_log, "baseline log");
            json base = report_from_log(read_file(rep_baseline_log), rep_baseline_log);
            double ratio = doc["run"]["executed_queries"].get<double>() /
                           base["executed_queries"].get<double>();
            double best_ratio = doc["run"]["best_total_seconds"].get<double>() /
                                base["best_total_seconds"].get<double>();
            doc["baseline"] = std::move(base);
            doc["comparison"] = json{{"executed_ratio", ratio},
                                     {"best_total_ratio", best_ratio}};
        }

        json invocation{{"log", rep_log},
                        {"baseline_log", rep_baseline_log},
                        {"simulator", rep_simulator},
                        {"space", rep_space},
                        {"configs", rep_configs}};
        doc["config_hash"] = hash_of(invocation);
        if (rep_args.out.empty()) {
            std::cout << doc.dump(2) << "\n";
        } else {
            prepare_out_file(rep_args.out, rep_args.force);
            save_json(rep_args.out, doc);
            std::cout << "wrote " << rep_args.out << "\n";
        }
    });

    // simulate-spec
    auto* sim = app.add_subcommand("simulate-spec", "generate a simulator spec for a "
                                                    "knob space");
    CommonArgs sim_args;
    std::string sim_space;
    int sim_queries = 10, sim_min_regimes = 2, sim_max_regimes = 3;
    sim->add_option("--space", sim_space, "knob space file")->required();
    sim->add_option("--queries", sim_queries, "query count");
    sim->add_option("--min-regimes", sim_min_regimes, "fewest regimes per query");
    sim->add_option("--max-regimes", sim_max_regimes, "most regimes per query");
    add_common(sim, sim_args);
    sim->callback([&] {
        require_file(sim_space, "knob space");
        auto space = load_knob_space(sim_space);
        auto spec = generate_simulator_spec(space, sim_args.seed, sim_queries,
                                            sim_min_regimes, sim_max_regimes);
        fs::path out(sim_args.out);
        prepare_out_file(out, sim_args.force);
        json invocation{{"space", sim_space},
                        {"queries", sim_queries},
                        {"min_regimes", sim_min_regimes},
                        {"max_regimes", sim_max_regimes},
                        {"seed", sim_args.seed}};
        save_with_hash(out, simulator_spec_to_json(spec), hash_of(invocation));
        std::cout << "wrote " << out.string() << " with " << sim_queries << " queries\n";
    });

    // sweep
    auto* sweep = app.add_subcommand("sweep", "pretrain + tune across label widths");
    CommonArgs sweep_args;
    std::string sweep_run_config, sweep_pretrain_config;
    std::vector<int> sweep_dims{8, 10, 12, 14, 16};
    sweep->add_option("--config", sweep_run_config, "run config file")->required();
    sweep->add_option("--pretrain", sweep_pretrain_config, "pretrain config file")
        ->required();
    sweep->add_option("--dims", sweep_dims, "label widths to sweep")->delimiter(',');
    add_common(sweep, sweep_args);
    sweep->callback([&] {
        fs::path run_path(sweep_run_config);
        fs::path pre_path(sweep_pretrain_config);
        auto base_run = run_config_from_json(load_json(run_path), run_path.parent_path());
        auto base_pre =
            pretrain_config_from_json(load_json(pre_path), pre_path.parent_path());
        if (sweep_args.seed_given) {
            base_run.seed = sweep_args.seed;
            base_pre.seed = sweep_args.seed;
        }
        if (sweep_dims.empty())
            fail("sweep: empty --dims");
        if (!(base_pre.holdout_fraction > 0.0))
            fail("sweep: pretrain holdout_fraction must be > 0 to score accuracy");
        fs::path dir(sweep_args.out);
        prepare_run_dir(dir, sweep_args.force);

        json results = json::array();
        double acc_lo = 1.0, acc_hi = 0.0;
        double best_lo = std::numeric_limits<double>::infinity(), best_hi = 0.0;
        for (int n : sweep_dims) {
            PretrainConfig pre_config = base_pre;
            pre_config.n = n;
            RunConfig run_config = base_run;
            run_config.n = n;
            validate_run_config(run_config);

            fs::path sub = dir / ("n" + std::to_string(n));
            fs::create_directories(sub / "pretrain");
            std::string pre_hash = hash_of(pretrain_config_to_json(pre_config));
            auto pre_result = execute_pretrain(sub / "pretrain", pre_config, pre_hash);

            auto space = load_knob_space(resolve_path(run_config.base, run_config.knob_space));
            auto workload = load_workload(resolve_path(run_config.base, run_config.workload));
            check_compatibility(pre_result.classifier, pre_result.embedding.d, space, n);
            std::map<std::string, QueryEmbedding> embeddings;
            for (const auto& [query_id, plan] : workload.queries)
                embeddings.emplace(query_id, embed(pre_result.embedding, plan));

            json hashed = run_config_to_json(run_config);
            hashed["baseline"] = false;
            std::string run_hash = hash_of(hashed);
            ClassifierPredictor predictor(pre_result.classifier, std::move(embeddings),
                                          ClassifierHyper{}, "run-" + run_hash);
            fs::create_directories(sub / "tune");
            auto outcome = execute_tune(sub / "tune", run_config, run_hash, space, workload,
                                        false, &predictor);

            double accuracy = pre_result.holdout.accuracy;
            acc_lo = std::min(acc_lo, accuracy);
            acc_hi = std::max(acc_hi, accuracy);
            best_lo = std::min(best_lo, outcome.report.best_total);
            best_hi = std::max(best_hi, outcome.report.best_total);
            results.push_back(json{{"n", n},
                                   {"holdout_accuracy", accuracy},
                                   {"best_total_seconds", outcome.report.best_total},
                                   {"executed_queries", outcome.report.executed_queries},
                                   {"estimated_queries", outcome.report.estimated_queries}});
            std::cout << "n=" << n << " accuracy " << format_double(accuracy)
                      << " best total " << format_double(outcome.report.best_total)
                      << " s\n";
        }

        json dims_json = json::array();
        for (int n : sweep_dims)
            dims_json.push_back(n);
        json summary{{"version", 1},
                     {"dims", std::move(dims_json)},
                     {"results", std::move(results)},
                     {"accuracy_spread", acc_hi - acc_lo},
                     {"best_total_spread_fraction", (best_hi - best_lo) / best_lo}};
        json invocation{{"config", sweep_run_config},
                        {"pretrain", sweep_pretrain_config},
                        {"dims", sweep_dims},
                        {"seed", base_run.seed}};
        save_with_hash(dir / "sweep_summary.json", std::move(summary), hash_of(invocation));
        std::cout << "accuracy spread " << format_double(acc_hi - acc_lo)
                  << ", best-total spread " << format_double((best_hi - best_lo) / best_lo)
                  << "\nsummary in " << (dir / "sweep_summary.json").string() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
