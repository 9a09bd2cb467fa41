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

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ktune/classifier.hpp"
#include "ktune/common.hpp"
#include "ktune/embedding.hpp"
#include "ktune/eval_backend.hpp"
#include "ktune/gmm.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/plan_graph.hpp"
#include "ktune/rng.hpp"
#include "ktune/tuners.hpp"

namespace ktune {

/// One executed (never estimated) evaluation, the raw material for
/// in-run fine-tuning and store rebuilds.
struct ExecutedRecord {
    std::string query_id;
    std::string config_id;
    KnobEncoding encoding;
    double latency = 0.0;
};

/// Label source for the tuning loop. The few-shot hook refits on the
/// current task's executed history; predictors without one ignore it.
class LabelPredictor {
public:
    virtual ~LabelPredictor() = default;

    virtual CategoryLabel predict_label(const std::string& query_id,
                                        const KnobEncoding& encoding) = 0;

    virtual bool supports_finetune() const { return false; }
    virtual void finetune(const std::vector<ExecutedRecord>&, std::uint64_t, double) {}
};

/// Wraps the trained classifier with per-query embeddings. Fine-tuning
/// relabels the executed history with per-query mixtures and continues
/// classifier training on those rows; the embedding model stays frozen.
class ClassifierPredictor : public LabelPredictor {
public:
    ClassifierPredictor(ClassifierModel model,
                        std::map<std::string, QueryEmbedding> embeddings,
                        ClassifierHyper pretrain_hyper = {},
                        std::string current_task = {})
        : model_(std::move(model)), embeddings_(std::move(embeddings)),
          hyper_(pretrain_hyper), current_task_(std::move(current_task)) {}

    CategoryLabel predict_label(const std::string& query_id,
                                const KnobEncoding& encoding) override {
        auto it = embeddings_.find(query_id);
        if (it == embeddings_.end())
            fail("classifier predictor: no embedding for query '" + query_id + "'");
        return predict(model_, it->second, encoding);
    }

    bool supports_finetune() const override { return true; }

    void finetune(const std::vector<ExecutedRecord>& executed, std::uint64_t seed,
                  double tau) override {
        std::map<std::string, std::vector<double>> latencies;
        for (const auto& rec : executed)
            latencies[rec.query_id].push_back(rec.latency);
        for (const auto& [query_id, values] : latencies) {
            if (values.size() < 8) {
                warn("finetune skipped: query '" + query_id + "' has only " +
                     std::to_string(values.size()) + " executed samples");
                return;
            }
        }
        std::map<std::string, GaussianMixture> mixtures;
        for (const auto& [query_id, values] : latencies)
            mixtures[query_id] = fit_gmm(values, model_.n, mix_seed(seed, fnv1a64(query_id)));
        TrainingSet recent;
        recent.reserve(executed.size());
        for (const auto& rec : executed) {
            recent.push_back({embeddings_.at(rec.query_id), rec.encoding,
                              assign_label(mixtures.at(rec.query_id), rec.latency,
                                           model_.n, tau)});
        }
        ClassifierHyper hyper = hyper_;
        hyper.seed = mix_seed(seed, 0x66746E65ULL);
        finetune_classifier(model_, recent, hyper);
        if (!current_task_.empty())
            model_.finetune_task = current_task_;
    }

    const ClassifierModel& model() const { return model_; }
    ClassifierModel& model() { return model_; }

private:
    ClassifierModel model_;
    std::map<std::string, QueryEmbedding> embeddings_;
    ClassifierHyper hyper_;
    std::string current_task_;
};

/// Emits a fresh label on every call, so judge never fires and every
/// query is executed; the degenerate-classifier equivalence oracle.
/// The counter starts at 1 to keep labels non-empty.
class AlwaysUnseenPredictor : public LabelPredictor {
public:
    explicit AlwaysUnseenPredictor(int n) : n_(n) {
        if (n < 1 || n > 64)
            fail("always-unseen predictor: n must be in [1, 64]");
    }

    CategoryLabel predict_label(const std::string&, const KnobEncoding&) override {
        std::uint64_t capacity = n_ >= 64 ? ~0ULL : (1ULL << n_) - 1ULL;
        std::uint64_t bits = 1 + (counter_++ % capacity);
        return CategoryLabel(bits, n_);
    }

private:
    int n_ = 0;
    std::uint64_t counter_ = 0;
};

enum class EvalMode { Executed, Estimated };

inline const char* eval_mode_name(EvalMode mode) {
    return mode == EvalMode::Executed ? "executed" : "estimated";
}

struct QueryEvent {
    std::string query_id;
    EvalMode mode = EvalMode::Executed;
    double latency = 0.0;
    CategoryLabel label;
};

struct DatasetRow {
    int iteration = 0;           // 1-based across both phases
    bool init_phase = false;
    KnobConfiguration config;
    std::string config_id;
    double total = 0.0;          // executed + estimated seconds
    std::vector<QueryEvent> breakdown;
    int skipped = 0;
    double t_seconds = 0.0;      // executed seconds + predict/judge overhead
};

using TuningDataset = std::vector<DatasetRow>;

struct SeriesPoint {
    double cumulative_seconds = 0.0;
    double best_total = 0.0;
};

struct TuningReport {
    KnobConfiguration best_config;
    std::string best_config_id;
    double best_total = 0.0;
    std::vector<double> iteration_seconds;        // T_i per dataset row
    double average_iteration_seconds = 0.0;       // (1/n) sum T_i
    long executed_queries = 0;                    // both phases
    long estimated_queries = 0;
    long loop_executed = 0;                       // iterative phase only
    long loop_estimated = 0;
    std::vector<SeriesPoint> series;
    double p90_best_seconds = 0.0;
    int p90_repeats = 0;
};

struct TuningOutcome {
    TuningReport report;
    TuningDataset dataset;
    LabelStore store;
    std::vector<ExecutedRecord> executed;
};

struct TuningParams {
    std::string task_id = "task";
    int n = 16;
    int init_count = 20;
    int iterations = 100;      // N
    std::uint64_t seed = 0;
    int m_min = kDefaultMMin;
    double tau = kDefaultTau;
    int finetune_after = kDefaultFinetuneIterations;  // F; 0 disables
    int p90_repeats = 10;
    bool force_execute = false;  // full-evaluation baseline mode

    void validate() const {
        if (n < 1 || n > 64)
            fail("tuning params: n must be in [1, 64]");
        if (init_count < 2)
            fail("tuning params: init count must be >= 2 (the tuner needs 2 observations)");
        if (iterations < 0)
            fail("tuning params: iterations must be >= 0");
        if (m_min < 1)
            fail("tuning params: m_min must be >= 1");
        if (!(tau > 0.0 && tau <= 1.0))
            fail("tuning params: tau must be in (0, 1]");
        if (finetune_after < 0)
            fail("tuning params: finetune iteration count must be >= 0");
        if (p90_repeats < 2)
            fail("tuning params: p90 repeats must be >= 2");
    }
};

/// Nearest-rank percentile: the ceil(q*R)-th smallest of R totals.
inline double nearest_rank(std::vector<double> values, double q) {
    if (values.empty())
        fail("nearest_rank: no values");
    std::sort(values.begin(), values.end());
    auto rank = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(values.size())));
    rank = std::max<std::size_t>(rank, 1);
    return values[std::min(rank, values.size()) - 1];
}

/// Executes the whole workload `repeats` times under one configuration
/// and returns the 90th-percentile total (nearest rank).
inline double measure_uncertainty_latency(EvalBackend& backend,
                                          const KnobConfiguration& config,
                                          const std::vector<std::string>& query_ids,
                                          int repeats) {
    if (repeats < 2)
        fail("measure_uncertainty_latency: repeats must be >= 2");
    std::vector<double> totals;
    totals.reserve(static_cast<std::size_t>(repeats));
    for (int r = 0; r < repeats; ++r)
        totals.push_back(evaluate_workload(backend, config, query_ids, r).total);
    return nearest_rank(std::move(totals), 0.9);
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace detail

/// The tuning loop. Phase 1 evaluates `init_count` Latin-hypercube points
/// in full, records (predicted label, latency) pairs, and seeds the tuner.
/// Phase 2 runs `iterations` rounds of recommend -> per-query predict ->
/// judge -> estimate-or-execute -> tuner update. Only executions enter the
/// label store; estimates reuse its means. After iteration `finetune_after`
/// the predictor may refit on the executed history, after which the store
/// is rebuilt by re-predicting every executed record (initialization
/// included) with the updated predictor.
///
/// `on_row` fires after each dataset row, letting callers persist partial
/// artifacts before a backend failure aborts the run.
inline TuningOutcome run_tuning(const std::vector<std::string>& query_ids,
                                const KnobSpace& space, EvalBackend& backend, Tuner& tuner,
                                LabelPredictor& predictor, const TuningParams& params,
                                const std::function<void(const DatasetRow&)>& on_row = {}) {
    params.validate();
    if (query_ids.empty())
        fail("run_tuning: empty workload");

    TuningOutcome out;
    out.store = LabelStore(params.task_id);
    auto record_row = [&](DatasetRow row) {
        out.report.iteration_seconds.push_back(row.t_seconds);
        out.dataset.push_back(std::move(row));
        if (on_row)
            on_row(out.dataset.back());
    };
    auto check_width = [&](const CategoryLabel& label) {
        if (label.width != params.n)
            fail("predictor label width " + std::to_string(label.width) +
                 " does not match configured n " + std::to_string(params.n));
    };

    // Phase 1: initialization, every query executed.
    auto init_points = lhs_sample(space, params.init_count, mix_seed(params.seed, 0x696E6974ULL));
    for (int i = 0; i < params.init_count; ++i) {
        const KnobConfiguration& config = init_points[static_cast<std::size_t>(i)];
        KnobEncoding encoding = encode_configuration(space, config);
        DatasetRow row;
        row.iteration = i + 1;
        row.init_phase = true;
        row.config = config;
        row.config_id = config_id_of(config);
        double overhead = 0.0;
        for (const auto& query_id : query_ids) {
            EvaluationResult res = backend.evaluate(config, query_id);
            auto clock = std::chrono::steady_clock::now();
            CategoryLabel label = predictor.predict_label(query_id, encoding);
            overhead += detail::seconds_since(clock);
            check_width(label);
            out.store.add(query_id, label, res.latency);
            out.executed.push_back({query_id, row.config_id, encoding, res.latency});
            row.total += res.latency;
            row.breakdown.push_back({query_id, EvalMode::Executed, res.latency, label});
            out.report.executed_queries++;
        }
        row.t_seconds = row.total + overhead;
        tuner.observe({config, std::move(encoding), row.total});
        record_row(std::move(row));
    }

    // Phase 2: recommend, then estimate or execute per query.
    for (int iter = 1; iter <= params.iterations; ++iter) {
        KnobConfiguration config = tuner.recommend();
        KnobEncoding encoding = encode_configuration(space, config);
        DatasetRow row;
        row.iteration = params.init_count + iter;
        row.config = config;
        row.config_id = config_id_of(config);
        double executed_seconds = 0.0;
        double overhead = 0.0;
        for (const auto& query_id : query_ids) {
            auto clock = std::chrono::steady_clock::now();
            CategoryLabel label = predictor.predict_label(query_id, encoding);
            check_width(label);
            bool skip = !params.force_execute &&
                        judge(out.store, params.task_id, query_id, label, params.m_min);
            overhead += detail::seconds_since(clock);
            if (skip) {
                double latency =
                    estimate(out.store, params.task_id, query_id, label, params.m_min);
                row.total += latency;
                row.skipped++;
                row.breakdown.push_back({query_id, EvalMode::Estimated, latency, label});
                out.report.estimated_queries++;
                out.report.loop_estimated++;
            } else {
                EvaluationResult res = backend.evaluate(config, query_id);
                out.store.add(query_id, label, res.latency);
                out.executed.push_back({query_id, row.config_id, encoding, res.latency});
                row.total += res.latency;
                executed_seconds += res.latency;
                row.breakdown.push_back({query_id, EvalMode::Executed, res.latency, label});
                out.report.executed_queries++;
                out.report.loop_executed++;
            }
        }
        row.t_seconds = executed_seconds + overhead;
        tuner.observe({config, std::move(encoding), row.total});
        record_row(std::move(row));

        if (iter == params.finetune_after && !params.force_execute &&
            predictor.supports_finetune()) {
            predictor.finetune(out.executed, mix_seed(params.seed, 0x66696E65ULL),
                               params.tau);
            out.store.clear();
            for (const auto& rec : out.executed) {
                CategoryLabel label = predictor.predict_label(rec.query_id, rec.encoding);
                check_width(label);
                out.store.add(rec.query_id, label, rec.latency);
            }
        }
    }

    // Report: best-by-minimum-total, Eq.-5 average, series, best-config p90.
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.dataset.size(); ++i)
        if (out.dataset[i].total < out.dataset[best].total)
            best = i;
    out.report.best_config = out.dataset[best].config;
    out.report.best_config_id = out.dataset[best].config_id;
    out.report.best_total = out.dataset[best].total;
    double sum_t = 0.0;
    double running_best = std::numeric_limits<double>::infinity();
    for (const auto& row : out.dataset) {
        sum_t += row.t_seconds;
        running_best = std::min(running_best, row.total);
        out.report.series.push_back({sum_t, running_best});
    }
    out.report.average_iteration_seconds =
        sum_t / static_cast<double>(out.dataset.size());
    out.report.p90_repeats = params.p90_repeats;
    out.report.p90_best_seconds = measure_uncertainty_latency(
        backend, out.report.best_config, query_ids, params.p90_repeats);
    return out;
}

/// Full-evaluation baseline: the identical loop with judge forced false,
/// so every query is executed. Labels are still recorded (from the
/// always-unseen sequence) to keep the artifacts comparable.
inline TuningOutcome run_full_eval_baseline(const std::vector<std::string>& query_ids,
                                            const KnobSpace& space, EvalBackend& backend,
                                            Tuner& tuner, TuningParams params,
                                            const std::function<void(const DatasetRow&)>&
                                                on_row = {}) {
    params.force_execute = true;
    AlwaysUnseenPredictor predictor(params.n);
    return run_tuning(query_ids, space, backend, tuner, predictor, params, on_row);
}

inline std::vector<std::string> workload_query_ids(const Workload& workload) {
    std::vector<std::string> ids;
    ids.reserve(workload.queries.size());
    for (const auto& [id, plan] : workload.queries)
        ids.push_back(id);
    return ids;
}

// ---- Artifact encoding: evaluation log, series file, report. ----

inline constexpr std::string_view kEvalLogHeader =
    "iteration,config_id,query_id,mode,latency_seconds,label_bits";

/// One dataset row's log lines, shared by the bulk encoder and callers
/// that stream the log to disk while the run is still in flight.
inline void append_eval_log_row(std::string& text, const DatasetRow& row) {
    for (const auto& e : row.breakdown) {
        text += std::to_string(row.iteration);
        text += ',';
        text += row.config_id;
        text += ',';
        text += e.query_id;
        text += ',';
        text += eval_mode_name(e.mode);
        text += ',';
        text += format_double(e.latency);
        text += ',';
        text += e.label.to_string();
        text += '\n';
    }
}

inline std::string eval_log_to_csv(const TuningDataset& dataset) {
    std::string text = std::string(kEvalLogHeader) + "\n";
    for (const auto& row : dataset)
        append_eval_log_row(text, row);
    return text;
}

struct EvalLogRow {
    int iteration = 0;
    std::string config_id;
    std::string query_id;
    EvalMode mode = EvalMode::Executed;
    double latency = 0.0;
    CategoryLabel label;
};

/// Lines starting with '#' carry provenance (the config hash) and are
/// skipped, as is the column header; error messages use file line numbers.
inline std::vector<EvalLogRow> parse_eval_log(const std::string& text) {
    std::vector<EvalLogRow> rows;
    int line_no = 0;
    for (std::string_view line : split(text, '\n')) {
        ++line_no;
        if (line.empty() || line.front() == '#' || line == kEvalLogHeader)
            continue;
        auto fields = split(line, ',');
        if (fields.size() != 6)
            fail("evaluation log line " + std::to_string(line_no) + ": expected 6 fields");
        EvalLogRow row;
        row.iteration = static_cast<int>(parse_int(fields[0]));
        row.config_id = std::string(fields[1]);
        row.query_id = std::string(fields[2]);
        if (fields[3] == "executed")
            row.mode = EvalMode::Executed;
        else if (fields[3] == "estimated")
            row.mode = EvalMode::Estimated;
        else
            fail("evaluation log line " + std::to_string(line_no) + ": unknown mode '" +
                 std::string(fields[3]) + "'");
        row.latency = parse_double(fields[4]);
        row.label = CategoryLabel::from_string(std::string(fields[5]));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string series_to_csv(const std::vector<SeriesPoint>& series) {
    std::string text = "cumulative_seconds,best_total_seconds\n";
    for (const auto& p : series) {
        text += format_double(p.cumulative_seconds);
        text += ',';
        text += format_double(p.best_total);
        text += '\n';
    }
    return text;
}

inline json report_to_json(const TuningReport& report) {
    json t = json::array();
    for (double v : report.iteration_seconds)
        t.push_back(v);
    return json{{"best_config", configuration_to_json(report.best_config)},
                {"best_config_id", report.best_config_id},
                {"best_total_seconds", report.best_total},
                {"iteration_seconds", std::move(t)},
                {"average_iteration_seconds", report.average_iteration_seconds},
                {"executed_queries", report.executed_queries},
                {"estimated_queries", report.estimated_queries},
                {"loop_executed_queries", report.loop_executed},
                {"loop_estimated_queries", report.loop_estimated},
                {"p90_best_seconds", report.p90_best_seconds},
                {"p90_repeats", report.p90_repeats}};
}

} // namespace ktune
