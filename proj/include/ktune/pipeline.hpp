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

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ktune/classifier.hpp"
#include "ktune/common.hpp"
#include "ktune/embedding.hpp"
#include "ktune/eval_backend.hpp"
#include "ktune/gmm.hpp"
#include "ktune/importance.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/orchestrator.hpp"
#include "ktune/plan_graph.hpp"
#include "ktune/rng.hpp"
#include "ktune/tuners.hpp"

namespace ktune {

/// One historical tuning task: its space, workload, and the evaluations
/// gathered on it (from logs or a simulator).
struct PretrainTask {
    std::string task_id;
    KnobSpace space;
    Workload workload;
    std::vector<LatencyRecord> records;
    std::map<std::string, KnobConfiguration> configs;  // config id -> content
};

struct PretrainOptions {
    int n = 16;
    int d = kDefaultEmbeddingWidth;
    std::uint64_t seed = 0;
    double tau = kDefaultTau;
    double holdout_fraction = 0.2;
    int importance_repeats = kDefaultImportanceRepeats;
    TrainHyper embed_hyper{};
    ClassifierHyper classifier_hyper{};
};

struct PretrainResult {
    KnobSpace union_space;
    EmbeddingModel embedding;
    ImportanceHead head;
    ClassifierModel classifier;
    TrainResult embedding_train;
    ClassifierTrainResult classifier_train;
    ClassificationMetrics holdout;
    bool holdout_present = false;
    // (task id, query id) -> normalized knob importance, for inspection.
    std::map<std::pair<std::string, std::string>, ImportanceVector> importance;
    std::map<std::string, LabelingResult> task_labels;  // task id -> labels
};

/// Gathers a simulated task's evaluation data: `eval_count` Latin
/// hypercube configurations, the whole workload executed under each.
inline PretrainTask simulate_task(std::string task_id, KnobSpace space, Workload workload,
                                  const SimulatorSpec& sim, int eval_count,
                                  std::uint64_t seed) {
    PretrainTask task;
    task.task_id = std::move(task_id);
    task.space = std::move(space);
    task.workload = std::move(workload);
    SimulatorBackend backend(sim, task.space);
    auto query_ids = workload_query_ids(task.workload);
    auto configs = lhs_sample(task.space, eval_count, mix_seed(seed, fnv1a64(task.task_id)));
    for (const auto& config : configs) {
        std::string config_id = config_id_of(config);
        task.configs.emplace(config_id, config);
        for (const auto& query_id : query_ids) {
            EvaluationResult res = backend.evaluate(config, query_id);
            task.records.push_back({query_id, config_id, res.latency});
        }
    }
    return task;
}

namespace detail {

inline void check_task_samples(const PretrainTask& task) {
    std::map<std::string, std::size_t> counts;
    for (const auto& rec : task.records)
        counts[rec.query_id]++;
    for (const auto& [id, plan] : task.workload.queries) {
        (void)plan;
        auto it = counts.find(id);
        std::size_t have = it == counts.end() ? 0 : it->second;
        if (have < 8)
            fail("task '" + task.task_id + "': query '" + id + "' has " +
                 std::to_string(have) + " evaluations, need at least 8");
    }
}

} // namespace detail

/// Historical-task pretraining: per-query knob importance from bagged-tree
/// permutation scores, joint training of the graph encoder + importance
/// head on those targets, per-query mixture labels over each task's
/// evaluations, then classifier training on
/// [embedding ; union-space encoding] -> label rows. A holdout fraction is
/// split off before classifier training and scored after it.
inline PretrainResult pretrain(const std::vector<PretrainTask>& tasks,
                               const PretrainOptions& options = {}) {
    if (tasks.empty())
        fail("pretrain: needs at least one task");
    if (options.n < 1 || options.n > 64)
        fail("pretrain: n must be in [1, 64]");
    if (options.holdout_fraction < 0.0 || options.holdout_fraction >= 1.0)
        fail("pretrain: holdout fraction must be in [0, 1)");

    PretrainResult out;
    std::vector<KnobSpace> spaces;
    spaces.reserve(tasks.size());
    for (const auto& task : tasks) {
        detail::check_task_samples(task);
        spaces.push_back(task.space);
    }
    out.union_space = union_space(spaces);

    // Per-(task, query) encoding/latency samples in union-space layout.
    struct QuerySamples {
        const PretrainTask* task;
        std::string query_id;
        std::vector<EncodedSample> samples;
    };
    std::vector<QuerySamples> per_query;
    for (const auto& task : tasks) {
        std::map<std::string, KnobEncoding> encodings;
        for (const auto& [config_id, config] : task.configs)
            encodings.emplace(config_id, encode_configuration(out.union_space, config));
        for (const auto& [query_id, plan] : task.workload.queries) {
            (void)plan;
            QuerySamples qs{&task, query_id, {}};
            for (const auto& rec : task.records) {
                if (rec.query_id != query_id)
                    continue;
                auto it = encodings.find(rec.config_id);
                if (it == encodings.end())
                    fail("task '" + task.task_id + "': record references unknown config '" +
                         rec.config_id + "'");
                qs.samples.push_back({it->second, rec.latency});
            }
            per_query.push_back(std::move(qs));
        }
    }

    // Importance targets feed embedding training.
    std::vector<EmbeddingSample> embed_set;
    for (const auto& qs : per_query) {
        auto forest = fit_regressor(
            qs.samples, mix_seed(options.seed, fnv1a64(qs.task->task_id), fnv1a64(qs.query_id)));
        ImportanceVector imp = permutation_importance(
            forest, qs.samples, out.union_space, options.importance_repeats,
            mix_seed(options.seed, 0x696D7074ULL, fnv1a64(qs.task->task_id),
                     fnv1a64(qs.query_id)));
        out.importance.emplace(std::make_pair(qs.task->task_id, qs.query_id), imp);
        embed_set.push_back(
            {qs.task->workload.plan_of(qs.query_id), imp.to_target(out.union_space)});
    }
    out.embedding = init_embedding_model(options.d, mix_seed(options.seed, 0x6D6F646CULL));
    out.head = init_importance_head(options.d, static_cast<int>(out.union_space.size()),
                                    mix_seed(options.seed, 0x68656164ULL));
    TrainHyper embed_hyper = options.embed_hyper;
    embed_hyper.seed = mix_seed(options.seed, 0x65747261ULL);
    out.embedding_train = train_embedding(out.embedding, out.head, embed_set, embed_hyper);

    // Mixture labels per task, then classifier rows.
    TrainingSet rows;
    for (const auto& task : tasks) {
        auto labeled = label_dataset(task.records, options.n,
                                     mix_seed(options.seed, fnv1a64(task.task_id)),
                                     options.tau);
        std::map<std::string, QueryEmbedding> embeddings;
        for (const auto& [query_id, plan] : task.workload.queries)
            embeddings.emplace(query_id, embed(out.embedding, plan));
        std::map<std::string, KnobEncoding> encodings;
        for (const auto& [config_id, config] : task.configs)
            encodings.emplace(config_id, encode_configuration(out.union_space, config));
        for (const auto& rec : labeled.records)
            rows.push_back(
                {embeddings.at(rec.query_id), encodings.at(rec.config_id), rec.label});
        out.task_labels.emplace(task.task_id, std::move(labeled));
    }

    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0u);
    Rng split_rng(mix_seed(options.seed, 0x73706C74ULL));
    split_rng.shuffle(order);
    auto holdout_count = static_cast<std::size_t>(
        options.holdout_fraction * static_cast<double>(rows.size()));
    TrainingSet train_rows, holdout_rows;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < order.size() - holdout_count ? train_rows : holdout_rows)
            .push_back(rows[order[i]]);

    out.classifier =
        init_classifier(options.n, options.d,
                        static_cast<int>(out.union_space.encoding_width()),
                        mix_seed(options.seed, 0x636C6672ULL));
    for (const auto& task : tasks)
        out.classifier.pretrain_tasks.push_back(task.task_id);
    ClassifierHyper clf_hyper = options.classifier_hyper;
    clf_hyper.seed = mix_seed(options.seed, 0x6374726EULL);
    out.classifier_train = train_classifier(out.classifier, train_rows, clf_hyper);

    if (!holdout_rows.empty()) {
        std::vector<CategoryLabel> predictions, truths;
        for (const auto& row : holdout_rows) {
            predictions.push_back(predict(out.classifier, row.embedding, row.encoding));
            truths.push_back(row.label);
        }
        out.holdout = classification_metrics(predictions, truths);
        out.holdout_present = true;
    }
    return out;
}

/// Importance vectors and label summaries, persisted for inspection next
/// to the checkpoints.
inline json training_set_to_json(const PretrainResult& result) {
    json importance = json::array();
    for (const auto& [key, imp] : result.importance) {
        json scores = json::object();
        for (const auto& [knob, score] : imp.scores)
            scores[knob] = score;
        importance.push_back(json{{"task", key.first},
                                  {"query", key.second},
                                  {"importance", std::move(scores)}});
    }
    json tasks = json::array();
    for (const auto& [task_id, labels] : result.task_labels) {
        json mixtures = json::object();
        for (const auto& [query_id, mix] : labels.mixtures) {
            json components = json::array();
            for (const auto& c : mix.components)
                components.push_back(
                    json{{"weight", c.weight}, {"mean", c.mean}, {"variance", c.variance}});
            mixtures[query_id] = std::move(components);
        }
        tasks.push_back(json{{"task", task_id},
                             {"rows", labels.records.size()},
                             {"mixtures", std::move(mixtures)}});
    }
    return json{{"version", 1},
                {"importance", std::move(importance)},
                {"tasks", std::move(tasks)}};
}

} // namespace ktune
