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

// Library walkthrough: pretrain on one historical task, then tune a live
// workload twice, once evaluating everything and once letting the label
// predictor skip configurations it already understands. Everything runs
// against the built-in simulator, so it finishes in seconds.

#include <cstdio>
#include <map>

#include "ktune/pipeline.hpp"

using namespace ktune;

int main() {
    // The tunable surface: two numeric knobs and one categorical knob.
    KnobSpace space({
        {"buffer_mb", KnobKind::Numeric, 64.0, 4096.0, {}, 128.0},
        {"workers", KnobKind::Numeric, 1.0, 16.0, {}, 4.0},
        {"io_mode", KnobKind::Categorical, 0.0, 0.0, {"sync", "async", "direct"},
         std::string("sync")},
    });

    // A synthetic 6-query workload and a simulator that gives each query
    // two or three latency regimes over the knob space.
    auto workload = generate_synthetic_workload(7, 6, 2, 3, 1, 2);
    auto spec = generate_simulator_spec(space, 11, 6, 2, 3);
    auto query_ids = workload_query_ids(workload);

    // Historical evaluations: 60 space-filling configurations, each query
    // measured at every one of them. In production this comes from logs
    // of earlier tuning sessions.
    auto history = simulate_task("history", space, workload, spec, 60, 21);
    std::printf("history: %zu configurations, %zu records\n", history.configs.size(),
                history.records.size());

    // Pretraining fits per-query latency mixtures, derives membership
    // labels, and trains the plan embedding and the label classifier.
    PretrainOptions options;
    options.n = 12;       // label width in bits
    options.d = 16;       // plan embedding width
    options.seed = 31;
    options.holdout_fraction = 0.2;
    auto pre = pretrain({history}, options);
    std::printf("pretrain: holdout accuracy %s, recall %s\n",
                format_double(pre.holdout.accuracy).c_str(),
                format_double(pre.holdout.recall).c_str());

    // Shared settings for both runs: 10 space-filling configurations up
    // front, then 40 rounds proposed by the model-based tuner.
    TuningParams params;
    params.task_id = "quickstart";
    params.n = options.n;
    params.init_count = 10;
    params.iterations = 40;
    params.seed = 41;
    params.finetune_after = 20;  // refit the classifier mid-run

    // Full-evaluation baseline: every proposed configuration runs every
    // query.
    SimulatorBackend baseline_backend(spec, space);
    BoTuner baseline_tuner(space, mix_seed(params.seed, 0x74756E72ULL));
    auto baseline =
        run_full_eval_baseline(query_ids, space, baseline_backend, baseline_tuner, params);

    // Label-guided run: queries whose predicted label has enough history
    // are estimated from that history instead of executed.
    std::map<std::string, QueryEmbedding> embeddings;
    for (const auto& [query_id, plan] : workload.queries)
        embeddings.emplace(query_id, embed(pre.embedding, plan));
    ClassifierPredictor predictor(pre.classifier, std::move(embeddings), {},
                                  params.task_id);
    SimulatorBackend guided_backend(spec, space);
    BoTuner guided_tuner(space, mix_seed(params.seed, 0x74756E72ULL));
    auto guided = run_tuning(query_ids, space, guided_backend, guided_tuner, predictor,
                             params);

    std::printf("baseline: executed %ld query evaluations, best total %s s\n",
                baseline.report.executed_queries,
                format_double(baseline.report.best_total).c_str());
    std::printf("guided:   executed %ld, estimated %ld, best total %s s\n",
                guided.report.executed_queries, guided.report.estimated_queries,
                format_double(guided.report.best_total).c_str());
    std::printf("best configuration: %s\n",
                configuration_to_json(guided.report.best_config).dump().c_str());
    return 0;
}
