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

#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "ktune/pipeline.hpp"

#include "helpers.hpp"

using namespace ktune;

namespace {

KnobSpace wider_space() {
    auto specs = testing::make_space().knobs();
    KnobSpec cache;
    cache.name = "cache_kb";
    cache.kind = KnobKind::Numeric;
    cache.min = 16.0;
    cache.max = 512.0;
    cache.default_value = KnobValue{64.0};
    specs.push_back(cache);
    return KnobSpace(specs);
}

PretrainOptions fast_options() {
    PretrainOptions options;
    options.n = 6;
    options.d = 16;
    options.seed = 33;
    options.holdout_fraction = 0.2;
    options.importance_repeats = 3;
    options.embed_hyper.max_epochs = 40;
    options.classifier_hyper.max_epochs = 120;
    return options;
}

std::vector<PretrainTask> two_history_tasks() {
    auto space_a = testing::make_space();
    auto space_b = wider_space();
    auto workload_a = generate_synthetic_workload(7, 2, 2, 3, 1, 2);
    auto workload_b = generate_synthetic_workload(8, 2, 2, 3, 1, 2);
    auto sim_a = generate_simulator_spec(space_a, 5, 2);
    auto sim_b = generate_simulator_spec(space_b, 6, 2);
    return {simulate_task("hist-a", space_a, workload_a, sim_a, 24, 101),
            simulate_task("hist-b", space_b, workload_b, sim_b, 24, 102)};
}

} // namespace

TEST_CASE("simulated tasks gather the full cross product deterministically") {
    auto space = testing::make_space();
    auto workload = generate_synthetic_workload(3, 3, 2, 3, 1, 2);
    auto sim = generate_simulator_spec(space, 21, 3);
    auto task = simulate_task("hist", space, workload, sim, 12, 55);

    CHECK(task.task_id == "hist");
    CHECK(task.configs.size() == 12);
    REQUIRE(task.records.size() == 12 * 3);
    for (const auto& rec : task.records) {
        CHECK(task.configs.count(rec.config_id) == 1);
        CHECK(rec.latency > 0.0);
    }

    auto again = simulate_task("hist", space, workload, sim, 12, 55);
    REQUIRE(again.records.size() == task.records.size());
    for (std::size_t i = 0; i < task.records.size(); ++i) {
        CHECK(again.records[i].query_id == task.records[i].query_id);
        CHECK(again.records[i].config_id == task.records[i].config_id);
        CHECK(again.records[i].latency == task.records[i].latency);
    }
}

TEST_CASE("pretraining produces a unified model set over both tasks") {
    auto tasks = two_history_tasks();
    auto result = pretrain(tasks, fast_options());

    CHECK(result.union_space.size() == 4);
    CHECK(result.union_space.index_of("cache_kb") == 3);

    // Every (task, query) pair carries an importance simplex over the
    // union space.
    REQUIRE(result.importance.size() == 4);
    for (const auto& task_id : {"hist-a", "hist-b"})
        for (const auto& query_id : {"q0", "q1"}) {
            auto it = result.importance.find({task_id, query_id});
            REQUIRE(it != result.importance.end());
            double sum = 0.0;
            for (const auto& [knob, score] : it->second.scores) {
                CHECK(score >= 0.0);
                sum += score;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-9));
            CHECK(it->second.scores.size() == 4);
        }
    // Task A never varies cache_kb, so permuting its constant column
    // cannot change predictions.
    CHECK(result.importance.at({"hist-a", "q0"}).scores.at("cache_kb") == 0.0);

    REQUIRE(result.task_labels.size() == 2);
    for (const auto& [task_id, labels] : result.task_labels) {
        CHECK(labels.records.size() == 24 * 2);
        CHECK(labels.mixtures.size() == 2);
        for (const auto& rec : labels.records)
            CHECK(rec.label.width == 6);
        (void)task_id;
    }

    CHECK(result.classifier.n == 6);
    CHECK(result.classifier.d == 16);
    CHECK(result.classifier.encoding_width ==
          static_cast<int>(result.union_space.encoding_width()));
    CHECK(result.classifier.pretrain_tasks ==
          std::vector<std::string>{"hist-a", "hist-b"});
    CHECK(result.embedding.d == 16);
    CHECK(result.embedding_train.epochs >= 1);
    CHECK(result.classifier_train.epochs >= 1);
    REQUIRE(result.classifier_train.loss_trace.size() >= 2);
    CHECK(result.classifier_train.loss_trace.back() <
          result.classifier_train.loss_trace.front());

    CHECK(result.holdout_present);
    CHECK(result.holdout.accuracy >= 0.0);
    CHECK(result.holdout.accuracy <= 1.0);
}

TEST_CASE("pretraining is deterministic for fixed seeds") {
    auto tasks = two_history_tasks();
    auto first = pretrain(tasks, fast_options());
    auto second = pretrain(tasks, fast_options());

    CHECK(classifier_to_json(first.classifier) == classifier_to_json(second.classifier));
    CHECK(embedding_to_json(first.embedding, first.head) ==
          embedding_to_json(second.embedding, second.head));
    CHECK(training_set_to_json(first) == training_set_to_json(second));
    CHECK(first.holdout.accuracy == second.holdout.accuracy);
    CHECK(first.holdout.recall == second.holdout.recall);
}

TEST_CASE("a zero holdout fraction trains on everything and skips scoring") {
    auto tasks = two_history_tasks();
    auto options = fast_options();
    options.holdout_fraction = 0.0;
    auto result = pretrain(tasks, options);
    CHECK_FALSE(result.holdout_present);
}

TEST_CASE("pretraining validates its inputs") {
    REQUIRE_THROWS_WITH(pretrain({}), Catch::Matchers::ContainsSubstring("at least one"));

    auto tasks = two_history_tasks();
    auto options = fast_options();
    options.n = 0;
    REQUIRE_THROWS_AS(pretrain(tasks, options), Error);
    options = fast_options();
    options.holdout_fraction = 1.0;
    REQUIRE_THROWS_AS(pretrain(tasks, options), Error);
}

TEST_CASE("tasks with too few evaluations per query are rejected by name") {
    PretrainTask task;
    task.task_id = "thin";
    task.space = testing::make_numeric_space(2);
    task.workload = generate_synthetic_workload(4, 1, 2, 2, 1, 1);
    auto config = task.space.default_configuration();
    std::string config_id = config_id_of(config);
    task.configs.emplace(config_id, config);
    for (int i = 0; i < 7; ++i)
        task.records.push_back({"q0", config_id, 1.0 + 0.1 * i});
    REQUIRE_THROWS_WITH(pretrain({task}, fast_options()),
                        Catch::Matchers::ContainsSubstring("task 'thin'") &&
                            Catch::Matchers::ContainsSubstring("query 'q0'") &&
                            Catch::Matchers::ContainsSubstring("at least 8"));
}

TEST_CASE("records naming unknown configurations are rejected") {
    PretrainTask task;
    task.task_id = "dangling";
    task.space = testing::make_numeric_space(2);
    task.workload = generate_synthetic_workload(4, 1, 2, 2, 1, 1);
    auto config = task.space.default_configuration();
    std::string config_id = config_id_of(config);
    task.configs.emplace(config_id, config);
    for (int i = 0; i < 8; ++i)
        task.records.push_back({"q0", i == 5 ? "nope" : config_id, 1.0 + 0.1 * i});
    REQUIRE_THROWS_WITH(pretrain({task}, fast_options()),
                        Catch::Matchers::ContainsSubstring("unknown config 'nope'"));
}

TEST_CASE("the training-set summary serializes importance and mixtures") {
    auto tasks = two_history_tasks();
    auto result = pretrain(tasks, fast_options());
    auto doc = training_set_to_json(result);
    CHECK(doc.at("version").get<int>() == 1);
    REQUIRE(doc.at("importance").size() == 4);
    for (const auto& entry : doc.at("importance")) {
        CHECK(entry.contains("task"));
        CHECK(entry.contains("query"));
        CHECK(entry.at("importance").size() == 4);
    }
    REQUIRE(doc.at("tasks").size() == 2);
    for (const auto& entry : doc.at("tasks")) {
        CHECK(entry.at("rows").get<int>() == 48);
        CHECK(entry.at("mixtures").size() == 2);
    }
}
