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

#include <algorithm>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "ktune/plan_graph.hpp"

using namespace ktune;

namespace {

PlanNode op_node(int id) {
    PlanNode n;
    n.id = id;
    n.kind = NodeKind::PlanOp;
    n.features = Eigen::VectorXd::Zero(14);
    n.features[0] = 1.0;
    return n;
}

PlanNode table_node(int id) {
    PlanNode n;
    n.id = id;
    n.kind = NodeKind::Table;
    n.features = Eigen::VectorXd::Zero(2);
    n.features[0] = 3.0;
    n.features[1] = 2.0;
    return n;
}

PlanNode column_node(int id) {
    PlanNode n;
    n.id = id;
    n.kind = NodeKind::Column;
    n.features = Eigen::VectorXd::Zero(9);
    n.features[1] = 1.0;
    n.features[6] = 0.5;
    n.features[7] = 0.1;
    n.features[8] = 8.0;
    return n;
}

PlanNode predicate_node(int id) {
    PlanNode n;
    n.id = id;
    n.kind = NodeKind::Predicate;
    n.features = Eigen::VectorXd::Zero(7);
    n.features[2] = 1.0;
    n.features[6] = 0.25;
    return n;
}

/// join <- {scan <- {table, column}, predicate}
PlanGraph five_node_fixture() {
    PlanGraph g;
    g.nodes = {op_node(0), op_node(1), table_node(2), column_node(3), predicate_node(4)};
    g.edges = {{1, 0}, {2, 1}, {3, 1}, {4, 0}};
    g.root = 0;
    return g;
}

/// Structure-only signature, so feature noise does not hide shape reuse.
std::string shape_signature(const PlanGraph& g) {
    std::string sig;
    for (const auto& n : g.nodes)
        sig += kind_name(n.kind)[0];
    sig += '|';
    auto edges = g.edges;
    std::sort(edges.begin(), edges.end());
    for (const auto& [c, p] : edges)
        sig += std::to_string(c) + ">" + std::to_string(p) + ";";
    return sig;
}

} // namespace

TEST_CASE("a single operator node is a valid graph") {
    PlanGraph g;
    g.nodes = {op_node(0)};
    g.root = 0;
    validate_graph(g);
    CHECK(g.topological_order() == std::vector<int>{0});
}

TEST_CASE("five-node fixture validates and orders children before parents") {
    auto g = five_node_fixture();
    validate_graph(g);
    auto order = g.topological_order();
    REQUIRE(order.size() == 5);
    std::vector<int> position(5);
    for (std::size_t i = 0; i < order.size(); ++i)
        position[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    for (const auto& [child, parent] : g.edges)
        CHECK(position[static_cast<std::size_t>(child)] <
              position[static_cast<std::size_t>(parent)]);
    CHECK(order.back() == 0);
}

TEST_CASE("a two-node cycle is rejected") {
    PlanGraph g;
    g.nodes = {op_node(0), op_node(1)};
    g.edges = {{1, 0}, {0, 1}};
    g.root = 0;
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("feature-length mismatches name the node kind contract") {
    auto g = five_node_fixture();
    g.nodes[2].features = Eigen::VectorXd::Zero(3);
    REQUIRE_THROWS_WITH(validate_graph(g),
                        Catch::Matchers::ContainsSubstring("feature-length mismatch"));
}

TEST_CASE("multiple parentless nodes are rejected") {
    auto g = five_node_fixture();
    g.edges.erase(g.edges.begin() + 3);  // predicate 4 loses its parent
    REQUIRE_THROWS_WITH(validate_graph(g),
                        Catch::Matchers::ContainsSubstring("multiple roots"));
}

TEST_CASE("the root must be an operator node") {
    PlanGraph g;
    g.nodes = {table_node(0)};
    g.root = 0;
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("duplicate and self edges are rejected") {
    auto g = five_node_fixture();
    g.edges.push_back({1, 0});
    REQUIRE_THROWS_AS(validate_graph(g), Error);

    g = five_node_fixture();
    g.edges.push_back({3, 3});
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("edges referencing unknown ids are rejected") {
    auto g = five_node_fixture();
    g.edges.push_back({7, 0});
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("non-finite features are rejected") {
    auto g = five_node_fixture();
    g.nodes[3].features[8] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("fraction-valued features must stay within [0, 1]") {
    auto g = five_node_fixture();
    g.nodes[3].features[6] = 1.5;  // column distinct fraction
    REQUIRE_THROWS_AS(validate_graph(g), Error);

    g = five_node_fixture();
    g.nodes[4].features[6] = -0.1;  // predicate selectivity
    REQUIRE_THROWS_AS(validate_graph(g), Error);
}

TEST_CASE("plans survive a serialize/parse round trip") {
    auto g = five_node_fixture();
    auto j = plan_to_json(g);
    auto back = parse_plan(j);
    REQUIRE(back.nodes.size() == g.nodes.size());
    REQUIRE(back.edges == g.edges);
    REQUIRE(back.root == g.root);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        CHECK(back.nodes[i].kind == g.nodes[i].kind);
        CHECK((back.nodes[i].features - g.nodes[i].features).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("parse re-indexes sparse node ids densely in file order") {
    auto g = five_node_fixture();
    auto j = plan_to_json(g);
    // Spread the ids out; edges and root reference the sparse ids.
    const int remap[5] = {10, 40, 20, 35, 7};
    for (std::size_t i = 0; i < 5; ++i)
        j["nodes"][i]["id"] = remap[i];
    j["edges"] = json::array();
    for (const auto& [c, p] : g.edges)
        j["edges"].push_back(json::array(
            {remap[static_cast<std::size_t>(c)], remap[static_cast<std::size_t>(p)]}));
    j["root"] = 10;

    auto back = parse_plan(j);
    REQUIRE(back.nodes.size() == 5);
    for (int i = 0; i < 5; ++i)
        CHECK(back.nodes[static_cast<std::size_t>(i)].id == i);
    CHECK(back.root == 0);
    CHECK(back.edges == g.edges);
}

TEST_CASE("duplicate node ids in a document are rejected") {
    auto g = five_node_fixture();
    auto j = plan_to_json(g);
    j["nodes"][1]["id"] = 0;
    REQUIRE_THROWS_AS(parse_plan(j), Error);
}

TEST_CASE("synthetic plans are deterministic in the seed") {
    auto a = generate_synthetic_plan(42, 2, 4, 1, 2, 1, 2);
    auto b = generate_synthetic_plan(42, 2, 4, 1, 2, 1, 2);
    CHECK(plan_to_json(a) == plan_to_json(b));
    auto c = generate_synthetic_plan(43, 2, 4, 1, 2, 1, 2);
    CHECK(plan_to_json(a) != plan_to_json(c));
}

TEST_CASE("synthetic workloads validate and cover distinct shapes") {
    for (std::uint64_t seed : {1ull, 99ull}) {
        auto w = generate_synthetic_workload(seed, 12, 2, 4, 1, 2);
        REQUIRE(w.queries.size() == 12);
        std::set<std::string> shapes;
        for (const auto& [id, plan] : w.queries) {
            (void)id;
            validate_graph(plan);
            shapes.insert(shape_signature(plan));
        }
        CHECK(shapes.size() >= 3);  // ceil(12 / 4)
    }
}

TEST_CASE("shape diversity holds even for degenerate ranges") {
    auto w = generate_synthetic_workload(5, 8, 2, 2, 1, 1);
    std::set<std::string> shapes;
    for (const auto& [id, plan] : w.queries) {
        (void)id;
        shapes.insert(shape_signature(plan));
    }
    CHECK(shapes.size() >= 2);  // ceil(8 / 4)
}

TEST_CASE("workload serialization round-trips by id and plan") {
    auto w = generate_synthetic_workload(3, 4, 2, 3, 1, 2);
    auto j = workload_to_json(w);
    auto back = workload_from_json(j);
    REQUIRE(back.queries.size() == w.queries.size());
    for (std::size_t i = 0; i < w.queries.size(); ++i) {
        CHECK(back.queries[i].first == w.queries[i].first);
        CHECK(plan_to_json(back.queries[i].second) == plan_to_json(w.queries[i].second));
    }
}

TEST_CASE("synthetic workload documents expand deterministically") {
    json doc{{"synthetic", {{"seed", 11}, {"count", 5}}}};
    auto a = workload_from_json(doc);
    auto b = workload_from_json(doc);
    CHECK(workload_to_json(a) == workload_to_json(b));
    CHECK(a.queries.size() == 5);
}
