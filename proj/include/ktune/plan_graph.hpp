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
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/rng.hpp"

namespace ktune {

enum class NodeKind { PlanOp, Table, Column, Predicate };

// Fixed vocabularies keep plan encodings comparable across tasks.
inline constexpr std::size_t kOperatorVocab = 12;
inline constexpr std::size_t kDataTypeVocab = 6;
inline constexpr std::size_t kComparisonVocab = 6;

/// Feature layout per kind:
///   PlanOp:    operator one-hot (12) + log10(1+rows) + log10(1+cost)
///   Table:     log10(1+row count) + log10(1+page count)
///   Column:    data-type one-hot (6) + distinct frac + null frac + avg width
///   Predicate: comparison one-hot (6) + selectivity
inline constexpr std::size_t feature_length(NodeKind kind) {
    switch (kind) {
    case NodeKind::PlanOp: return kOperatorVocab + 2;
    case NodeKind::Table: return 2;
    case NodeKind::Column: return kDataTypeVocab + 3;
    case NodeKind::Predicate: return kComparisonVocab + 1;
    }
    return 0;
}

inline const char* kind_name(NodeKind kind) {
    switch (kind) {
    case NodeKind::PlanOp: return "PLAN_OP";
    case NodeKind::Table: return "TABLE";
    case NodeKind::Column: return "COLUMN";
    case NodeKind::Predicate: return "PREDICATE";
    }
    return "?";
}

inline NodeKind kind_from_name(const std::string& name) {
    if (name == "PLAN_OP") return NodeKind::PlanOp;
    if (name == "TABLE") return NodeKind::Table;
    if (name == "COLUMN") return NodeKind::Column;
    if (name == "PREDICATE") return NodeKind::Predicate;
    fail("unknown kind '" + name + "'");
}

struct PlanNode {
    int id = 0;
    NodeKind kind = NodeKind::PlanOp;
    Eigen::VectorXd features;
};

/// Rooted DAG over plan nodes. Edges point child -> parent; the root is
/// the unique node with no outgoing edge and must be a PLAN_OP.
struct PlanGraph {
    std::vector<PlanNode> nodes;
    std::vector<std::pair<int, int>> edges;
    int root = 0;

    /// Children of each node, ascending child id. Index = node id.
    std::vector<std::vector<int>> child_lists() const {
        std::vector<std::vector<int>> children(nodes.size());
        for (const auto& [child, parent] : edges)
            children[static_cast<std::size_t>(parent)].push_back(child);
        for (auto& c : children)
            std::sort(c.begin(), c.end());
        return children;
    }

    /// Bottom-up topological order (children before parents), Kahn-style.
    /// Throws on cycles.
    std::vector<int> topological_order() const {
        std::vector<int> out_degree(nodes.size(), 0);
        auto children = child_lists();
        for (const auto& [child, parent] : edges) {
            (void)parent;
            out_degree[static_cast<std::size_t>(child)]++;
        }
        // A node is emitted once all of its children are; walk upward from
        // the leaves decrementing each parent's pending-child count.
        std::vector<int> pending(nodes.size(), 0);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            pending[i] = static_cast<int>(children[i].size());
        std::deque<int> ready;
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (pending[i] == 0)
                ready.push_back(static_cast<int>(i));
        std::vector<std::vector<int>> parents(nodes.size());
        for (const auto& [child, parent] : edges)
            parents[static_cast<std::size_t>(child)].push_back(parent);
        std::vector<int> order;
        order.reserve(nodes.size());
        while (!ready.empty()) {
            int v = ready.front();
            ready.pop_front();
            order.push_back(v);
            for (int p : parents[static_cast<std::size_t>(v)])
                if (--pending[static_cast<std::size_t>(p)] == 0)
                    ready.push_back(p);
        }
        if (order.size() != nodes.size())
            fail("cycle detected in plan graph");
        return order;
    }
};

/// Full invariant check: dense ids, per-kind feature layout, fractions in
/// [0,1], finite features, single PLAN_OP root, acyclic, root reachable
/// from every node.
inline void validate_graph(const PlanGraph& g) {
    if (g.nodes.empty())
        fail("plan graph has no nodes");
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const PlanNode& node = g.nodes[i];
        if (node.id != static_cast<int>(i))
            fail("plan node ids not dense from 0");
        auto want = feature_length(node.kind);
        if (static_cast<std::size_t>(node.features.size()) != want)
            fail(std::string("feature-length mismatch for ") + kind_name(node.kind) +
                 " node " + std::to_string(node.id) + ": got " +
                 std::to_string(node.features.size()) + ", want " + std::to_string(want));
        for (Eigen::Index k = 0; k < node.features.size(); ++k)
            if (!std::isfinite(node.features[k]))
                fail("non-finite feature in node " + std::to_string(node.id));
        auto check_frac = [&](Eigen::Index k, const char* what) {
            double v = node.features[k];
            if (v < 0.0 || v > 1.0)
                fail(std::string(what) + " outside [0,1] in node " + std::to_string(node.id));
        };
        if (node.kind == NodeKind::Column) {
            check_frac(static_cast<Eigen::Index>(kDataTypeVocab), "distinct fraction");
            check_frac(static_cast<Eigen::Index>(kDataTypeVocab) + 1, "null fraction");
        } else if (node.kind == NodeKind::Predicate) {
            check_frac(static_cast<Eigen::Index>(kComparisonVocab), "selectivity");
        }
    }
    std::set<std::pair<int, int>> seen_edges;
    std::vector<bool> has_parent_edge(g.nodes.size(), false);
    for (const auto& [child, parent] : g.edges) {
        if (child < 0 || child >= static_cast<int>(g.nodes.size()) || parent < 0 ||
            parent >= static_cast<int>(g.nodes.size()))
            fail("edge references unknown node id");
        if (child == parent)
            fail("cycle detected in plan graph (self edge)");
        if (!seen_edges.emplace(child, parent).second)
            fail("duplicate edge in plan graph");
        has_parent_edge[static_cast<std::size_t>(child)] = true;
    }
    std::vector<int> roots;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (!has_parent_edge[i])
            roots.push_back(static_cast<int>(i));
    if (roots.empty())
        fail("cycle detected in plan graph (no root)");
    if (roots.size() > 1)
        fail("multiple roots in plan graph");
    if (g.root != roots[0])
        fail("declared root is not the parentless node");
    if (g.nodes[static_cast<std::size_t>(g.root)].kind != NodeKind::PlanOp)
        fail("root must be a PLAN_OP node");
    g.topological_order();
    // Every node must feed into the root: walk parent -> child from the
    // root and require full coverage.
    auto children = g.child_lists();
    std::vector<bool> visited(g.nodes.size(), false);
    std::deque<int> queue{g.root};
    visited[static_cast<std::size_t>(g.root)] = true;
    while (!queue.empty()) {
        int v = queue.front();
        queue.pop_front();
        for (int c : children[static_cast<std::size_t>(v)]) {
            if (!visited[static_cast<std::size_t>(c)]) {
                visited[static_cast<std::size_t>(c)] = true;
                queue.push_back(c);
            }
        }
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (!visited[i])
            fail("node " + std::to_string(i) + " does not reach the root");
}

struct Workload {
    std::vector<std::pair<std::string, PlanGraph>> queries;

    const PlanGraph& plan_of(const std::string& query_id) const {
        for (const auto& [id, plan] : queries)
            if (id == query_id)
                return plan;
        fail("unknown query '" + query_id + "'");
    }
};

inline json plan_to_json(const PlanGraph& g) {
    json nodes = json::array();
    for (const auto& node : g.nodes) {
        json features = json::array();
        for (Eigen::Index k = 0; k < node.features.size(); ++k)
            features.push_back(node.features[k]);
        nodes.push_back(json{{"id", node.id},
                             {"kind", kind_name(node.kind)},
                             {"features", std::move(features)}});
    }
    json edges = json::array();
    for (const auto& [child, parent] : g.edges)
        edges.push_back(json::array({child, parent}));
    return json{{"version", 1},
                {"root", g.root},
                {"nodes", std::move(nodes)},
                {"edges", std::move(edges)}};
}

/// Parses and validates a plan document. File ids may be arbitrary
/// integers; they are re-indexed densely from 0 in file order.
inline PlanGraph parse_plan(const json& doc) {
    if (!doc.contains("nodes") || !doc["nodes"].is_array() || doc["nodes"].empty())
        fail("plan document: missing 'nodes'");
    if (!doc.contains("root"))
        fail("plan document: missing 'root'");
    PlanGraph g;
    std::map<std::int64_t, int> remap;
    for (const auto& n : doc["nodes"]) {
        PlanNode node;
        std::int64_t file_id = n.at("id").get<std::int64_t>();
        node.id = static_cast<int>(g.nodes.size());
        if (!remap.emplace(file_id, node.id).second)
            fail("duplicate node id " + std::to_string(file_id) + " in plan document");
        node.kind = kind_from_name(n.at("kind").get<std::string>());
        auto feats = n.at("features").get<std::vector<double>>();
        node.features = Eigen::Map<const Eigen::VectorXd>(
            feats.data(), static_cast<Eigen::Index>(feats.size()));
        g.nodes.push_back(std::move(node));
    }
    auto lookup = [&](std::int64_t file_id) {
        auto it = remap.find(file_id);
        if (it == remap.end())
            fail("edge references unknown node id " + std::to_string(file_id));
        return it->second;
    };
    if (doc.contains("edges")) {
        for (const auto& e : doc["edges"]) {
            if (!e.is_array() || e.size() != 2)
                fail("plan document: edge must be [child, parent]");
            g.edges.emplace_back(lookup(e[0].get<std::int64_t>()),
                                 lookup(e[1].get<std::int64_t>()));
        }
    }
    g.root = lookup(doc["root"].get<std::int64_t>());
    validate_graph(g);
    return g;
}

inline PlanGraph parse_plan_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(std::string("plan document: ") + e.what());
    }
    return parse_plan(doc);
}

namespace detail {

inline PlanNode make_op_node(Rng& rng) {
    PlanNode node;
    node.kind = NodeKind::PlanOp;
    node.features = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(feature_length(NodeKind::PlanOp)));
    node.features[static_cast<Eigen::Index>(rng.bounded(kOperatorVocab))] = 1.0;
    node.features[kOperatorVocab] = std::log10(1.0 + rng.uniform(0.0, 1e6));
    node.features[kOperatorVocab + 1] = std::log10(1.0 + rng.uniform(0.0, 1e5));
    return node;
}

inline PlanNode make_leaf_node(NodeKind kind, Rng& rng) {
    PlanNode node;
    node.kind = kind;
    node.features = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(feature_length(kind)));
    switch (kind) {
    case NodeKind::Table:
        node.features[0] = std::log10(1.0 + rng.uniform(0.0, 1e7));
        node.features[1] = std::log10(1.0 + rng.uniform(0.0, 1e5));
        break;
    case NodeKind::Column:
        node.features[static_cast<Eigen::Index>(rng.bounded(kDataTypeVocab))] = 1.0;
        node.features[kDataTypeVocab] = rng.uniform();
        node.features[kDataTypeVocab + 1] = rng.uniform();
        node.features[kDataTypeVocab + 2] = rng.uniform(1.0, 64.0);
        break;
    case NodeKind::Predicate:
        node.features[static_cast<Eigen::Index>(rng.bounded(kComparisonVocab))] = 1.0;
        node.features[kComparisonVocab] = rng.uniform();
        break;
    case NodeKind::PlanOp:
        fail("make_leaf_node called with PLAN_OP");
    }
    return node;
}

} // namespace detail

/// Deterministic synthetic plan. `column_fan` extra COLUMN leaves hang off
/// the root (its output columns); varying the fan across a workload keeps
/// plan shapes distinct even for degenerate depth/fanout ranges.
inline PlanGraph generate_synthetic_plan(std::uint64_t seed, int depth_lo, int depth_hi,
                                         int fanout_lo, int fanout_hi,
                                         int depth_pick, int column_fan) {
    if (depth_lo < 1 || depth_hi < depth_lo)
        fail("synthetic plan: invalid depth range");
    if (fanout_lo < 1 || fanout_hi < fanout_lo)
        fail("synthetic plan: invalid fanout range");
    Rng rng(seed);
    int depth = depth_lo + depth_pick % (depth_hi - depth_lo + 1);
    PlanGraph g;
    auto add_node = [&](PlanNode node) {
        node.id = static_cast<int>(g.nodes.size());
        g.nodes.push_back(std::move(node));
        return g.nodes.back().id;
    };
    auto add_scan_leaves = [&](int scan_id, bool is_root) {
        int leaves = 1 + static_cast<int>(rng.bounded(2));
        for (int i = 0; i < leaves; ++i) {
            // Root output columns are reserved for the diversity fan, so a
            // root-level scan draws only TABLE/PREDICATE leaves.
            NodeKind kind;
            if (is_root) {
                kind = rng.bounded(2) == 0 ? NodeKind::Table : NodeKind::Predicate;
            } else {
                switch (rng.bounded(3)) {
                case 0: kind = NodeKind::Table; break;
                case 1: kind = NodeKind::Column; break;
                default: kind = NodeKind::Predicate; break;
                }
            }
            int leaf = add_node(detail::make_leaf_node(kind, rng));
            g.edges.emplace_back(leaf, scan_id);
        }
    };
    // Build top-down so the root gets id 0.
    struct Frame { int id; int level; };
    g.root = add_node(detail::make_op_node(rng));
    std::deque<Frame> frames{{g.root, 0}};
    while (!frames.empty()) {
        Frame f = frames.front();
        frames.pop_front();
        if (f.level + 1 < depth) {
            int fanout = static_cast<int>(rng.uniform_int(fanout_lo, fanout_hi));
            for (int c = 0; c < fanout; ++c) {
                int child = add_node(detail::make_op_node(rng));
                g.edges.emplace_back(child, f.id);
                frames.push_back({child, f.level + 1});
            }
        } else {
            add_scan_leaves(f.id, f.id == g.root);
        }
    }
    for (int c = 0; c < column_fan; ++c) {
        int leaf = add_node(detail::make_leaf_node(NodeKind::Column, rng));
        g.edges.emplace_back(leaf, g.root);
    }
    validate_graph(g);
    return g;
}

/// Seeded workload of `count` synthetic plans. Depth cycles over its range
/// and the root column fan cycles over ceil(count/4) widths, so at least
/// that many distinct shapes appear regardless of the ranges chosen.
inline Workload generate_synthetic_workload(std::uint64_t seed, int count,
                                            int depth_lo, int depth_hi,
                                            int fanout_lo, int fanout_hi) {
    if (count < 1)
        fail("synthetic workload: count must be >= 1");
    int fan_period = std::max(1, (count + 3) / 4);
    Workload w;
    for (int i = 0; i < count; ++i) {
        std::string id = "q" + std::to_string(i);
        PlanGraph g = generate_synthetic_plan(mix_seed(seed, 0x706C616EULL, static_cast<std::uint64_t>(i)),
                                              depth_lo, depth_hi, fanout_lo, fanout_hi,
                                              i, 1 + i % fan_period);
        w.queries.emplace_back(std::move(id), std::move(g));
    }
    return w;
}

inline json workload_to_json(const Workload& w) {
    json queries = json::array();
    for (const auto& [id, plan] : w.queries)
        queries.push_back(json{{"id", id}, {"plan", plan_to_json(plan)}});
    return json{{"version", 1}, {"queries", std::move(queries)}};
}

/// Workload documents either list plans inline under `queries` or name
/// synthetic-generator parameters under `synthetic`.
inline Workload workload_from_json(const json& doc) {
    if (doc.contains("queries")) {
        Workload w;
        std::set<std::string> ids;
        for (const auto& q : doc["queries"]) {
            std::string id = q.at("id").get<std::string>();
            if (!ids.insert(id).second)
                fail("duplicate query id '" + id + "' in workload");
            w.queries.emplace_back(std::move(id), parse_plan(q.at("plan")));
        }
        if (w.queries.empty())
            fail("workload has no queries");
        return w;
    }
    if (doc.contains("synthetic")) {
        const json& s = doc["synthetic"];
        auto range = [&](const char* key, int fallback_lo, int fallback_hi) {
            if (!s.contains(key))
                return std::pair<int, int>{fallback_lo, fallback_hi};
            auto v = s[key].get<std::vector<int>>();
            if (v.size() != 2)
                fail(std::string("workload synthetic '") + key + "' must be [lo, hi]");
            return std::pair<int, int>{v[0], v[1]};
        };
        auto [dlo, dhi] = range("depth", 2, 4);
        auto [flo, fhi] = range("fanout", 1, 2);
        return generate_synthetic_workload(s.at("seed").get<std::uint64_t>(),
                                           s.at("count").get<int>(), dlo, dhi, flo, fhi);
    }
    fail("workload document needs 'queries' or 'synthetic'");
}

inline Workload load_workload(const std::filesystem::path& path) {
    return workload_from_json(load_json(path));
}

inline void save_workload(const std::filesystem::path& path, const Workload& w) {
    save_json(path, workload_to_json(w));
}

} // namespace ktune
