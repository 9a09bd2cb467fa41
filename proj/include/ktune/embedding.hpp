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

#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/nn.hpp"
#include "ktune/plan_graph.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr int kDefaultEmbeddingWidth = 64;
inline constexpr int kHeadHidden1 = 128;
inline constexpr int kHeadHidden2 = 64;

using QueryEmbedding = Eigen::VectorXd;

inline constexpr std::array<NodeKind, 4> kAllNodeKinds = {
    NodeKind::PlanOp, NodeKind::Table, NodeKind::Column, NodeKind::Predicate};

/// One dense transform per node kind. A node's hidden vector is
/// leaky_relu(W_kind * [features ; mean of children hiddens] + b_kind);
/// the plan's embedding is the root's hidden vector.
struct EmbeddingModel {
    int d = 0;
    std::array<DenseLayer, 4> transforms;  // indexed by NodeKind

    const DenseLayer& transform(NodeKind kind) const {
        return transforms[static_cast<std::size_t>(kind)];
    }
    DenseLayer& transform(NodeKind kind) {
        return transforms[static_cast<std::size_t>(kind)];
    }
};

/// Three dense layers d -> h1 -> h2 -> m with leaky-rectifier activations
/// between them; the output is pushed onto the probability simplex with a
/// softmax, so it is non-negative and sums to 1 for every input.
struct ImportanceHead {
    DenseLayer l1, l2, l3;

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
        return softmax(l3.forward(leaky_relu(l2.forward(leaky_relu(l1.forward(x))))));
    }

    Eigen::Index output_size() const { return l3.weight.rows(); }
};

inline EmbeddingModel init_embedding_model(int d, std::uint64_t seed) {
    if (d < 1)
        fail("embedding width must be >= 1");
    EmbeddingModel model;
    model.d = d;
    Rng rng(mix_seed(seed, 0x656D6264ULL));
    for (NodeKind kind : kAllNodeKinds) {
        auto in = static_cast<Eigen::Index>(feature_length(kind)) + d;
        model.transform(kind) = init_dense(d, in, rng);
    }
    return model;
}

inline ImportanceHead init_importance_head(int d, int knob_count, std::uint64_t seed) {
    if (knob_count < 1)
        fail("importance head needs at least one knob");
    ImportanceHead head;
    Rng rng(mix_seed(seed, 0x68656164ULL));
    head.l1 = init_dense(kHeadHidden1, d, rng);
    head.l2 = init_dense(kHeadHidden2, kHeadHidden1, rng);
    head.l3 = init_dense(knob_count, kHeadHidden2, rng);
    return head;
}

namespace detail {

/// Per-node activations from one bottom-up pass, kept for backprop.
struct PlanForward {
    std::vector<int> order;                    // bottom-up topological
    std::vector<std::vector<int>> children;    // ascending child id
    std::vector<Eigen::VectorXd> input;        // [features ; child mean]
    std::vector<Eigen::VectorXd> pre;          // W x + b
    std::vector<Eigen::VectorXd> hidden;       // leaky_relu(pre)
};

inline PlanForward embed_forward(const EmbeddingModel& model, const PlanGraph& plan) {
    PlanForward fw;
    fw.order = plan.topological_order();
    fw.children = plan.child_lists();
    fw.input.resize(plan.nodes.size());
    fw.pre.resize(plan.nodes.size());
    fw.hidden.resize(plan.nodes.size());
    for (int id : fw.order) {
        const PlanNode& node = plan.nodes[static_cast<std::size_t>(id)];
        const DenseLayer& layer = model.transform(node.kind);
        auto flen = static_cast<Eigen::Index>(feature_length(node.kind));
        if (node.features.size() != flen || layer.weight.cols() != flen + model.d)
            fail("feature-length mismatch between plan node and embedding transform");
        Eigen::VectorXd x(flen + model.d);
        x.head(flen) = node.features;
        const auto& kids = fw.children[static_cast<std::size_t>(id)];
        if (kids.empty()) {
            x.tail(model.d).setZero();
        } else {
            Eigen::VectorXd agg = Eigen::VectorXd::Zero(model.d);
            for (int c : kids)
                agg += fw.hidden[static_cast<std::size_t>(c)];
            x.tail(model.d) = agg / static_cast<double>(kids.size());
        }
        Eigen::VectorXd z = layer.forward(x);
        fw.input[static_cast<std::size_t>(id)] = std::move(x);
        fw.hidden[static_cast<std::size_t>(id)] = leaky_relu(z);
        fw.pre[static_cast<std::size_t>(id)] = std::move(z);
    }
    return fw;
}

} // namespace detail

inline QueryEmbedding embed(const EmbeddingModel& model, const PlanGraph& plan) {
    auto fw = detail::embed_forward(model, plan);
    return fw.hidden[static_cast<std::size_t>(plan.root)];
}

struct EmbeddingSample {
    PlanGraph plan;
    Eigen::VectorXd target;  // on the probability simplex
};

struct TrainHyper {
    double learning_rate = 1e-2;
    double momentum = 0.9;
    int batch_size = 16;
    int max_epochs = 2000;
    double early_improvement = 1e-6;
    int early_window = 50;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> loss_trace;  // mean per-sample loss, one per epoch
    int epochs = 0;
};

namespace detail {

struct EmbeddingGrads {
    std::vector<LayerGrad> kinds;  // indexed by NodeKind
    LayerGrad h1, h2, h3;

    EmbeddingGrads(const EmbeddingModel& model, const ImportanceHead& head)
        : h1(head.l1), h2(head.l2), h3(head.l3) {
        for (NodeKind kind : kAllNodeKinds)
            kinds.emplace_back(model.transform(kind));
    }

    void zero() {
        for (auto& g : kinds)
            g.zero();
        h1.zero();
        h2.zero();
        h3.zero();
    }
};

/// Forward + backprop for one sample; accumulates into `grads` and
/// returns the sample's loss, mean squared error over output entries.
inline double embedding_sample_pass(const EmbeddingModel& model, const ImportanceHead& head,
                                    const PlanGraph& plan, const Eigen::VectorXd& target,
                                    EmbeddingGrads& grads) {
    auto fw = embed_forward(model, plan);
    const Eigen::VectorXd& e = fw.hidden[static_cast<std::size_t>(plan.root)];

    Eigen::VectorXd z1 = head.l1.forward(e);
    Eigen::VectorXd a1 = leaky_relu(z1);
    Eigen::VectorXd z2 = head.l2.forward(a1);
    Eigen::VectorXd a2 = leaky_relu(z2);
    Eigen::VectorXd z3 = head.l3.forward(a2);
    Eigen::VectorXd out = softmax(z3);

    auto m = static_cast<double>(out.size());
    Eigen::VectorXd diff = out - target;
    double loss = diff.squaredNorm() / m;

    // d loss / d out, then through the softmax Jacobian diag(s) - s s^T.
    Eigen::VectorXd g_out = 2.0 * diff / m;
    Eigen::VectorXd g_z3 =
        out.cwiseProduct(g_out - Eigen::VectorXd::Constant(out.size(), g_out.dot(out)));

    grads.h3.d_weight += g_z3 * a2.transpose();
    grads.h3.d_bias += g_z3;
    Eigen::VectorXd g_a2 = head.l3.weight.transpose() * g_z3;
    Eigen::VectorXd g_z2 = g_a2.cwiseProduct(z2.unaryExpr([](double v) { return leaky_relu_grad(v); }));
    grads.h2.d_weight += g_z2 * a1.transpose();
    grads.h2.d_bias += g_z2;
    Eigen::VectorXd g_a1 = head.l2.weight.transpose() * g_z2;
    Eigen::VectorXd g_z1 = g_a1.cwiseProduct(z1.unaryExpr([](double v) { return leaky_relu_grad(v); }));
    grads.h1.d_weight += g_z1 * e.transpose();
    grads.h1.d_bias += g_z1;

    // Graph backprop, reverse topological so parents flow before children.
    std::vector<Eigen::VectorXd> g_hidden(plan.nodes.size(),
                                          Eigen::VectorXd::Zero(model.d));
    g_hidden[static_cast<std::size_t>(plan.root)] = head.l1.weight.transpose() * g_z1;
    for (auto it = fw.order.rbegin(); it != fw.order.rend(); ++it) {
        int id = *it;
        const PlanNode& node = plan.nodes[static_cast<std::size_t>(id)];
        const DenseLayer& layer = model.transform(node.kind);
        Eigen::VectorXd g_z = g_hidden[static_cast<std::size_t>(id)].cwiseProduct(
            fw.pre[static_cast<std::size_t>(id)].unaryExpr(
                [](double v) { return leaky_relu_grad(v); }));
        auto& kg = grads.kinds[static_cast<std::size_t>(node.kind)];
        kg.d_weight += g_z * fw.input[static_cast<std::size_t>(id)].transpose();
        kg.d_bias += g_z;
        const auto& kids = fw.children[static_cast<std::size_t>(id)];
        if (!kids.empty()) {
            Eigen::VectorXd g_x = layer.weight.transpose() * g_z;
            Eigen::VectorXd g_agg = g_x.tail(model.d) / static_cast<double>(kids.size());
            for (int c : kids)
                g_hidden[static_cast<std::size_t>(c)] += g_agg;
        }
    }
    return loss;
}

} // namespace detail

/// Joint training of the graph encoder and the importance head: mini-batch
/// SGD with momentum on the mean squared error between head(embed(plan))
/// and the simplex targets. Stops early once the best epoch loss stops
/// improving by `early_improvement` over `early_window` epochs.
inline TrainResult train_embedding(EmbeddingModel& model, ImportanceHead& head,
                                   const std::vector<EmbeddingSample>& dataset,
                                   const TrainHyper& hyper = {}) {
    if (dataset.empty())
        fail("train_embedding: empty dataset");
    for (const auto& sample : dataset) {
        if (sample.target.size() != head.output_size())
            fail("train_embedding: target width does not match head output");
        if (sample.target.minCoeff() < 0.0 ||
            std::abs(sample.target.sum() - 1.0) > 1e-6)
            fail("train_embedding: non-simplex target");
    }
    detail::EmbeddingGrads grads(model, head);
    Rng rng(mix_seed(hyper.seed, 0x74726E65ULL));
    std::vector<std::size_t> indices(dataset.size());
    std::iota(indices.begin(), indices.end(), 0u);

    TrainResult result;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
        rng.shuffle(indices);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < indices.size();
             start += static_cast<std::size_t>(hyper.batch_size)) {
            std::size_t stop =
                std::min(indices.size(), start + static_cast<std::size_t>(hyper.batch_size));
            grads.zero();
            for (std::size_t i = start; i < stop; ++i) {
                const auto& sample = dataset[indices[i]];
                epoch_loss += detail::embedding_sample_pass(model, head, sample.plan,
                                                            sample.target, grads);
            }
            double scale = 1.0 / static_cast<double>(stop - start);
            for (NodeKind kind : kAllNodeKinds)
                grads.kinds[static_cast<std::size_t>(kind)].apply(
                    model.transform(kind), hyper.learning_rate, hyper.momentum, scale);
            grads.h1.apply(head.l1, hyper.learning_rate, hyper.momentum, scale);
            grads.h2.apply(head.l2, hyper.learning_rate, hyper.momentum, scale);
            grads.h3.apply(head.l3, hyper.learning_rate, hyper.momentum, scale);
        }
        epoch_loss /= static_cast<double>(dataset.size());
        result.loss_trace.push_back(epoch_loss);
        result.epochs = epoch + 1;
        if (epoch_loss < best_loss - hyper.early_improvement) {
            best_loss = epoch_loss;
            best_epoch = epoch;
        } else if (epoch - best_epoch >= hyper.early_window) {
            break;
        }
    }
    return result;
}

inline const char* embedding_kind_key(NodeKind kind) {
    switch (kind) {
    case NodeKind::PlanOp: return "plan_op";
    case NodeKind::Table: return "table";
    case NodeKind::Column: return "column";
    case NodeKind::Predicate: return "predicate";
    }
    return "?";
}

inline json embedding_to_json(const EmbeddingModel& model, const ImportanceHead& head) {
    json kinds = json::object();
    for (NodeKind kind : kAllNodeKinds)
        kinds[embedding_kind_key(kind)] = dense_to_json(model.transform(kind));
    return json{{"version", 1},
                {"d", model.d},
                {"kinds", std::move(kinds)},
                {"head", json{{"l1", dense_to_json(head.l1)},
                              {"l2", dense_to_json(head.l2)},
                              {"l3", dense_to_json(head.l3)}}}};
}

inline std::pair<EmbeddingModel, ImportanceHead> embedding_from_json(const json& doc) {
    if (!doc.contains("version") || !doc.contains("d"))
        fail("embedding checkpoint: missing version or d");
    EmbeddingModel model;
    model.d = doc["d"].get<int>();
    for (NodeKind kind : kAllNodeKinds) {
        model.transform(kind) = dense_from_json(doc.at("kinds").at(embedding_kind_key(kind)));
        auto want = static_cast<Eigen::Index>(feature_length(kind)) + model.d;
        if (model.transform(kind).weight.cols() != want ||
            model.transform(kind).weight.rows() != model.d)
            fail("embedding checkpoint: transform shape does not match d");
    }
    ImportanceHead head;
    head.l1 = dense_from_json(doc.at("head").at("l1"));
    head.l2 = dense_from_json(doc.at("head").at("l2"));
    head.l3 = dense_from_json(doc.at("head").at("l3"));
    return {std::move(model), std::move(head)};
}

inline void save_embedding(const std::filesystem::path& path, const EmbeddingModel& model,
                           const ImportanceHead& head) {
    save_json(path, embedding_to_json(model, head));
}

inline std::pair<EmbeddingModel, ImportanceHead>
load_embedding(const std::filesystem::path& path) {
    return embedding_from_json(load_json(path));
}

} // namespace ktune
