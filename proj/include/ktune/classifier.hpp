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
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/gmm.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/nn.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr int kClassifierHidden1 = 256;
inline constexpr int kClassifierHidden2 = 64;
inline constexpr int kDefaultMMin = 2;
inline constexpr int kDefaultFinetuneIterations = 30;

/// Multi-label network [query embedding ; knob encoding] -> n logistic
/// outputs: three dense layers with leaky-rectifier activations after the
/// first two. Provenance records which tasks trained it.
struct ClassifierModel {
    int n = 0;
    int d = 0;
    int encoding_width = 0;
    DenseLayer l1, l2, l3;
    std::vector<std::string> pretrain_tasks;
    std::string finetune_task;

    Eigen::VectorXd forward(const Eigen::VectorXd& embedding,
                            const KnobEncoding& encoding) const {
        if (embedding.size() != d || encoding.size() != encoding_width)
            fail("classifier: input shape mismatch");
        Eigen::VectorXd x(d + encoding_width);
        x << embedding, encoding;
        Eigen::VectorXd z =
            l3.forward(leaky_relu(l2.forward(leaky_relu(l1.forward(x)))));
        return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    }
};

inline ClassifierModel init_classifier(int n, int d, int encoding_width,
                                       std::uint64_t seed) {
    if (n < 1 || n > 64)
        fail("classifier: n must be in [1, 64]");
    if (d < 1 || encoding_width < 1)
        fail("classifier: invalid input widths");
    ClassifierModel model;
    model.n = n;
    model.d = d;
    model.encoding_width = encoding_width;
    Rng rng(mix_seed(seed, 0x636C6673ULL));
    model.l1 = init_dense(kClassifierHidden1, d + encoding_width, rng);
    model.l2 = init_dense(kClassifierHidden2, kClassifierHidden1, rng);
    model.l3 = init_dense(n, kClassifierHidden2, rng);
    return model;
}

struct TrainingRow {
    Eigen::VectorXd embedding;
    KnobEncoding encoding;
    CategoryLabel label;
};

using TrainingSet = std::vector<TrainingRow>;

struct ClassifierHyper {
    double learning_rate = 1e-3;
    double momentum = 0.9;
    int batch_size = 32;
    int max_epochs = 1000;
    double early_improvement = 1e-6;
    int early_window = 50;
    std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
    std::vector<double> loss_trace;
    int epochs = 0;
};

namespace detail {

inline void check_training_set(const ClassifierModel& model, const TrainingSet& set) {
    if (set.empty())
        fail("classifier training: empty set");
    for (const auto& row : set) {
        if (row.embedding.size() != model.d || row.encoding.size() != model.encoding_width)
            fail("classifier training: row shape mismatch");
        if (row.label.width != model.n)
            fail("classifier training: label width mismatch");
    }
}

/// Per-bit binary cross-entropy on the logit, stable for large |z|:
/// max(z,0) - z y + log(1 + exp(-|z|)); gradient sigmoid(z) - y.
inline double bce_logit(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double classifier_sample_pass(ClassifierModel& model, const TrainingRow& row,
                                     LayerGrad& g1, LayerGrad& g2, LayerGrad& g3) {
    Eigen::VectorXd x(model.d + model.encoding_width);
    x << row.embedding, row.encoding;
    Eigen::VectorXd z1 = model.l1.forward(x);
    Eigen::VectorXd a1 = leaky_relu(z1);
    Eigen::VectorXd z2 = model.l2.forward(a1);
    Eigen::VectorXd a2 = leaky_relu(z2);
    Eigen::VectorXd z3 = model.l3.forward(a2);

    double loss = 0.0;
    Eigen::VectorXd g_z3(model.n);
    for (int j = 0; j < model.n; ++j) {
        double y = row.label.test(j) ? 1.0 : 0.0;
        loss += bce_logit(z3[j], y);
        g_z3[j] = 1.0 / (1.0 + std::exp(-z3[j])) - y;
    }
    g3.d_weight += g_z3 * a2.transpose();
    g3.d_bias += g_z3;
    Eigen::VectorXd g_a2 = model.l3.weight.transpose() * g_z3;
    Eigen::VectorXd g_z2 =
        g_a2.cwiseProduct(z2.unaryExpr([](double v) { return leaky_relu_grad(v); }));
    g2.d_weight += g_z2 * a1.transpose();
    g2.d_bias += g_z2;
    Eigen::VectorXd g_a1 = model.l2.weight.transpose() * g_z2;
    Eigen::VectorXd g_z1 =
        g_a1.cwiseProduct(z1.unaryExpr([](double v) { return leaky_relu_grad(v); }));
    g1.d_weight += g_z1 * x.transpose();
    g1.d_bias += g_z1;
    return loss;
}

} // namespace detail

/// Seeded mini-batch SGD with momentum on summed per-bit binary
/// cross-entropy; stops early on a loss plateau.
inline ClassifierTrainResult train_classifier(ClassifierModel& model, const TrainingSet& set,
                                              const ClassifierHyper& hyper = {}) {
    detail::check_training_set(model, set);
    LayerGrad g1(model.l1), g2(model.l2), g3(model.l3);
    Rng rng(mix_seed(hyper.seed, 0x636C7472ULL));
    std::vector<std::size_t> indices(set.size());
    std::iota(indices.begin(), indices.end(), 0u);

    ClassifierTrainResult result;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
        rng.shuffle(indices);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < indices.size();
             start += static_cast<std::size_t>(hyper.batch_size)) {
            std::size_t stop =
                std::min(indices.size(), start + static_cast<std::size_t>(hyper.batch_size));
            g1.zero();
            g2.zero();
            g3.zero();
            for (std::size_t i = start; i < stop; ++i)
                epoch_loss +=
                    detail::classifier_sample_pass(model, set[indices[i]], g1, g2, g3);
            double scale = 1.0 / static_cast<double>(stop - start);
            g1.apply(model.l1, hyper.learning_rate, hyper.momentum, scale);
            g2.apply(model.l2, hyper.learning_rate, hyper.momentum, scale);
            g3.apply(model.l3, hyper.learning_rate, hyper.momentum, scale);
        }
        epoch_loss /= static_cast<double>(set.size());
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

/// Few-shot adaptation on the current task's recent rows only: the
/// learning rate drops to a tenth of the pretraining rate and epochs are
/// capped at 200. The embedding model is untouched upstream.
inline ClassifierTrainResult finetune_classifier(ClassifierModel& model,
                                                 const TrainingSet& recent,
                                                 ClassifierHyper hyper = {}) {
    hyper.learning_rate /= 10.0;
    hyper.max_epochs = std::min(hyper.max_epochs, 200);
    return train_classifier(model, recent, hyper);
}

/// Bit j = 1 iff logistic output j >= 0.5; all below 0.5 sets the argmax
/// bit instead, so predicted labels are never empty.
inline CategoryLabel predict(const ClassifierModel& model, const Eigen::VectorXd& embedding,
                             const KnobEncoding& encoding) {
    Eigen::VectorXd out = model.forward(embedding, encoding);
    CategoryLabel label(0, model.n);
    Eigen::Index argmax = 0;
    for (Eigen::Index j = 0; j < out.size(); ++j) {
        if (out[j] >= 0.5)
            label.set(static_cast<int>(j));
        if (out[j] > out[argmax])
            argmax = j;
    }
    if (!label.any())
        label.set(static_cast<int>(argmax));
    return label;
}

/// Per-task history of executed evaluations keyed by (query id, label).
/// `task_id` is the provenance tag; judge/estimate refuse a store from a
/// different task so pretraining history can never leak into estimates.
class LabelStore {
public:
    LabelStore() = default;
    explicit LabelStore(std::string task_id) : task_id_(std::move(task_id)) {}

    const std::string& task_id() const { return task_id_; }

    void add(const std::string& query_id, const CategoryLabel& label, double latency) {
        entries_[{query_id, label.bits}].push_back(latency);
    }

    std::size_t count(const std::string& query_id, const CategoryLabel& label) const {
        auto it = entries_.find({query_id, label.bits});
        return it == entries_.end() ? 0 : it->second.size();
    }

    const std::vector<double>* find(const std::string& query_id,
                                    const CategoryLabel& label) const {
        auto it = entries_.find({query_id, label.bits});
        return it == entries_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    std::string task_id_;
    std::map<std::pair<std::string, std::uint64_t>, std::vector<double>> entries_;
};

inline void check_store_task(const LabelStore& store, const std::string& task_id) {
    if (store.task_id() != task_id)
        fail("label store belongs to task '" + store.task_id() + "', not '" + task_id +
             "'");
}

/// True iff the current task's store holds at least m_min evaluations for
/// (query id, label).
inline bool judge(const LabelStore& store, const std::string& task_id,
                  const std::string& query_id, const CategoryLabel& label,
                  int m_min = kDefaultMMin) {
    check_store_task(store, task_id);
    return store.count(query_id, label) >= static_cast<std::size_t>(m_min);
}

/// Arithmetic mean of the stored latencies for (query id, label).
/// Rejects calls judge would have answered false.
inline double estimate(const LabelStore& store, const std::string& task_id,
                       const std::string& query_id, const CategoryLabel& label,
                       int m_min = kDefaultMMin) {
    if (!judge(store, task_id, query_id, label, m_min))
        fail("estimate called for (" + query_id + ", " + label.to_string() +
             ") without a passing judge");
    const auto* latencies = store.find(query_id, label);
    return std::accumulate(latencies->begin(), latencies->end(), 0.0) /
           static_cast<double>(latencies->size());
}

struct ClassificationMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    bool accuracy_defaulted = false;
    bool precision_defaulted = false;
    bool recall_defaulted = false;
    long tp = 0, tn = 0, fp = 0, fn = 0;
};

/// Micro-averaged per-bit counts across all rows:
/// accuracy = (TP+TN)/(TP+TN+FP+FN), precision = TP/(TP+FP),
/// recall = TP/(TP+FN). A zero denominator reports 1.0 and sets the flag.
inline ClassificationMetrics classification_metrics(
    const std::vector<CategoryLabel>& predictions,
    const std::vector<CategoryLabel>& truths) {
    if (predictions.size() != truths.size())
        fail("classification_metrics: length mismatch");
    ClassificationMetrics m;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].width != truths[i].width)
            fail("classification_metrics: label width mismatch at row " +
                 std::to_string(i));
        for (int j = 0; j < predictions[i].width; ++j) {
            bool p = predictions[i].test(j);
            bool t = truths[i].test(j);
            if (p && t)
                m.tp++;
            else if (!p && !t)
                m.tn++;
            else if (p && !t)
                m.fp++;
            else
                m.fn++;
        }
    }
    auto ratio = [](long num, long den, bool& flag) {
        if (den == 0) {
            flag = true;
            return 1.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    m.accuracy = ratio(m.tp + m.tn, m.tp + m.tn + m.fp + m.fn, m.accuracy_defaulted);
    m.precision = ratio(m.tp, m.tp + m.fp, m.precision_defaulted);
    m.recall = ratio(m.tp, m.tp + m.fn, m.recall_defaulted);
    return m;
}

inline json classifier_to_json(const ClassifierModel& model) {
    return json{{"version", 1},
                {"n", model.n},
                {"d", model.d},
                {"encoding_width", model.encoding_width},
                {"layers", json{{"l1", dense_to_json(model.l1)},
                                {"l2", dense_to_json(model.l2)},
                                {"l3", dense_to_json(model.l3)}}},
                {"provenance", json{{"pretrain_tasks", model.pretrain_tasks},
                                    {"finetune_task", model.finetune_task}}}};
}

inline ClassifierModel classifier_from_json(const json& doc) {
    if (!doc.contains("version"))
        fail("classifier checkpoint: missing version");
    ClassifierModel model;
    model.n = doc.at("n").get<int>();
    model.d = doc.at("d").get<int>();
    model.encoding_width = doc.at("encoding_width").get<int>();
    model.l1 = dense_from_json(doc.at("layers").at("l1"));
    model.l2 = dense_from_json(doc.at("layers").at("l2"));
    model.l3 = dense_from_json(doc.at("layers").at("l3"));
    if (model.l1.weight.cols() != model.d + model.encoding_width ||
        model.l3.weight.rows() != model.n)
        fail("classifier checkpoint: layer shapes inconsistent with n/d/width");
    const json& prov = doc.at("provenance");
    model.pretrain_tasks = prov.at("pretrain_tasks").get<std::vector<std::string>>();
    model.finetune_task = prov.at("finetune_task").get<std::string>();
    return model;
}

inline void save_classifier(const std::filesystem::path& path, const ClassifierModel& model) {
    save_json(path, classifier_to_json(model));
}

inline ClassifierModel load_classifier(const std::filesystem::path& path) {
    return classifier_from_json(load_json(path));
}

} // namespace ktune
