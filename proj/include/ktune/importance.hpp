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
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr int kForestTrees = 25;
inline constexpr int kForestMaxDepth = 6;
inline constexpr double kForestBootstrapFraction = 0.8;
inline constexpr int kDefaultImportanceRepeats = 5;

struct EncodedSample {
    KnobEncoding encoding;
    double latency = 0.0;
};

/// Binary regression tree, SSE-minimizing axis splits, mean leaves.
class RegressionTree {
public:
    void fit(const std::vector<EncodedSample>& samples, const std::vector<int>& rows,
             int max_depth) {
        nodes_.clear();
        build(samples, rows, max_depth);
    }

    double predict(const KnobEncoding& x) const {
        int at = 0;
        while (!nodes_[static_cast<std::size_t>(at)].is_leaf())
            at = x[nodes_[static_cast<std::size_t>(at)].feature] <=
                         nodes_[static_cast<std::size_t>(at)].threshold
                     ? nodes_[static_cast<std::size_t>(at)].left
                     : nodes_[static_cast<std::size_t>(at)].right;
        return nodes_[static_cast<std::size_t>(at)].value;
    }

    /// Feature indices this tree actually splits on.
    std::vector<int> split_features() const {
        std::vector<int> out;
        for (const auto& n : nodes_)
            if (!n.is_leaf())
                out.push_back(static_cast<int>(n.feature));
        return out;
    }

private:
    struct Node {
        Eigen::Index feature = -1;
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;

        bool is_leaf() const { return feature < 0; }
    };

    int build(const std::vector<EncodedSample>& samples, const std::vector<int>& rows,
              int depth_left) {
        int id = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        double mean = 0.0;
        for (int r : rows)
            mean += samples[static_cast<std::size_t>(r)].latency;
        mean /= static_cast<double>(rows.size());
        nodes_[static_cast<std::size_t>(id)].value = mean;
        if (depth_left == 0 || rows.size() < 2)
            return id;

        // Best split over all features; candidates are midpoints between
        // consecutive distinct values. First-found wins ties.
        auto width = samples[static_cast<std::size_t>(rows[0])].encoding.size();
        double best_sse = sse(samples, rows, mean);
        const double parent_sse = best_sse;
        Eigen::Index best_feature = -1;
        double best_threshold = 0.0;
        std::vector<int> sorted = rows;
        for (Eigen::Index f = 0; f < width; ++f) {
            std::sort(sorted.begin(), sorted.end(), [&](int a, int b) {
                double va = samples[static_cast<std::size_t>(a)].encoding[f];
                double vb = samples[static_cast<std::size_t>(b)].encoding[f];
                return va != vb ? va < vb : a < b;
            });
            double left_sum = 0.0, left_sq = 0.0;
            double total_sum = 0.0, total_sq = 0.0;
            for (int r : sorted) {
                double y = samples[static_cast<std::size_t>(r)].latency;
                total_sum += y;
                total_sq += y * y;
            }
            for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
                double y = samples[static_cast<std::size_t>(sorted[i])].latency;
                left_sum += y;
                left_sq += y * y;
                double xv = samples[static_cast<std::size_t>(sorted[i])].encoding[f];
                double xn = samples[static_cast<std::size_t>(sorted[i + 1])].encoding[f];
                if (xv == xn)
                    continue;
                auto nl = static_cast<double>(i + 1);
                auto nr = static_cast<double>(sorted.size() - i - 1);
                double right_sum = total_sum - left_sum;
                double right_sq = total_sq - left_sq;
                double split_sse = (left_sq - left_sum * left_sum / nl) +
                                   (right_sq - right_sum * right_sum / nr);
                if (split_sse < best_sse - 1e-12) {
                    best_sse = split_sse;
                    best_feature = f;
                    best_threshold = 0.5 * (xv + xn);
                }
            }
        }
        if (best_feature < 0 || best_sse >= parent_sse)
            return id;
        std::vector<int> left_rows, right_rows;
        for (int r : rows) {
            if (samples[static_cast<std::size_t>(r)].encoding[best_feature] <= best_threshold)
                left_rows.push_back(r);
            else
                right_rows.push_back(r);
        }
        nodes_[static_cast<std::size_t>(id)].feature = best_feature;
        nodes_[static_cast<std::size_t>(id)].threshold = best_threshold;
        nodes_[static_cast<std::size_t>(id)].left = build(samples, left_rows, depth_left - 1);
        nodes_[static_cast<std::size_t>(id)].right = build(samples, right_rows, depth_left - 1);
        return id;
    }

    static double sse(const std::vector<EncodedSample>& samples, const std::vector<int>& rows,
                      double mean) {
        double s = 0.0;
        for (int r : rows) {
            double d = samples[static_cast<std::size_t>(r)].latency - mean;
            s += d * d;
        }
        return s;
    }

    std::vector<Node> nodes_;
};

/// Bagged ensemble of depth-bounded trees; prediction is the tree mean.
class LatencyForest {
public:
    double predict(const KnobEncoding& x) const {
        double sum = 0.0;
        for (const auto& tree : trees_)
            sum += tree.predict(x);
        return sum / static_cast<double>(trees_.size());
    }

    double mse(const std::vector<EncodedSample>& samples) const {
        double acc = 0.0;
        for (const auto& s : samples) {
            double d = predict(s.encoding) - s.latency;
            acc += d * d;
        }
        return acc / static_cast<double>(samples.size());
    }

    const std::vector<RegressionTree>& trees() const { return trees_; }
    std::vector<RegressionTree>& trees() { return trees_; }

private:
    std::vector<RegressionTree> trees_;
};

/// 25 depth-6 trees, each on a bootstrap of 80% of the rows drawn with
/// replacement, all features considered at every split.
inline LatencyForest fit_regressor(const std::vector<EncodedSample>& samples,
                                   std::uint64_t seed = 0) {
    if (samples.size() < 20)
        fail("fit_regressor: too few samples (" + std::to_string(samples.size()) +
             ", need at least 20)");
    auto width = samples.front().encoding.size();
    for (const auto& s : samples)
        if (s.encoding.size() != width)
            fail("fit_regressor: inconsistent encoding widths");
    LatencyForest forest;
    auto draws = static_cast<std::size_t>(
        kForestBootstrapFraction * static_cast<double>(samples.size()) + 0.5);
    draws = std::max<std::size_t>(draws, 1);
    for (int t = 0; t < kForestTrees; ++t) {
        Rng rng(mix_seed(seed, 0x666F7265ULL, static_cast<std::uint64_t>(t)));
        std::vector<int> rows(draws);
        for (auto& r : rows)
            r = static_cast<int>(rng.bounded(samples.size()));
        forest.trees().emplace_back();
        forest.trees().back().fit(samples, rows, kForestMaxDepth);
    }
    return forest;
}

struct ImportanceVector {
    std::map<std::string, double> scores;
    bool normalized = false;

    /// Scores as a vector in knob-space order (training-target layout).
    Eigen::VectorXd to_target(const KnobSpace& space) const {
        Eigen::VectorXd v(static_cast<Eigen::Index>(space.size()));
        for (std::size_t i = 0; i < space.size(); ++i) {
            auto it = scores.find(space.knobs()[i].name);
            v[static_cast<Eigen::Index>(i)] = it == scores.end() ? 0.0 : it->second;
        }
        return v;
    }
};

/// Mean squared-error increase after shuffling each knob's encoding
/// segment (one shared permutation across the segment's columns per
/// repeat), negatives clipped, normalized to the simplex. A degenerate
/// all-zero result falls back to uniform so the target stays a
/// distribution.
inline ImportanceVector permutation_importance(const LatencyForest& forest,
                                               const std::vector<EncodedSample>& samples,
                                               const KnobSpace& space,
                                               int repeats = kDefaultImportanceRepeats,
                                               std::uint64_t seed = 0) {
    if (samples.empty())
        fail("permutation_importance: no samples");
    if (repeats < 1)
        fail("permutation_importance: repeats must be >= 1");
    auto offsets = space.segment_offsets();
    double baseline = forest.mse(samples);
    ImportanceVector out;
    std::vector<EncodedSample> shuffled = samples;
    for (std::size_t k = 0; k < space.size(); ++k) {
        const KnobSpec& spec = space.knobs()[k];
        auto off = static_cast<Eigen::Index>(offsets[k]);
        auto seg = static_cast<Eigen::Index>(spec.encoding_width());
        double delta_sum = 0.0;
        for (int r = 0; r < repeats; ++r) {
            Rng rng(mix_seed(seed, fnv1a64(spec.name), static_cast<std::uint64_t>(r)));
            auto perm = rng.permutation(samples.size());
            for (std::size_t i = 0; i < samples.size(); ++i)
                shuffled[i].encoding.segment(off, seg) =
                    samples[perm[i]].encoding.segment(off, seg);
            delta_sum += forest.mse(shuffled) - baseline;
        }
        for (std::size_t i = 0; i < samples.size(); ++i)
            shuffled[i].encoding.segment(off, seg) = samples[i].encoding.segment(off, seg);
        out.scores[spec.name] = std::max(0.0, delta_sum / static_cast<double>(repeats));
    }
    double total = 0.0;
    for (const auto& [name, score] : out.scores)
        total += score;
    if (total > 0.0) {
        for (auto& [name, score] : out.scores)
            score /= total;
    } else {
        for (auto& [name, score] : out.scores)
            score = 1.0 / static_cast<double>(space.size());
    }
    out.normalized = true;
    return out;
}

} // namespace ktune
