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

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr double kLeakySlope = 0.01;

inline double leaky_relu(double x) { return x > 0.0 ? x : kLeakySlope * x; }
inline double leaky_relu_grad(double x) { return x > 0.0 ? 1.0 : kLeakySlope; }

inline Eigen::VectorXd leaky_relu(const Eigen::VectorXd& x) {
    return x.unaryExpr([](double v) { return leaky_relu(v); });
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
    return e / e.sum();
}

struct DenseLayer {
    Eigen::MatrixXd weight;  // rows = outputs, cols = inputs
    Eigen::VectorXd bias;

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
        return weight * x + bias;
    }
};

/// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
inline DenseLayer init_dense(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    DenseLayer layer;
    layer.weight.resize(rows, cols);
    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            layer.weight(r, c) = rng.uniform(-bound, bound);
    layer.bias = Eigen::VectorXd::Zero(rows);
    return layer;
}

/// Gradient accumulator plus momentum state for one layer.
struct LayerGrad {
    Eigen::MatrixXd d_weight;
    Eigen::VectorXd d_bias;
    Eigen::MatrixXd v_weight;
    Eigen::VectorXd v_bias;

    explicit LayerGrad(const DenseLayer& layer)
        : d_weight(Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols())),
          d_bias(Eigen::VectorXd::Zero(layer.bias.size())),
          v_weight(Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols())),
          v_bias(Eigen::VectorXd::Zero(layer.bias.size())) {}

    void zero() {
        d_weight.setZero();
        d_bias.setZero();
    }

    void apply(DenseLayer& layer, double lr, double momentum, double scale) {
        v_weight = momentum * v_weight - lr * scale * d_weight;
        v_bias = momentum * v_bias - lr * scale * d_bias;
        layer.weight += v_weight;
        layer.bias += v_bias;
    }
};

/// Flat row-major weights plus shape, the layout every checkpoint uses.
inline json dense_to_json(const DenseLayer& layer) {
    json weights = json::array();
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
            weights.push_back(layer.weight(r, c));
    json bias = json::array();
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
        bias.push_back(layer.bias(i));
    return json{{"rows", layer.weight.rows()},
                {"cols", layer.weight.cols()},
                {"weights", std::move(weights)},
                {"bias", std::move(bias)}};
}

inline DenseLayer dense_from_json(const json& j) {
    DenseLayer layer;
    auto rows = j.at("rows").get<Eigen::Index>();
    auto cols = j.at("cols").get<Eigen::Index>();
    auto weights = j.at("weights").get<std::vector<double>>();
    auto bias = j.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(weights.size()) != rows * cols ||
        static_cast<Eigen::Index>(bias.size()) != rows)
        fail("checkpoint layer: shape does not match weight count");
    layer.weight.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            layer.weight(r, c) = weights[static_cast<std::size_t>(r * cols + c)];
    layer.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), rows);
    return layer;
}

} // namespace ktune
