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
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "ktune/common.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr int kDefaultBoCandidates = 1000;
inline constexpr double kGpJitter = 1e-6;

/// One uniform draw per knob.
inline KnobConfiguration random_configuration(const KnobSpace& space, Rng& rng) {
    KnobConfiguration config;
    for (const auto& spec : space.knobs()) {
        if (spec.kind == KnobKind::Numeric)
            config.values[spec.name] = rng.uniform(spec.min, spec.max);
        else
            config.values[spec.name] = spec.levels[rng.bounded(spec.levels.size())];
    }
    return config;
}

/// Latin hypercube sample: every numeric knob gets exactly one point in
/// each of `count` equal-width strata of [min, max], stratum order
/// shuffled independently per dimension. Categorical knobs draw uniformly.
inline std::vector<KnobConfiguration> lhs_sample(const KnobSpace& space, int count,
                                                 std::uint64_t seed) {
    if (count < 1)
        fail("lhs_sample: count must be >= 1");
    Rng rng(mix_seed(seed, 0x6C687300ULL));
    std::vector<KnobConfiguration> out(static_cast<std::size_t>(count));
    for (const auto& spec : space.knobs()) {
        if (spec.kind == KnobKind::Numeric) {
            auto strata = rng.permutation(static_cast<std::size_t>(count));
            double width = (spec.max - spec.min) / static_cast<double>(count);
            for (int i = 0; i < count; ++i) {
                double u = rng.uniform();
                double value =
                    spec.min + (static_cast<double>(strata[static_cast<std::size_t>(i)]) + u) * width;
                out[static_cast<std::size_t>(i)].values[spec.name] =
                    std::min(value, spec.max);
            }
        } else {
            for (int i = 0; i < count; ++i)
                out[static_cast<std::size_t>(i)].values[spec.name] =
                    spec.levels[rng.bounded(spec.levels.size())];
        }
    }
    return out;
}

struct Observation {
    KnobConfiguration config;
    KnobEncoding encoding;
    double total_seconds = 0.0;
};

/// Recommends the next configuration to try; observations are append-only
/// within a run and the orchestrator serializes observe/recommend calls.
class Tuner {
public:
    virtual ~Tuner() = default;

    virtual void observe(Observation obs) { observations_.push_back(std::move(obs)); }
    virtual KnobConfiguration recommend() = 0;
    virtual std::string name() const = 0;

    const std::vector<Observation>& observations() const { return observations_; }

    const Observation& best_observation() const {
        if (observations_.empty())
            fail("tuner has no observations");
        std::size_t best = 0;
        for (std::size_t i = 1; i < observations_.size(); ++i)
            if (observations_[i].total_seconds < observations_[best].total_seconds)
                best = i;
        return observations_[best];
    }

protected:
    std::vector<Observation> observations_;
};

class RandomTuner : public Tuner {
public:
    RandomTuner(KnobSpace space, std::uint64_t seed)
        : space_(std::move(space)), rng_(mix_seed(seed, 0x726E6474ULL)) {}

    KnobConfiguration recommend() override { return random_configuration(space_, rng_); }
    std::string name() const override { return "random"; }

private:
    KnobSpace space_;
    Rng rng_;
};

namespace detail {

/// Squared-exponential GP posterior over standardized targets.
struct GpModel {
    Eigen::MatrixXd x;        // rows = observations
    Eigen::VectorXd y;        // standardized
    Eigen::LLT<Eigen::MatrixXd> chol;
    Eigen::VectorXd alpha;    // K^-1 y
    double length_scale = 1.0;
    double signal_variance = 1.0;

    double kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
        double d2 = (a - b).squaredNorm();
        return signal_variance * std::exp(-0.5 * d2 / (length_scale * length_scale));
    }

    /// Posterior mean and variance at one point, standardized space.
    std::pair<double, double> posterior(const Eigen::VectorXd& q) const {
        Eigen::VectorXd k(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            k[i] = kernel(x.row(i).transpose(), q);
        double mean = k.dot(alpha);
        Eigen::VectorXd v = chol.solve(k);
        double var = signal_variance + kGpJitter - k.dot(v);
        return {mean, std::max(var, 0.0)};
    }
};

inline double gp_log_marginal(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                              double length_scale, double signal_variance,
                              Eigen::LLT<Eigen::MatrixXd>& chol_out,
                              Eigen::VectorXd& alpha_out) {
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            double d2 = (x.row(i) - x.row(j)).squaredNorm();
            double v = signal_variance * std::exp(-0.5 * d2 / (length_scale * length_scale));
            k(i, j) = v;
            k(j, i) = v;
        }
        k(i, i) += kGpJitter;
    }
    chol_out.compute(k);
    if (chol_out.info() != Eigen::Success)
        return -std::numeric_limits<double>::infinity();
    alpha_out = chol_out.solve(y);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        log_det += std::log(chol_out.matrixL()(i, i));
    return -0.5 * y.dot(alpha_out) - log_det -
           0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
}

/// Expected improvement below the incumbent minimum; zero when the
/// posterior is certain.
inline double expected_improvement(double mean, double variance, double best) {
    double sd = std::sqrt(variance);
    if (sd <= 0.0)
        return 0.0;
    double gamma = (best - mean) / sd;
    return sd * (gamma * normal_cdf(gamma) + normal_pdf(gamma));
}

} // namespace detail

/// Gaussian-process Bayesian optimization: squared-exponential kernel with
/// hyperparameters grid-searched by marginal likelihood on standardized
/// targets, expected improvement over `candidate_count` random
/// configurations, ties broken by first candidate index.
class BoTuner : public Tuner {
public:
    BoTuner(KnobSpace space, std::uint64_t seed, int candidate_count = kDefaultBoCandidates)
        : space_(std::move(space)), rng_(mix_seed(seed, 0x626F7475ULL)),
          candidate_count_(candidate_count) {
        if (candidate_count_ < 1)
            fail("bo tuner: candidate count must be >= 1");
    }

    KnobConfiguration recommend() override {
        if (observations_.size() < 2)
            fail("bo tuner: needs at least 2 observations");
        detail::GpModel gp = fit_gp();
        double y_best = gp.y.minCoeff();
        KnobConfiguration best_config;
        double best_ei = -1.0;
        for (int c = 0; c < candidate_count_; ++c) {
            KnobConfiguration candidate = random_configuration(space_, rng_);
            auto [mean, var] = gp.posterior(encode_configuration(space_, candidate));
            double ei = detail::expected_improvement(mean, var, y_best);
            if (ei > best_ei) {
                best_ei = ei;
                best_config = std::move(candidate);
            }
        }
        return best_config;
    }

    std::string name() const override { return "bo"; }

    /// Posterior mean/variance in raw (unstandardized) seconds; test hook.
    std::pair<double, double> posterior_seconds(const KnobEncoding& encoding) {
        detail::GpModel gp = fit_gp();
        auto [mean, var] = gp.posterior(encoding);
        return {mean * y_std_ + y_mean_, var * y_std_ * y_std_};
    }

private:
    detail::GpModel fit_gp() {
        const auto n = static_cast<Eigen::Index>(observations_.size());
        const auto dim = static_cast<Eigen::Index>(space_.encoding_width());
        Eigen::MatrixXd x(n, dim);
        Eigen::VectorXd raw(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            x.row(i) = observations_[static_cast<std::size_t>(i)].encoding.transpose();
            raw[i] = observations_[static_cast<std::size_t>(i)].total_seconds;
        }
        y_mean_ = raw.mean();
        double var = (raw.array() - y_mean_).square().sum() / static_cast<double>(n);
        y_std_ = std::max(std::sqrt(var), 1e-12);
        Eigen::VectorXd y = (raw.array() - y_mean_) / y_std_;

        static constexpr double kLengthScales[] = {0.1, 0.3, 1.0, 3.0};
        static constexpr double kSignalVariances[] = {0.5, 1.0, 2.0};
        detail::GpModel best;
        double best_ml = -std::numeric_limits<double>::infinity();
        for (double ls : kLengthScales) {
            for (double sv : kSignalVariances) {
                Eigen::LLT<Eigen::MatrixXd> chol;
                Eigen::VectorXd alpha;
                double ml = detail::gp_log_marginal(x, y, ls, sv, chol, alpha);
                if (ml > best_ml) {
                    best_ml = ml;
                    best.length_scale = ls;
                    best.signal_variance = sv;
                    best.chol = std::move(chol);
                    best.alpha = std::move(alpha);
                }
            }
        }
        if (!std::isfinite(best_ml))
            fail("bo tuner: GP fit failed for every hyperparameter choice");
        best.x = std::move(x);
        best.y = std::move(y);
        return best;
    }

    KnobSpace space_;
    Rng rng_;
    int candidate_count_;
    double y_mean_ = 0.0;
    double y_std_ = 1.0;
};

} // namespace ktune
