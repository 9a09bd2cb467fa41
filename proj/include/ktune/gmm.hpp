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
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ktune/common.hpp"
#include "ktune/rng.hpp"

namespace ktune {

inline constexpr double kDefaultTau = 0.2;
inline constexpr int kGmmMaxIterations = 200;
inline constexpr double kGmmTolerance = 1e-6;
inline constexpr int kGmmRestarts = 5;

struct GaussianComponent {
    double weight = 1.0;
    double mean = 0.0;
    double variance = 1.0;
};

/// One-dimensional mixture, components sorted by ascending mean.
/// Weights sum to 1 within 1e-9; variances sit at or above the fit's floor.
struct GaussianMixture {
    std::vector<GaussianComponent> components;

    std::size_t size() const { return components.size(); }
};

/// n-bit membership label, n in [1, 64]. Bit j corresponds to the mixture
/// component with the j-th smallest mean.
struct CategoryLabel {
    std::uint64_t bits = 0;
    int width = 0;

    CategoryLabel() = default;
    CategoryLabel(std::uint64_t bits_, int width_) : bits(bits_), width(width_) {
        if (width_ < 1 || width_ > 64)
            fail("label width must be in [1, 64]");
        if (width_ < 64 && (bits_ >> width_) != 0)
            fail("label bits exceed width");
    }

    bool test(int j) const { return ((bits >> j) & 1ULL) != 0; }
    void set(int j) { bits |= (1ULL << j); }
    int popcount() const { return static_cast<int>(std::popcount(bits)); }
    bool any() const { return bits != 0; }

    /// Bit 0 first, e.g. width 4 with bit 1 set -> "0100".
    std::string to_string() const {
        std::string s(static_cast<std::size_t>(width), '0');
        for (int j = 0; j < width; ++j)
            if (test(j))
                s[static_cast<std::size_t>(j)] = '1';
        return s;
    }

    static CategoryLabel from_string(const std::string& s) {
        if (s.empty() || s.size() > 64)
            fail("label string must have 1..64 characters");
        CategoryLabel label(0, static_cast<int>(s.size()));
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (s[j] == '1')
                label.set(static_cast<int>(j));
            else if (s[j] != '0')
                fail("label string must contain only 0/1");
        }
        return label;
    }

    bool operator==(const CategoryLabel& o) const {
        return bits == o.bits && width == o.width;
    }
    bool operator<(const CategoryLabel& o) const {
        return bits != o.bits ? bits < o.bits : width < o.width;
    }
};

inline double log_normal_pdf(double x, double mean, double variance) {
    double d = x - mean;
    return -0.5 * (std::log(2.0 * M_PI * variance) + d * d / variance);
}

inline double log_sum_exp(const std::vector<double>& v) {
    double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m))
        return m;
    double s = 0.0;
    for (double x : v)
        s += std::exp(x - m);
    return m + std::log(s);
}

inline double mixture_log_likelihood(const GaussianMixture& mix,
                                     const std::vector<double>& data) {
    double ll = 0.0;
    std::vector<double> terms(mix.size());
    for (double x : data) {
        for (std::size_t j = 0; j < mix.size(); ++j)
            terms[j] = std::log(mix.components[j].weight) +
                       log_normal_pdf(x, mix.components[j].mean, mix.components[j].variance);
        ll += log_sum_exp(terms);
    }
    return ll;
}

/// Posterior membership of each component at one point; sums to 1.
inline std::vector<double> responsibilities(const GaussianMixture& mix, double x) {
    std::vector<double> log_terms(mix.size());
    for (std::size_t j = 0; j < mix.size(); ++j)
        log_terms[j] = std::log(mix.components[j].weight) +
                       log_normal_pdf(x, mix.components[j].mean, mix.components[j].variance);
    double norm = log_sum_exp(log_terms);
    std::vector<double> r(mix.size());
    for (std::size_t j = 0; j < mix.size(); ++j)
        r[j] = std::exp(log_terms[j] - norm);
    return r;
}

namespace detail {

struct EmFit {
    GaussianMixture mixture;
    double log_likelihood = -std::numeric_limits<double>::infinity();
    std::vector<double> trace;  // log-likelihood after each accepted iteration
    bool valid = false;
};

/// EM from a given start. Keeps the log-likelihood non-decreasing by
/// construction: if a floor-clamped M-step would lower it (plain EM never
/// does), the previous parameters are kept and iteration stops.
inline EmFit run_em(const std::vector<double>& data, GaussianMixture mix,
                    double variance_floor) {
    const std::size_t n = data.size();
    const std::size_t k = mix.size();
    double ll = mixture_log_likelihood(mix, data);
    std::vector<double> trace{ll};
    // Flat responsibility buffer, reused across iterations; the E-step is
    // the hot path and must not allocate per point.
    std::vector<double> resp(n * k);
    std::vector<double> log_terms(k);
    for (int iter = 0; iter < kGmmMaxIterations; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j)
                log_terms[j] = std::log(mix.components[j].weight) +
                               log_normal_pdf(data[i], mix.components[j].mean,
                                              mix.components[j].variance);
            double norm = log_sum_exp(log_terms);
            for (std::size_t j = 0; j < k; ++j)
                resp[i * k + j] = std::exp(log_terms[j] - norm);
        }
        GaussianMixture next = mix;
        for (std::size_t j = 0; j < k; ++j) {
            double mass = 0.0, mean_acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mass += resp[i * k + j];
                mean_acc += resp[i * k + j] * data[i];
            }
            if (mass < 1e-10)
                return {};  // component starved; caller skips this k
            double mean = mean_acc / mass;
            double var_acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double d = data[i] - mean;
                var_acc += resp[i * k + j] * d * d;
            }
            next.components[j].weight = mass / static_cast<double>(n);
            next.components[j].mean = mean;
            next.components[j].variance = std::max(var_acc / mass, variance_floor);
        }
        double next_ll = mixture_log_likelihood(next, data);
        if (next_ll < ll - 1e-9)
            break;
        bool converged = std::abs(next_ll - ll) < kGmmTolerance;
        mix = std::move(next);
        ll = next_ll;
        trace.push_back(ll);
        if (converged)
            break;
    }
    return {std::move(mix), ll, std::move(trace), true};
}

inline GaussianMixture quantile_init(const std::vector<double>& sorted, std::size_t k,
                                     double pooled_variance, double jitter_sd, Rng& rng) {
    GaussianMixture mix;
    mix.components.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
        double q = (static_cast<double>(j) + 0.5) / static_cast<double>(k);
        auto idx = static_cast<std::size_t>(q * static_cast<double>(sorted.size()));
        idx = std::min(idx, sorted.size() - 1);
        double mean = sorted[idx];
        if (jitter_sd > 0.0)
            mean += rng.normal(0.0, jitter_sd);
        mix.components[j] = {1.0 / static_cast<double>(k), mean, pooled_variance};
    }
    return mix;
}

} // namespace detail

/// Fits a 1-D mixture by EM, choosing the component count with the lowest
/// Bayesian information criterion over k in {1..max_components}. Each k runs
/// five seeded restarts (quantile-initialized means, jittered after the
/// first) and keeps the best final log-likelihood. When `traces` is given,
/// the per-iteration log-likelihood path of every restart that converged is
/// appended to it, a diagnostic for verifying EM health externally.
inline GaussianMixture fit_gmm(const std::vector<double>& latencies, int max_components,
                               std::uint64_t seed,
                               std::vector<std::vector<double>>* traces = nullptr) {
    if (latencies.size() < 8)
        fail("fit_gmm: too few samples (" + std::to_string(latencies.size()) +
             ", need at least 8)");
    for (double x : latencies)
        if (!(x > 0.0))
            fail("fit_gmm: non-positive latency " + format_double(x));
    if (max_components < 1)
        fail("fit_gmm: max components must be >= 1");

    const auto n = static_cast<double>(latencies.size());
    double mean = std::accumulate(latencies.begin(), latencies.end(), 0.0) / n;
    double sample_variance = 0.0;
    for (double x : latencies)
        sample_variance += (x - mean) * (x - mean);
    sample_variance /= n;
    const double variance_floor = 1e-6 * (sample_variance + 1e-12);
    const double pooled_variance = std::max(sample_variance, variance_floor);
    const double jitter_base = 0.25 * std::sqrt(pooled_variance);

    std::vector<double> sorted = latencies;
    std::sort(sorted.begin(), sorted.end());

    GaussianMixture best;
    double best_bic = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= max_components && k <= static_cast<int>(latencies.size()); ++k) {
        detail::EmFit best_restart;
        for (int restart = 0; restart < kGmmRestarts; ++restart) {
            Rng rng(mix_seed(seed, static_cast<std::uint64_t>(k),
                             static_cast<std::uint64_t>(restart)));
            auto init = detail::quantile_init(sorted, static_cast<std::size_t>(k),
                                              pooled_variance,
                                              restart == 0 ? 0.0 : jitter_base, rng);
            auto fit = detail::run_em(latencies, std::move(init), variance_floor);
            if (!fit.valid)
                continue;
            if (traces != nullptr)
                traces->push_back(fit.trace);
            if (fit.log_likelihood > best_restart.log_likelihood)
                best_restart = std::move(fit);
        }
        if (!best_restart.valid)
            continue;
        double params = 3.0 * k - 1.0;
        double bic = params * std::log(n) - 2.0 * best_restart.log_likelihood;
        if (bic < best_bic) {
            best_bic = bic;
            best = std::move(best_restart.mixture);
        }
    }
    if (best.components.empty())
        fail("fit_gmm: no feasible mixture");

    std::sort(best.components.begin(), best.components.end(),
              [](const GaussianComponent& a, const GaussianComponent& b) {
                  return a.mean < b.mean;
              });
    double weight_sum = 0.0;
    for (const auto& c : best.components)
        weight_sum += c.weight;
    for (auto& c : best.components)
        c.weight /= weight_sum;
    return best;
}

/// Bit j is set iff component j's posterior responsibility at this latency
/// reaches tau; if none does, the argmax component's bit is set, so the
/// label is never empty. Components fill the lowest-index bits in
/// ascending-mean order; bits beyond the component count stay 0.
inline CategoryLabel assign_label(const GaussianMixture& mixture, double latency, int n,
                                  double tau = kDefaultTau) {
    if (mixture.components.empty())
        fail("assign_label: mixture has no components");
    if (n < static_cast<int>(mixture.size()))
        fail("assign_label: label width " + std::to_string(n) +
             " is below the component count " + std::to_string(mixture.size()));
    auto r = responsibilities(mixture, latency);
    CategoryLabel label(0, n);
    std::size_t argmax = 0;
    for (std::size_t j = 0; j < r.size(); ++j) {
        if (r[j] >= tau)
            label.set(static_cast<int>(j));
        if (r[j] > r[argmax])
            argmax = j;
    }
    if (!label.any())
        label.set(static_cast<int>(argmax));
    return label;
}

struct LatencyRecord {
    std::string query_id;
    std::string config_id;
    double latency = 0.0;
};

struct LabeledRecord {
    std::string query_id;
    std::string config_id;
    double latency = 0.0;
    CategoryLabel label;
};

struct LabelingResult {
    std::vector<LabeledRecord> records;
    std::map<std::string, GaussianMixture> mixtures;
};

/// Fits one mixture per query (sub-seeded by query id) and labels every
/// observation against its query's mixture. Record order is preserved.
inline LabelingResult label_dataset(const std::vector<LatencyRecord>& records, int n,
                                    std::uint64_t seed, double tau = kDefaultTau) {
    LabelingResult out;
    std::map<std::string, std::vector<double>> samples;
    for (const auto& rec : records)
        samples[rec.query_id].push_back(rec.latency);
    for (const auto& [query_id, latencies] : samples)
        out.mixtures[query_id] =
            fit_gmm(latencies, n, mix_seed(seed, fnv1a64(query_id)));
    out.records.reserve(records.size());
    for (const auto& rec : records) {
        out.records.push_back({rec.query_id, rec.config_id, rec.latency,
                               assign_label(out.mixtures.at(rec.query_id), rec.latency,
                                            n, tau)});
    }
    return out;
}

inline void save_label_store(const std::filesystem::path& path,
                             const std::vector<LabeledRecord>& records) {
    std::string text = "query_id,config_id,latency_seconds,label_bits\n";
    for (const auto& rec : records) {
        text += rec.query_id;
        text += ',';
        text += rec.config_id;
        text += ',';
        text += format_double(rec.latency);
        text += ',';
        text += rec.label.to_string();
        text += '\n';
    }
    write_file(path, text);
}

inline std::vector<LabeledRecord> load_label_store(const std::filesystem::path& path) {
    std::string text = read_file(path);
    std::vector<LabeledRecord> records;
    bool header = true;
    for (std::string_view line : split(text, '\n')) {
        if (line.empty())
            continue;
        if (header) {
            header = false;
            continue;
        }
        auto fields = split(line, ',');
        if (fields.size() != 4)
            fail("label store: malformed row '" + std::string(line) + "'");
        records.push_back({std::string(fields[0]), std::string(fields[1]),
                           parse_double(fields[2]),
                           CategoryLabel::from_string(std::string(fields[3]))});
    }
    return records;
}

} // namespace ktune
