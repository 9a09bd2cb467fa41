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
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "ktune/common.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/rng.hpp"

namespace ktune {

/// Canonical configuration identity: hash of the sorted-key JSON form, so
/// identical contents map to identical ids across runs.
inline std::uint64_t config_hash(const KnobConfiguration& config) {
    return fnv1a64(configuration_to_json(config).dump());
}

inline std::string config_id_of(const KnobConfiguration& config) {
    return "k" + hex64(config_hash(config));
}

struct EvaluationResult {
    double latency = 0.0;              // seconds
    std::optional<int> regime;         // simulator ground truth, tests only
    double wall_seconds = 0.0;
};

class EvalBackend {
public:
    virtual ~EvalBackend() = default;

    /// `repeat` varies the stochastic draw for repeated measurements of
    /// the same (config, query); repeat 0 is the tuning-loop draw.
    virtual EvaluationResult evaluate(const KnobConfiguration& config,
                                      const std::string& query_id, int repeat = 0) = 0;
    virtual bool knows_query(const std::string& query_id) const = 0;
};

struct SensitiveKnob {
    std::string knob;
    double weight = 0.0;
};

struct Regime {
    double mu = 1.0;     // latency multiplier
    double sigma = 0.0;  // draw standard deviation, seconds
};

struct SimulatorQuery {
    std::string id;
    double base = 0.0;   // seconds
    std::vector<SensitiveKnob> sensitive;
    std::vector<Regime> regimes;
    std::vector<double> thresholds;  // ascending; regime = #{t < signal}
};

struct SimulatorSpec {
    std::uint64_t seed = 0;
    std::vector<SimulatorQuery> queries;

    int max_regime_count() const {
        std::size_t m = 0;
        for (const auto& q : queries)
            m = std::max(m, q.regimes.size());
        return static_cast<int>(m);
    }

    void validate() const {
        if (queries.empty())
            fail("simulator spec: no queries");
        std::set<std::string> ids;
        for (const auto& q : queries) {
            if (!ids.insert(q.id).second)
                fail("simulator spec: duplicate query id '" + q.id + "'");
            if (!(q.base > 0.0))
                fail("simulator spec: query '" + q.id + "' base must be > 0");
            if (q.regimes.empty())
                fail("simulator spec: query '" + q.id + "' has no regimes");
            if (q.thresholds.size() + 1 != q.regimes.size())
                fail("simulator spec: query '" + q.id +
                     "' needs thresholds.size() + 1 == regimes.size()");
            if (!std::is_sorted(q.thresholds.begin(), q.thresholds.end()))
                fail("simulator spec: query '" + q.id + "' thresholds must ascend");
            std::set<double> mus;
            for (const auto& r : q.regimes) {
                if (!(r.sigma > 0.0))
                    fail("simulator spec: query '" + q.id + "' sigma must be > 0");
                if (!mus.insert(r.mu).second)
                    fail("simulator spec: query '" + q.id + "' mu multipliers must be distinct");
            }
        }
    }
};

inline json simulator_spec_to_json(const SimulatorSpec& spec) {
    json queries = json::array();
    for (const auto& q : spec.queries) {
        json sensitive = json::array();
        for (const auto& s : q.sensitive)
            sensitive.push_back(json{{"knob", s.knob}, {"weight", s.weight}});
        json regimes = json::array();
        for (const auto& r : q.regimes)
            regimes.push_back(json{{"mu", r.mu}, {"sigma", r.sigma}});
        queries.push_back(json{{"id", q.id},
                               {"base", q.base},
                               {"sensitive", std::move(sensitive)},
                               {"regimes", std::move(regimes)},
                               {"thresholds", q.thresholds}});
    }
    return json{{"version", 1}, {"seed", spec.seed}, {"queries", std::move(queries)}};
}

inline SimulatorSpec simulator_spec_from_json(const json& doc) {
    SimulatorSpec spec;
    if (!doc.contains("version"))
        fail("simulator spec: missing version");
    spec.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& q : doc.at("queries")) {
        SimulatorQuery query;
        query.id = q.at("id").get<std::string>();
        query.base = q.at("base").get<double>();
        if (q.contains("sensitive"))
            for (const auto& s : q["sensitive"])
                query.sensitive.push_back(
                    {s.at("knob").get<std::string>(), s.at("weight").get<double>()});
        for (const auto& r : q.at("regimes"))
            query.regimes.push_back(
                {r.at("mu").get<double>(), r.at("sigma").get<double>()});
        if (q.contains("thresholds"))
            query.thresholds = q["thresholds"].get<std::vector<double>>();
        spec.queries.push_back(std::move(query));
    }
    spec.validate();
    return spec;
}

inline SimulatorSpec load_simulator_spec(const std::filesystem::path& path) {
    return simulator_spec_from_json(load_json(path));
}

inline void save_simulator_spec(const std::filesystem::path& path, const SimulatorSpec& spec) {
    save_json(path, simulator_spec_to_json(spec));
}

/// Simulated DBMS with ground-truth latency regimes. A query's latency is
/// drawn from Normal(base * mu_r * (1 + signal), sigma_r^2), truncated
/// below at 0.01 * base, where signal sums the weighted normalized values
/// of the query's sensitive knobs and the regime r counts the thresholds
/// below the signal. Draws depend only on (spec seed, config content,
/// query id, repeat), so identical inputs reproduce identical latencies.
class SimulatorBackend : public EvalBackend {
public:
    SimulatorBackend(SimulatorSpec spec, KnobSpace space, double time_scale = 0.0)
        : spec_(std::move(spec)), space_(std::move(space)), time_scale_(time_scale) {
        spec_.validate();
        for (const auto& q : spec_.queries)
            for (const auto& s : q.sensitive)
                if (!space_.contains(s.knob))
                    fail("simulator spec: sensitive knob '" + s.knob +
                         "' not in the knob space");
    }

    /// Weighted sum of normalized sensitive-knob values in [0, sum of weights].
    double signal(const KnobConfiguration& config, const std::string& query_id) const {
        const SimulatorQuery& q = query(query_id);
        double s = 0.0;
        for (const auto& sk : q.sensitive)
            s += sk.weight * normalized_value(config, space_.at(sk.knob));
        return s;
    }

    /// Ground-truth regime index; exposed for tests and reports only.
    /// The tuning path never calls this.
    int regime_of(const KnobConfiguration& config, const std::string& query_id) const {
        const SimulatorQuery& q = query(query_id);
        double s = signal(config, query_id);
        int r = 0;
        for (double t : q.thresholds)
            if (t < s)
                ++r;
        return r;
    }

    EvaluationResult evaluate(const KnobConfiguration& config, const std::string& query_id,
                              int repeat = 0) override {
        const SimulatorQuery& q = query(query_id);
        double s = signal(config, query_id);
        int r = regime_of(config, query_id);
        const Regime& regime = q.regimes[static_cast<std::size_t>(r)];
        Rng rng(mix_seed(spec_.seed, config_hash(config), fnv1a64(query_id),
                         static_cast<std::uint64_t>(repeat)));
        double latency = rng.normal(q.base * regime.mu * (1.0 + s), regime.sigma);
        latency = std::max(latency, 0.01 * q.base);
        EvaluationResult result;
        result.latency = latency;
        result.regime = r;
        result.wall_seconds = latency * time_scale_;
        if (time_scale_ > 0.0)
            std::this_thread::sleep_for(
                std::chrono::duration<double>(result.wall_seconds));
        return result;
    }

    bool knows_query(const std::string& query_id) const override {
        for (const auto& q : spec_.queries)
            if (q.id == query_id)
                return true;
        return false;
    }

    const SimulatorSpec& spec() const { return spec_; }

private:
    const SimulatorQuery& query(const std::string& query_id) const {
        for (const auto& q : spec_.queries)
            if (q.id == query_id)
                return q;
        fail("simulator: unknown query '" + query_id + "'");
    }

    static double normalized_value(const KnobConfiguration& config, const KnobSpec& spec) {
        auto it = config.values.find(spec.name);
        const KnobValue& value = it == config.values.end() ? spec.default_value : it->second;
        if (spec.kind == KnobKind::Numeric) {
            double x = std::get<double>(value);
            if (spec.min == spec.max)
                return 0.0;
            return (x - spec.min) / (spec.max - spec.min);
        }
        int idx = spec.level_index(std::get<std::string>(value));
        if (idx < 0)
            fail("simulator: unknown level for knob '" + spec.name + "'");
        auto levels = static_cast<double>(spec.levels.size());
        return levels > 1.0 ? static_cast<double>(idx) / (levels - 1.0) : 0.0;
    }

    SimulatorSpec spec_;
    KnobSpace space_;
    double time_scale_;
};

/// Bridges a real system: runs `<command> --config <file> --query <id>`
/// and parses `latency_seconds=<decimal>` from the last line that carries
/// it. Invocations are serialized by the caller; real evaluations
/// interfere with each other.
class ExternalCommandBackend : public EvalBackend {
public:
    explicit ExternalCommandBackend(std::string command) : command_(std::move(command)) {
        if (command_.empty())
            fail("external backend: empty command");
    }

    EvaluationResult evaluate(const KnobConfiguration& config, const std::string& query_id,
                              int repeat = 0) override {
        (void)repeat;  // a real system varies on its own
        for (char c : query_id)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ||
                  c == '.'))
                fail("external backend: query id '" + query_id +
                     "' has characters unsafe for a command line");
        auto config_path = std::filesystem::temp_directory_path() /
                           ("ktune_config_" + std::to_string(getpid()) + "_" +
                            std::to_string(invocation_++) + ".json");
        save_json(config_path, configuration_to_json(config));
        std::string cmd =
            command_ + " --config '" + config_path.string() + "' --query " + query_id +
            " 2>&1";
        auto start = std::chrono::steady_clock::now();
        FILE* pipe = popen(cmd.c_str(), "r");
        if (!pipe) {
            std::filesystem::remove(config_path);
            fail("external backend: failed to start '" + command_ + "'");
        }
        std::string output;
        char buffer[4096];
        while (std::size_t got = fread(buffer, 1, sizeof buffer, pipe))
            output.append(buffer, got);
        int status = pclose(pipe);
        std::filesystem::remove(config_path);
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                          .count();
        if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
            fail("external backend: command exited with status " + std::to_string(status) +
                 " for query '" + query_id + "'");
        EvaluationResult result;
        result.latency = parse_latency(output, query_id);
        result.wall_seconds = wall;
        return result;
    }

    bool knows_query(const std::string&) const override { return true; }

private:
    static double parse_latency(const std::string& output, const std::string& query_id) {
        constexpr std::string_view kKey = "latency_seconds=";
        std::optional<double> latency;
        for (std::string_view line : split(output, '\n')) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
                line.remove_suffix(1);
            if (line.substr(0, kKey.size()) == kKey) {
                double v = parse_double(line.substr(kKey.size()));
                if (!(v > 0.0))
                    fail("external backend: non-positive latency for query '" + query_id +
                         "'");
                latency = v;
            }
        }
        if (!latency)
            fail("external backend: no latency_seconds=<decimal> line for query '" +
                 query_id + "'");
        return *latency;
    }

    std::string command_;
    std::uint64_t invocation_ = 0;
};

struct WorkloadEvaluation {
    double total = 0.0;
    std::vector<std::pair<std::string, EvaluationResult>> per_query;
};

/// Sum of per-query latencies under one configuration; per-query results
/// are kept for labeling.
inline WorkloadEvaluation evaluate_workload(EvalBackend& backend,
                                            const KnobConfiguration& config,
                                            const std::vector<std::string>& query_ids,
                                            int repeat = 0) {
    WorkloadEvaluation out;
    for (const auto& q : query_ids) {
        if (!backend.knows_query(q))
            fail("evaluate_workload: unknown query '" + q + "'");
        EvaluationResult r = backend.evaluate(config, q, repeat);
        out.total += r.latency;
        out.per_query.emplace_back(q, r);
    }
    return out;
}

/// Synthetic task spec: each query reacts to 1-3 sensitive knobs with
/// small weights and switches between 2-3 latency regimes at thresholds
/// spaced across the reachable signal range. Noise is a few percent of
/// the regime mean so regimes stay separable.
inline SimulatorSpec generate_simulator_spec(const KnobSpace& space, std::uint64_t seed,
                                             int query_count, int min_regimes = 2,
                                             int max_regimes = 3) {
    if (query_count < 1)
        fail("generate_simulator_spec: query count must be >= 1");
    if (min_regimes < 1 || max_regimes < min_regimes)
        fail("generate_simulator_spec: invalid regime range");
    if (space.empty())
        fail("generate_simulator_spec: empty knob space");
    SimulatorSpec spec;
    spec.seed = seed;
    for (int qi = 0; qi < query_count; ++qi) {
        Rng rng(mix_seed(seed, 0x73696D71ULL, static_cast<std::uint64_t>(qi)));
        SimulatorQuery q;
        q.id = "q" + std::to_string(qi);
        q.base = rng.uniform(0.05, 0.5);
        auto knob_order = rng.permutation(space.size());
        auto sensitive_count =
            std::min<std::size_t>(1 + rng.bounded(3), space.size());
        double weight_sum = 0.0;
        for (std::size_t s = 0; s < sensitive_count; ++s) {
            double w = rng.uniform(0.015, 0.04);
            q.sensitive.push_back({space.knobs()[knob_order[s]].name, w});
            weight_sum += w;
        }
        int regimes = min_regimes + static_cast<int>(rng.bounded(
                                        static_cast<std::uint64_t>(max_regimes - min_regimes + 1)));
        double mu = 1.0;
        for (int r = 0; r < regimes; ++r) {
            double sigma = q.base * mu * rng.uniform(0.01, 0.03);
            q.regimes.push_back({mu, sigma});
            mu *= rng.uniform(1.5, 1.9);
        }
        for (int t = 1; t < regimes; ++t)
            q.thresholds.push_back(weight_sum * static_cast<double>(t) /
                                   static_cast<double>(regimes));
        spec.queries.push_back(std::move(q));
    }
    spec.validate();
    return spec;
}

} // namespace ktune
