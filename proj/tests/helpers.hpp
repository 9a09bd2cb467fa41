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

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ktune/eval_backend.hpp"
#include "ktune/knob_space.hpp"
#include "ktune/orchestrator.hpp"
#include "ktune/plan_graph.hpp"

namespace ktune::testing {

/// Captures warnings for the lifetime of the object, then restores the
/// previous handler.
struct WarnCapture {
    std::vector<std::string> messages;
    std::function<void(const std::string&)> saved;
    WarnCapture() : saved(warn_handler()) {
        warn_handler() = [this](const std::string& msg) { messages.push_back(msg); };
    }
    ~WarnCapture() { warn_handler() = saved; }
    WarnCapture(const WarnCapture&) = delete;
    WarnCapture& operator=(const WarnCapture&) = delete;
};

/// Mixed numeric/categorical space used across the suite.
inline KnobSpace make_space() {
    std::vector<KnobSpec> specs;
    KnobSpec buffer;
    buffer.name = "buffer_mb";
    buffer.kind = KnobKind::Numeric;
    buffer.min = 64.0;
    buffer.max = 4096.0;
    buffer.default_value = KnobValue{128.0};
    specs.push_back(buffer);
    KnobSpec workers;
    workers.name = "workers";
    workers.kind = KnobKind::Numeric;
    workers.min = 1.0;
    workers.max = 16.0;
    workers.default_value = KnobValue{4.0};
    specs.push_back(workers);
    KnobSpec io;
    io.name = "io_mode";
    io.kind = KnobKind::Categorical;
    io.levels = {"sync", "async", "direct"};
    io.default_value = KnobValue{std::string("sync")};
    specs.push_back(io);
    return KnobSpace(specs);
}

/// All-numeric space for tuner and regression fixtures.
inline KnobSpace make_numeric_space(int dims, double lo = 0.0, double hi = 1.0) {
    std::vector<KnobSpec> specs;
    for (int i = 0; i < dims; ++i) {
        KnobSpec s;
        s.name = "x" + std::to_string(i);
        s.kind = KnobKind::Numeric;
        s.min = lo;
        s.max = hi;
        s.default_value = KnobValue{lo};
        specs.push_back(s);
    }
    return KnobSpace(specs);
}

/// Label predictor that reads the true latency regime out of the
/// simulator signal, so skip behaviour can be tested without a trained
/// classifier. Bit r of the label marks regime r.
class OracleLabelPredictor final : public LabelPredictor {
  public:
    OracleLabelPredictor(SimulatorSpec spec, KnobSpace space, int n)
        : spec_(std::move(spec)), space_(std::move(space)), n_(n) {}

    CategoryLabel predict_label(const std::string& query_id,
                                const KnobEncoding& encoding) override {
        const SimulatorQuery* query = nullptr;
        for (const auto& q : spec_.queries)
            if (q.id == query_id) query = &q;
        if (query == nullptr)
            fail("oracle predictor: unknown query '" + query_id + "'");
        double signal = signal_from_encoding(*query, encoding);
        int regime = 0;
        for (double t : query->thresholds)
            if (t < signal) ++regime;
        CategoryLabel label(0, n_);
        label.set(regime);
        return label;
    }

  private:
    double signal_from_encoding(const SimulatorQuery& query,
                                const KnobEncoding& encoding) const {
        auto offsets = space_.segment_offsets();
        double signal = 0.0;
        for (const auto& s : query.sensitive) {
            std::size_t idx = space_.index_of(s.knob);
            const KnobSpec& spec = space_.knobs()[idx];
            auto off = static_cast<Eigen::Index>(offsets[idx]);
            if (spec.kind == KnobKind::Numeric) {
                signal += s.weight * encoding[off];
            } else {
                std::size_t levels = spec.levels.size();
                if (levels <= 1) continue;
                std::size_t chosen = 0;
                for (std::size_t l = 0; l < levels; ++l)
                    if (encoding[off + static_cast<Eigen::Index>(l)] > 0.5) chosen = l;
                signal += s.weight * static_cast<double>(chosen) /
                          static_cast<double>(levels - 1);
            }
        }
        return signal;
    }

    SimulatorSpec spec_;
    KnobSpace space_;
    int n_;
};

/// Backend with scripted latencies: base + query index + repeat * step.
/// Deterministic, config independent, records every call.
class ScriptedBackend final : public EvalBackend {
  public:
    ScriptedBackend(std::vector<std::string> query_ids, double base, double step)
        : query_ids_(std::move(query_ids)), base_(base), step_(step) {}

    EvaluationResult evaluate(const KnobConfiguration& config, const std::string& query_id,
                              int repeat = 0) override {
        (void)config;
        std::size_t qi = 0;
        for (; qi < query_ids_.size(); ++qi)
            if (query_ids_[qi] == query_id) break;
        if (qi == query_ids_.size())
            fail("scripted backend: unknown query '" + query_id + "'");
        ++calls_;
        EvaluationResult res;
        res.latency = base_ + static_cast<double>(qi) + step_ * repeat;
        res.wall_seconds = 0.0;
        return res;
    }

    bool knows_query(const std::string& query_id) const override {
        for (const auto& id : query_ids_)
            if (id == query_id) return true;
        return false;
    }

    int calls() const { return calls_; }

  private:
    std::vector<std::string> query_ids_;
    double base_ = 0.0;
    double step_ = 0.0;
    int calls_ = 0;
};

/// Fresh scratch directory under the system temp root.
inline std::filesystem::path make_temp_dir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path() /
                ("ktune_test_" + tag + "_XXXXXX");
    std::string tmpl = base.string();
    if (::mkdtemp(tmpl.data()) == nullptr)
        fail("mkdtemp failed for " + tmpl);
    return std::filesystem::path(tmpl);
}

} // namespace ktune::testing
