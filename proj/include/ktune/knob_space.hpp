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
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "ktune/common.hpp"

namespace ktune {

enum class KnobKind { Numeric, Categorical };

/// A knob value: a real for numeric knobs, a level name for categorical ones.
using KnobValue = std::variant<double, std::string>;

/// One tunable parameter. Numeric knobs carry [min, max] bounds,
/// categorical knobs an ordered, duplicate-free level list.
struct KnobSpec {
    std::string name;
    KnobKind kind = KnobKind::Numeric;
    double min = 0.0;
    double max = 0.0;
    std::vector<std::string> levels;
    KnobValue default_value;

    /// Width of this knob's segment in the encoded vector:
    /// 1 for numeric, |levels| for categorical one-hot.
    std::size_t encoding_width() const {
        return kind == KnobKind::Numeric ? 1 : levels.size();
    }

    int level_index(const std::string& level) const {
        auto it = std::find(levels.begin(), levels.end(), level);
        return it == levels.end() ? -1 : static_cast<int>(it - levels.begin());
    }

    void validate() const {
        if (name.empty())
            fail("knob with empty name");
        if (kind == KnobKind::Numeric) {
            if (!(min <= max))
                fail("knob '" + name + "': min > max");
            if (!std::holds_alternative<double>(default_value))
                fail("knob '" + name + "': numeric default required");
            double d = std::get<double>(default_value);
            if (d < min || d > max)
                fail("knob '" + name + "': default outside [min, max]");
        } else {
            if (levels.empty())
                fail("knob '" + name + "': categorical knob needs levels");
            std::set<std::string> seen(levels.begin(), levels.end());
            if (seen.size() != levels.size())
                fail("knob '" + name + "': duplicate level");
            if (!std::holds_alternative<std::string>(default_value))
                fail("knob '" + name + "': categorical default required");
            if (level_index(std::get<std::string>(default_value)) < 0)
                fail("knob '" + name + "': default is not a listed level");
        }
    }

    bool operator==(const KnobSpec& other) const {
        if (name != other.name || kind != other.kind)
            return false;
        if (kind == KnobKind::Numeric)
            return min == other.min && max == other.max &&
                   default_value == other.default_value;
        return levels == other.levels && default_value == other.default_value;
    }
};

/// One point in knob space: knob name -> value. Knobs absent from the
/// mapping fall back to their spec default when encoded.
struct KnobConfiguration {
    std::map<std::string, KnobValue> values;

    bool operator==(const KnobConfiguration& other) const {
        return values == other.values;
    }
};

/// Fixed-length, [0,1]-bounded encoding of one configuration.
using KnobEncoding = Eigen::VectorXd;

/// The ordered tunable space. Order is fixed at construction and defines
/// the encoding layout, so two spaces with the same specs in the same
/// order encode identically.
class KnobSpace {
public:
    KnobSpace() = default;

    explicit KnobSpace(std::vector<KnobSpec> knobs) : knobs_(std::move(knobs)) {
        for (std::size_t i = 0; i < knobs_.size(); ++i) {
            knobs_[i].validate();
            if (!index_.emplace(knobs_[i].name, i).second)
                fail("duplicate knob name '" + knobs_[i].name + "'");
        }
    }

    const std::vector<KnobSpec>& knobs() const { return knobs_; }
    std::size_t size() const { return knobs_.size(); }
    bool empty() const { return knobs_.empty(); }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const KnobSpec& at(const std::string& name) const {
        return knobs_[index_of(name)];
    }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            fail("unknown knob '" + name + "'");
        return it->second;
    }

    std::size_t encoding_width() const {
        std::size_t w = 0;
        for (const auto& k : knobs_)
            w += k.encoding_width();
        return w;
    }

    /// Start offset of each knob's segment in the encoded vector,
    /// in space order.
    std::vector<std::size_t> segment_offsets() const {
        std::vector<std::size_t> offsets;
        offsets.reserve(knobs_.size());
        std::size_t off = 0;
        for (const auto& k : knobs_) {
            offsets.push_back(off);
            off += k.encoding_width();
        }
        return offsets;
    }

    KnobConfiguration default_configuration() const {
        KnobConfiguration config;
        for (const auto& k : knobs_)
            config.values[k.name] = k.default_value;
        return config;
    }

    bool operator==(const KnobSpace& other) const { return knobs_ == other.knobs_; }

private:
    std::vector<KnobSpec> knobs_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void encode_knob(const KnobSpec& spec, const KnobValue& value,
                        double* segment) {
    if (spec.kind == KnobKind::Numeric) {
        if (!std::holds_alternative<double>(value))
            fail("knob '" + spec.name + "': expected a numeric value");
        double x = std::get<double>(value);
        if (x < spec.min || x > spec.max)
            fail("knob '" + spec.name + "': value " + format_double(x) +
                 " outside [" + format_double(spec.min) + ", " +
                 format_double(spec.max) + "]");
        if (spec.min == spec.max) {
            // Constant knob carries no information; encode as 0.
            warn("knob '" + spec.name + "' has min == max; encoding as 0");
            segment[0] = 0.0;
        } else {
            segment[0] = (x - spec.min) / (spec.max - spec.min);
        }
    } else {
        if (!std::holds_alternative<std::string>(value))
            fail("knob '" + spec.name + "': expected a level name");
        const std::string& level = std::get<std::string>(value);
        for (std::size_t i = 0; i < spec.levels.size(); ++i)
            segment[i] = 0.0;
        int idx = spec.level_index(level);
        if (idx < 0) {
            // Unknown level can appear when transferring across tasks;
            // an all-zero segment keeps the run alive.
            warn("knob '" + spec.name + "': unknown level '" + level +
                 "', encoding all-zero segment");
        } else {
            segment[static_cast<std::size_t>(idx)] = 1.0;
        }
    }
}

} // namespace detail

/// Max-min normalization for numeric knobs, one-hot for categorical ones,
/// segments concatenated in space order. Knobs missing from the
/// configuration take their default's encoding (union-space projection).
inline KnobEncoding encode_configuration(const KnobSpace& space,
                                         const KnobConfiguration& config) {
    for (const auto& [name, value] : config.values) {
        (void)value;
        if (!space.contains(name))
            fail("unknown knob '" + name + "' in configuration");
    }
    KnobEncoding out = KnobEncoding::Zero(static_cast<Eigen::Index>(space.encoding_width()));
    std::size_t off = 0;
    for (const auto& spec : space.knobs()) {
        auto it = config.values.find(spec.name);
        const KnobValue& value =
            it == config.values.end() ? spec.default_value : it->second;
        detail::encode_knob(spec, value, out.data() + off);
        off += spec.encoding_width();
    }
    return out;
}

/// Deduplicated union of several spaces, first-seen order preserved.
/// Same-named knobs must agree exactly across inputs.
inline KnobSpace union_space(const std::vector<KnobSpace>& spaces) {
    std::vector<KnobSpec> merged;
    std::map<std::string, std::size_t> seen;
    for (const auto& space : spaces) {
        for (const auto& spec : space.knobs()) {
            auto it = seen.find(spec.name);
            if (it == seen.end()) {
                seen.emplace(spec.name, merged.size());
                merged.push_back(spec);
            } else if (!(merged[it->second] == spec)) {
                fail("knob '" + spec.name + "' has conflicting specs in union");
            }
        }
    }
    return KnobSpace(std::move(merged));
}

inline json knob_value_to_json(const KnobValue& value) {
    if (std::holds_alternative<double>(value))
        return std::get<double>(value);
    return std::get<std::string>(value);
}

inline KnobValue knob_value_from_json(const json& j) {
    if (j.is_number())
        return j.get<double>();
    if (j.is_string())
        return j.get<std::string>();
    fail("knob value must be a number or a string");
}

inline json knob_space_to_json(const KnobSpace& space) {
    json knobs = json::array();
    for (const auto& spec : space.knobs()) {
        json k;
        k["name"] = spec.name;
        k["kind"] = spec.kind == KnobKind::Numeric ? "numeric" : "categorical";
        if (spec.kind == KnobKind::Numeric) {
            k["min"] = spec.min;
            k["max"] = spec.max;
        } else {
            k["levels"] = spec.levels;
        }
        k["default"] = knob_value_to_json(spec.default_value);
        knobs.push_back(std::move(k));
    }
    return json{{"version", 1}, {"knobs", std::move(knobs)}};
}

inline KnobSpace knob_space_from_json(const json& doc) {
    if (!doc.contains("version"))
        fail("knob space file: missing 'version'");
    if (!doc.contains("knobs") || !doc["knobs"].is_array())
        fail("knob space file: missing 'knobs' array");
    std::vector<KnobSpec> specs;
    for (const auto& k : doc["knobs"]) {
        KnobSpec spec;
        spec.name = k.at("name").get<std::string>();
        std::string kind = k.at("kind").get<std::string>();
        if (kind == "numeric") {
            spec.kind = KnobKind::Numeric;
            spec.min = k.at("min").get<double>();
            spec.max = k.at("max").get<double>();
        } else if (kind == "categorical") {
            spec.kind = KnobKind::Categorical;
            spec.levels = k.at("levels").get<std::vector<std::string>>();
        } else {
            fail("knob '" + spec.name + "': unknown kind '" + kind + "'");
        }
        spec.default_value = knob_value_from_json(k.at("default"));
        specs.push_back(std::move(spec));
    }
    return KnobSpace(std::move(specs));
}

inline KnobSpace load_knob_space(const std::filesystem::path& path) {
    return knob_space_from_json(load_json(path));
}

inline void save_knob_space(const std::filesystem::path& path, const KnobSpace& space) {
    save_json(path, knob_space_to_json(space));
}

inline json configuration_to_json(const KnobConfiguration& config) {
    json j = json::object();
    for (const auto& [name, value] : config.values)
        j[name] = knob_value_to_json(value);
    return j;
}

inline KnobConfiguration configuration_from_json(const json& j) {
    KnobConfiguration config;
    for (auto it = j.begin(); it != j.end(); ++it)
        config.values[it.key()] = knob_value_from_json(it.value());
    return config;
}

} // namespace ktune
