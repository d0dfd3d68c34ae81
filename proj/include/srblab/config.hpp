#pragma once

// Experiment configuration: embedded defaults, a key = value file format with
// [section] headers (values are JSON literals), a plain JSON alternative,
// validation and a content hash.

#include "srblab/manifest.hpp"
#include "srblab/random.hpp"
#include "srblab/systems.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace srb {

inline nlohmann::json default_config() {
    using nlohmann::json;
    return json{
        {"system", {{"name", "cat_map"}, {"params", json::object()}}},
        {"run", {{"seeds", {1}}, {"x0", json::array()}, {"threads", 1}, {"out", "runs/latest"}}},
        {"pliss", {{"n", 10000}, {"trials", 1000}, {"gamma1", -1.0}, {"gamma2", -0.5}, {"C", 2.0}, {"epsilon", 0.1}}},
        {"orbit", {{"steps", 100000}, {"transient", 500}, {"export", false}}},
        {"domination", {{"n_max", 20}, {"level", 0}, {"frame_steps", 20000}}},
        {"noise", {{"schedule", geometric_schedule(0.0625, 0.5, 7)}}},
        {"stationary",
         {{"estimator", "ulam"},
          {"amplitude", 0.05},
          {"resolution", 32},
          {"mc_per_cell", 4096},
          {"mc_steps", 10000000},
          {"burn_in", 1000}}},
        {"blocks",
         {{"ell", 1},
          {"alpha", 0.1},
          {"depth", 40},
          {"epsilon", 0.01},
          {"ell_max", 20},
          {"sample", 2000},
          {"frame_steps", 22000},
          {"level", 0}}},
        {"gibbs",
         {{"delta", 0.16},
          {"beta", 0.02},
          {"tol_fraction", 0.125},
          {"separation", 1.0},
          {"bins", 32},
          {"frame_steps", 200000},
          {"sample_steps", 1000000},
          {"burn_in", 1000},
          {"block_ell", 1},
          {"block_alpha", 0.05},
          {"block_depth", 20},
          {"budget_radius", 0.02},
          {"budget_depth", 40},
          {"budget_points", 8},
          {"max_discarded", 0.05},
          {"min_hits", 100},
          {"tail_target", 1e-3},
          {"hypothesis_alpha", 0.1},
          {"hypothesis_epsilon", 0.1},
          {"target_level", -1}}},
        {"entropy", {{"resolution", 4}, {"n_max", 20}, {"starts", 100000}, {"samples", 10000000}, {"gap_tolerance", 0.1}}},
    };
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// '#' starts a comment unless it sits inside a string literal.
inline std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
        if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
}

inline void set_dotted(nlohmann::json& root, const std::string& section, const std::string& key,
                       const nlohmann::json& value) {
    nlohmann::json* node = &root;
    std::string path = section.empty() ? key : section + "." + key;
    std::size_t pos = 0;
    while (true) {
        const auto dot = path.find('.', pos);
        const std::string part = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (part.empty()) throw Error(ErrorKind::config, "config: empty key component in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        pos = dot + 1;
    }
}

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

// Overlays `user` on `base`; keys must exist in `base` except below
// system.params, whose keys are checked by the system constructor.
inline void overlay(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
    if (!user.is_object()) throw Error(ErrorKind::config, "config: '" + path + "' must be a table");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (key == "system.params") {
            if (!it.value().is_object()) throw Error(ErrorKind::config, "config: system.params must be a table");
            for (auto p = it.value().begin(); p != it.value().end(); ++p) {
                if (!p.value().is_number()) throw Error(ErrorKind::config, "config: system parameter '" + p.key() + "' must be a number");
                base["params"][p.key()] = p.value();
            }
            continue;
        }
        if (!base.contains(it.key())) throw Error(ErrorKind::config, "config: unknown key '" + key + "'");
        nlohmann::json& slot = base[it.key()];
        if (slot.is_object()) {
            overlay(slot, it.value(), key);
        } else {
            if (!same_kind(slot, it.value()) && !(slot.is_array() && it.value().is_array()))
                throw Error(ErrorKind::config, "config: '" + key + "' has the wrong type (expected " + slot.type_name() + ")");
            slot = it.value();
        }
    }
}

}  // namespace detail

// Parses the key = value format into a JSON tree (no defaults applied).
inline nlohmann::json parse_key_value(const std::string& text) {
    nlohmann::json out = nlohmann::json::object();
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = detail::trim(detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw Error(ErrorKind::config, "config line " + std::to_string(lineno) + ": bad section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorKind::config, "config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string raw = detail::trim(line.substr(eq + 1));
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            throw Error(ErrorKind::config, "config line " + std::to_string(lineno) + ": value '" + raw + "' is not a literal");
        }
        detail::set_dotted(out, section, key, value);
    }
    return out;
}

class ExperimentConfig {
public:
    ExperimentConfig() : values_(default_config()) {}

    static ExperimentConfig from_tree(const nlohmann::json& user) {
        ExperimentConfig c;
        detail::overlay(c.values_, user, "");
        c.validate();
        return c;
    }

    static ExperimentConfig from_text(const std::string& text, bool json_format) {
        if (!json_format) return from_tree(parse_key_value(text));
        try {
            return from_tree(nlohmann::json::parse(text));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::config, std::string("config: invalid JSON: ") + e.what());
        }
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw Error(ErrorKind::config, "config: cannot read " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        const bool json_format = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
        return from_text(ss.str(), json_format);
    }

    const nlohmann::json& tree() const { return values_; }

    template <class T>
    T get(const std::string& section, const std::string& key) const {
        return values_.at(section).at(key).get<T>();
    }

    template <class T>
    void set(const std::string& section, const std::string& key, const T& v) {
        nlohmann::json patch;
        patch[section][key] = v;
        detail::overlay(values_, patch, "");
        validate();
    }

    void set_system(const std::string& name, const std::map<std::string, double>& params = {}) {
        values_["system"]["name"] = name;
        values_["system"]["params"] = params;
        validate();
    }

    std::string system_name() const { return get<std::string>("system", "name"); }

    std::map<std::string, double> system_params() const {
        return values_.at("system").at("params").get<std::map<std::string, double>>();
    }

    SmoothSystem system() const {
        try {
            return builtin_system(system_name(), system_params());
        } catch (const Error& e) {
            throw Error(ErrorKind::config, e.what());
        }
    }

    std::vector<std::uint64_t> seeds() const { return get<std::vector<std::uint64_t>>("run", "seeds"); }
    std::uint64_t seed() const { return seeds().front(); }
    int threads() const { return get<int>("run", "threads"); }
    std::string out_dir() const { return get<std::string>("run", "out"); }
    std::vector<double> schedule() const { return get<std::vector<double>>("noise", "schedule"); }

    Vec x0() const {
        const auto v = get<std::vector<double>>("run", "x0");
        const SmoothSystem s = system();
        if (v.empty()) {
            std::vector<double> d(static_cast<std::size_t>(s.dim));
            for (int i = 0; i < s.dim; ++i) {
                const double lo = s.attractor_box.lo(i), hi = s.attractor_box.hi(i);
                d[i] = lo + (hi - lo) * (0.1 * (i + 1) + 0.05);  // off-centre, away from fixed points
            }
            return make_vec(d);
        }
        if (static_cast<int>(v.size()) != s.dim) throw Error(ErrorKind::config, "config: run.x0 has the wrong dimension");
        return make_vec(v);
    }

    // Everything except run.threads and run.out, which do not change results.
    std::string hash() const {
        nlohmann::json j = values_;
        j["run"].erase("threads");
        j["run"].erase("out");
        return sha256_hex(j.dump());
    }

    std::string dump_key_value() const {
        std::ostringstream os;
        for (auto sec = values_.begin(); sec != values_.end(); ++sec) {
            os << "[" << sec.key() << "]\n";
            for (auto it = sec.value().begin(); it != sec.value().end(); ++it) {
                if (it.value().is_object()) {
                    for (auto p = it.value().begin(); p != it.value().end(); ++p)
                        os << it.key() << "." << p.key() << " = " << p.value().dump() << "\n";
                } else {
                    os << it.key() << " = " << it.value().dump() << "\n";
                }
            }
            os << "\n";
        }
        return os.str();
    }

private:
    void validate() const {
        auto bad = [](const std::string& m) { throw Error(ErrorKind::config, "config: " + m); };
        (void)system();
        const auto s = seeds();
        if (s.empty()) bad("run.seeds must be nonempty");
        if (threads() < 1) bad("run.threads must be >= 1");
        const auto sched = schedule();
        if (sched.empty()) bad("noise.schedule must be nonempty");
        try {
            validate_schedule(sched);
        } catch (const Error& e) {
            bad(e.what());
        }
        auto positive = [&](const std::string& sec, const std::string& key) {
            if (!(values_.at(sec).at(key).get<double>() > 0)) bad(sec + "." + key + " must be positive");
        };
        for (const char* k : {"n", "trials", "C", "epsilon"}) positive("pliss", k);
        for (const char* k : {"steps"}) positive("orbit", k);
        for (const char* k : {"n_max", "frame_steps"}) positive("domination", k);
        for (const char* k : {"amplitude", "resolution", "mc_per_cell", "mc_steps"}) positive("stationary", k);
        for (const char* k : {"ell", "alpha", "depth", "epsilon", "ell_max", "sample", "frame_steps"}) positive("blocks", k);
        for (const char* k : {"delta", "beta", "tol_fraction", "separation", "bins", "frame_steps", "sample_steps",
                              "block_ell", "block_alpha", "block_depth", "budget_radius", "budget_depth",
                              "budget_points", "max_discarded", "min_hits", "tail_target", "hypothesis_alpha",
                              "hypothesis_epsilon"})
            positive("gibbs", k);
        for (const char* k : {"resolution", "n_max", "starts", "samples", "gap_tolerance"}) positive("entropy", k);
        const std::string est = get<std::string>("stationary", "estimator");
        if (est != "ulam" && est != "monte_carlo") bad("stationary.estimator must be \"ulam\" or \"monte_carlo\"");
        if (get<double>("pliss", "gamma1") >= get<double>("pliss", "gamma2")) bad("pliss.gamma1 must be < pliss.gamma2");
        if (get<double>("pliss", "C") <= std::max(0.0, get<double>("pliss", "gamma2")))
            bad("pliss.C must exceed max{0, pliss.gamma2}");
        if (get<double>("pliss", "epsilon") >= 1.0) bad("pliss.epsilon must be < 1");
        if (get<double>("blocks", "epsilon") >= 1.0 || get<double>("gibbs", "hypothesis_epsilon") >= 1.0)
            bad("block mass tolerances must be < 1");
        if (get<int>("orbit", "transient") < 0) bad("orbit.transient must be >= 0");
    }

    nlohmann::json values_;
};

}  // namespace srb
