#pragma once

// Run configuration: one JSON tree with every default embedded, strict field
// checking, and lossless JSON round-trips for emitted structures.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "particle.hpp"
#include "timechange.hpp"
#include "validate.hpp"

namespace mfblowup {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SolverConfig {
    double delta_sigma = 1e-3;
    double horizon = 70.0;
    double pi_tolerance = 1e-10;
    double epsilon_cap = 0.05;
};

struct ParticleConfig {
    std::uint64_t N = 1000;
    double dt = 1e-4;
    double t_max = 4.0;
    std::uint64_t seed = 1;
    double window = 0.0; // 0: one time step
    double min_fraction = 0.1;
    double bin = 1e-3;
};

struct OutputConfig {
    std::string directory = "out";
    std::vector<std::string> formats{"csv", "json"};
    bool wants(const std::string& f) const { return std::find(formats.begin(), formats.end(), f) != formats.end(); }
};

struct RunConfig {
    ModelParams model;
    double initial_mass = 1.0; // q0 = m delta_Lambda
    SolverConfig solver;
    ParticleConfig particle;
    OutputConfig output;
    std::vector<double> epsilons{0.02, 0.01, 0.005, 0.0};

    SolverOptions solver_options() const
    {
        SolverOptions o;
        o.delta_sigma = solver.delta_sigma;
        o.horizon = solver.horizon;
        o.pi_tolerance = solver.pi_tolerance;
        return o;
    }
    double sync_window() const { return particle.window > 0.0 ? particle.window : particle.dt; }
};

// ---------------------------------------------------------------- to JSON

inline nlohmann::json to_json(const RunConfig& c)
{
    return {
        {"model", to_json(c.model)},
        {"initial_mass", c.initial_mass},
        {"solver",
         {{"delta_sigma", c.solver.delta_sigma}, {"horizon", c.solver.horizon}, {"pi_tolerance", c.solver.pi_tolerance},
          {"epsilon_cap", c.solver.epsilon_cap}}},
        {"particle",
         {{"N", c.particle.N}, {"dt", c.particle.dt}, {"t_max", c.particle.t_max}, {"seed", c.particle.seed},
          {"window", c.particle.window}, {"min_fraction", c.particle.min_fraction}, {"bin", c.particle.bin}}},
        {"output", {{"directory", c.output.directory}, {"formats", c.output.formats}}},
        {"epsilons", c.epsilons},
    };
}

inline nlohmann::json to_json(const BlowupEpisode& e)
{
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"S", e.S}, {"U", e.U}, {"R", num(e.R)}, {"pi", e.pi}, {"T", e.T}, {"dg_at_S", e.dg_at_S},
            {"exit_mass", num(e.exit_mass)}};
}

inline BlowupEpisode episode_from_json(const nlohmann::json& j)
{
    auto num = [&](const char* k) {
        return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
    };
    BlowupEpisode e;
    e.S = j.at("S").get<double>();
    e.U = j.at("U").get<double>();
    e.R = num("R");
    e.pi = j.at("pi").get<double>();
    e.T = j.at("T").get<double>();
    e.dg_at_S = j.at("dg_at_S").get<double>();
    e.exit_mass = num("exit_mass");
    return e;
}

inline ModelParams model_from_json(const nlohmann::json& j)
{
    ModelParams p;
    p.lambda_reset = j.at("lambda_reset").get<double>();
    p.nu = j.at("nu").get<double>();
    p.coupling = j.at("coupling").get<double>();
    p.epsilon = j.at("epsilon").get<double>();
    return p;
}

inline EpsilonSweepReport sweep_from_json(const nlohmann::json& a)
{
    EpsilonSweepReport r;
    for (const auto& row : a) {
        r.epsilons.push_back(row.at("epsilon").get<double>());
        r.T1.push_back(row.at("T1").get<double>());
        r.pi1.push_back(row.at("pi1").get<double>());
        r.sup_dev.push_back(row.at("sup_dev").get<double>());
    }
    r.sup_dev_monotone = nonincreasing_with_slack(r.sup_dev, 0.10);
    return r;
}

inline nlohmann::json to_json(const SyncSummary& s, double peak_frequency, std::size_t spikes)
{
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"events", s.events}, {"mean_interval", num(s.mean_interval)}, {"mean_event_size", num(s.mean_size)},
            {"event_size_sd", num(s.size_sd)}, {"peak_frequency", peak_frequency}, {"spikes", spikes}};
}

// ---------------------------------------------------------------- parsing

namespace detail {

inline std::string line_col(const std::string& text, std::size_t byte)
{
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

struct Reader {
    const nlohmann::json& j;
    std::string path;

    void only(std::initializer_list<const char*> keys) const
    {
        if (!j.is_object()) throw ConfigError("field " + path + ": expected an object");
        std::set<std::string> ok(keys.begin(), keys.end());
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!ok.count(it.key())) throw ConfigError("unknown field " + path + (path.empty() ? "" : ".") + it.key());
    }
    std::string name(const char* k) const { return path.empty() ? std::string(k) : path + "." + k; }

    void number(const char* k, double& out) const
    {
        if (!j.contains(k)) return;
        if (!j[k].is_number()) throw ConfigError("field " + name(k) + ": expected a number");
        out = j[k].get<double>();
    }
    void integer(const char* k, std::uint64_t& out) const
    {
        if (!j.contains(k)) return;
        if (!j[k].is_number_integer() || j[k].get<std::int64_t>() < 0)
            throw ConfigError("field " + name(k) + ": expected a non-negative integer");
        out = j[k].get<std::uint64_t>();
    }
    void string(const char* k, std::string& out) const
    {
        if (!j.contains(k)) return;
        if (!j[k].is_string()) throw ConfigError("field " + name(k) + ": expected a string");
        out = j[k].get<std::string>();
    }
    Reader sub(const char* k) const { return Reader{j[k], name(k)}; }
};

} // namespace detail

inline void validate(const RunConfig& c)
{
    auto positive = [](double v, const char* f) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("field " + std::string(f) + ": must be > 0");
    };
    positive(c.model.lambda_reset, "model.lambda_reset");
    positive(c.model.nu, "model.nu");
    positive(c.model.coupling, "model.coupling");
    if (!(c.model.epsilon >= 0.0)) throw ConfigError("field model.epsilon: must be >= 0");
    positive(c.solver.epsilon_cap, "solver.epsilon_cap");
    if (c.model.epsilon > c.solver.epsilon_cap)
        throw ConfigError("field model.epsilon: exceeds solver.epsilon_cap");
    if (!(c.initial_mass > 0.0 && c.initial_mass <= 1.0)) throw ConfigError("field initial_mass: must be in (0, 1]");
    positive(c.solver.delta_sigma, "solver.delta_sigma");
    positive(c.solver.horizon, "solver.horizon");
    positive(c.solver.pi_tolerance, "solver.pi_tolerance");
    if (c.particle.N < 2) throw ConfigError("field particle.N: must be >= 2");
    positive(c.particle.dt, "particle.dt");
    positive(c.particle.t_max, "particle.t_max");
    if (c.particle.window < 0.0) throw ConfigError("field particle.window: must be >= 0");
    if (!(c.particle.min_fraction > 0.0 && c.particle.min_fraction <= 1.0))
        throw ConfigError("field particle.min_fraction: must be in (0, 1]");
    positive(c.particle.bin, "particle.bin");
    if (c.output.directory.empty()) throw ConfigError("field output.directory: must not be empty");
    for (const auto& f : c.output.formats)
        if (f != "csv" && f != "json") throw ConfigError("field output.formats: unknown format '" + f + "'");
    for (double e : c.epsilons)
        if (!(e >= 0.0) || e > c.solver.epsilon_cap) throw ConfigError("field epsilons: values must lie in [0, epsilon_cap]");
}

inline RunConfig config_from_json(const nlohmann::json& root)
{
    RunConfig c;
    detail::Reader r{root, ""};
    r.only({"model", "initial_mass", "solver", "particle", "output", "epsilons"});
    if (root.contains("model")) {
        auto m = r.sub("model");
        m.only({"lambda_reset", "nu", "coupling", "epsilon"});
        m.number("lambda_reset", c.model.lambda_reset);
        m.number("nu", c.model.nu);
        m.number("coupling", c.model.coupling);
        m.number("epsilon", c.model.epsilon);
    }
    r.number("initial_mass", c.initial_mass);
    if (root.contains("solver")) {
        auto s = r.sub("solver");
        s.only({"delta_sigma", "horizon", "pi_tolerance", "epsilon_cap"});
        s.number("delta_sigma", c.solver.delta_sigma);
        s.number("horizon", c.solver.horizon);
        s.number("pi_tolerance", c.solver.pi_tolerance);
        s.number("epsilon_cap", c.solver.epsilon_cap);
    }
    if (root.contains("particle")) {
        auto p = r.sub("particle");
        p.only({"N", "dt", "t_max", "seed", "window", "min_fraction", "bin"});
        p.integer("N", c.particle.N);
        p.number("dt", c.particle.dt);
        p.number("t_max", c.particle.t_max);
        p.integer("seed", c.particle.seed);
        p.number("window", c.particle.window);
        p.number("min_fraction", c.particle.min_fraction);
        p.number("bin", c.particle.bin);
    }
    if (root.contains("output")) {
        auto o = r.sub("output");
        o.only({"directory", "formats"});
        o.string("directory", c.output.directory);
        if (root["output"].contains("formats")) {
            const auto& f = root["output"]["formats"];
            if (!f.is_array()) throw ConfigError("field output.formats: expected an array of strings");
            c.output.formats.clear();
            for (const auto& x : f) {
                if (!x.is_string()) throw ConfigError("field output.formats: expected an array of strings");
                c.output.formats.push_back(x.get<std::string>());
            }
        }
    }
    if (root.contains("epsilons")) {
        const auto& e = root["epsilons"];
        if (!e.is_array()) throw ConfigError("field epsilons: expected an array of numbers");
        c.epsilons.clear();
        for (const auto& x : e) {
            if (!x.is_number()) throw ConfigError("field epsilons: expected an array of numbers");
            c.epsilons.push_back(x.get<double>());
        }
    }
    validate(c);
    return c;
}

inline RunConfig parse_config(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config parse error at " + detail::line_col(text, e.byte > 0 ? e.byte - 1 : 0) + ": " + e.what());
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace mfblowup
