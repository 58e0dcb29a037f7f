#pragma once

// Command-line front end: solve | simulate | compare | verify.
// Exit codes: 0 success, 2 config error, 3 solver diagnostic, 4 I/O failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "config.hpp"
#include "particle.hpp"
#include "timechange.hpp"
#include "validate.hpp"

namespace mfblowup {

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_solver = 3, exit_io = 4 };

namespace detail {

inline std::filesystem::path prepare_dir(const std::string& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
    return dir;
}

template <class Write>
void write_file(const std::filesystem::path& p, Write&& w)
{
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
    w(os);
    os.flush();
    if (!os) throw IoError("write failed for '" + p.string() + "'");
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j)
{
    write_file(p, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

inline std::string g17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline NaturalInitialCondition default_ic(const RunConfig& c, double epsilon)
{
    ResetAgeMeasure mu;
    mu.atoms.push_back({c.initial_mass, 0.0});
    return construct_natural_ic(mu, epsilon, c.model.nu, c.model.coupling, c.model.lambda_reset);
}

inline TimeChange solve_meanfield(const RunConfig& c)
{
    const auto ic = default_ic(c, c.model.epsilon);
    if (c.model.epsilon > 0.0) return solve_global_dpmf(c.model, ic, c.solver_options());
    return solve_global_pmf(c.model, ic, 0, c.solver_options()).tc;
}

inline nlohmann::json episodes_json(const RunConfig& c, const TimeChange& tc)
{
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : tc.episodes) eps.push_back(to_json(e));
    return {{"params", to_json(c.model)}, {"delta_sigma", tc.step}, {"horizon", tc.horizon()}, {"episodes", eps}};
}

struct MeanFieldStats {
    double period = std::numeric_limits<double>::quiet_NaN();
    double pi = std::numeric_limits<double>::quiet_NaN();
};

inline MeanFieldStats meanfield_stats(const TimeChange& tc)
{
    MeanFieldStats s;
    if (tc.episodes.empty()) return s;
    double pis = 0.0;
    for (const auto& e : tc.episodes) pis += e.pi;
    s.pi = pis / static_cast<double>(tc.episodes.size());
    // first gap measured from t = 0, when the initial condition was reset
    s.period = tc.episodes.size() >= 2
        ? (tc.episodes.back().T - tc.episodes.front().T) / static_cast<double>(tc.episodes.size() - 1)
        : tc.episodes.front().T;
    return s;
}

} // namespace detail

inline int cmd_solve(const RunConfig& c, std::ostream& log)
{
    const auto dir = detail::prepare_dir(c.output.directory);
    const TimeChange tc = detail::solve_meanfield(c);
    if (c.output.wants("json")) detail::write_json(dir / "episodes.json", detail::episodes_json(c, tc));
    if (c.output.wants("csv")) {
        detail::write_file(dir / "psi.csv", [&](std::ostream& os) {
            os << "sigma,Psi\n";
            for (std::size_t k = 0; k < tc.Psi.size(); ++k) os << detail::g17(tc.sigma(k)) << ',' << detail::g17(tc.Psi[k]) << '\n';
        });
        detail::write_file(dir / "flux.csv", [&](std::ostream& os) {
            os << "sigma,G,g,dg\n";
            const auto& f = tc.flux;
            for (std::size_t k = 0; k < f.size(); ++k)
                os << detail::g17(f.sigma(k)) << ',' << detail::g17(f.G[k]) << ',' << detail::g17(f.g[k]) << ','
                   << detail::g17(f.dg[k]) << '\n';
        });
    }
    log << "solve: " << tc.episodes.size() << " blowup episode(s) up to sigma = " << tc.horizon() << '\n';
    for (const auto& e : tc.episodes)
        log << "  S=" << e.S << " U=" << e.U << " R=" << e.R << " pi=" << e.pi << " T=" << e.T << '\n';
    return exit_ok;
}

inline int cmd_simulate(const RunConfig& c, std::ostream& log)
{
    const auto dir = detail::prepare_dir(c.output.directory);
    const auto& pc = c.particle;
    const SpikeRaster r = simulate(c.model, pc.N, pc.t_max, pc.dt, pc.seed);
    std::vector<SyncEvent> ev;
    if (!r.events.empty()) ev = detect_sync_events(r, c.sync_window(), pc.min_fraction);
    const SyncSummary s = summarize_sync(ev);
    Spectrum sp;
    const bool have_spectrum = pc.t_max / pc.bin >= 256.0;
    if (have_spectrum) sp = spectral_density(r, pc.bin);
    if (c.output.wants("csv")) {
        detail::write_file(dir / "raster.csv", [&](std::ostream& os) { write_raster_csv(os, r); });
        detail::write_file(dir / "events.csv", [&](std::ostream& os) { write_events_csv(os, ev); });
        if (have_spectrum) detail::write_file(dir / "spectrum.csv", [&](std::ostream& os) { write_spectrum_csv(os, sp); });
    }
    if (c.output.wants("json")) {
        auto j = to_json(s, have_spectrum ? sp.peak_frequency : std::numeric_limits<double>::quiet_NaN(), r.events.size());
        if (!have_spectrum) j["peak_frequency"] = nullptr;
        j["params"] = to_json(c.model);
        j["N"] = pc.N;
        j["seed"] = pc.seed;
        detail::write_json(dir / "summary.json", j);
    }
    log << "simulate: " << r.events.size() << " spikes, " << s.events << " synchronous events, mean interval "
        << s.mean_interval << ", mean size " << s.mean_size << '\n';
    return exit_ok;
}

inline int cmd_compare(const RunConfig& c, std::ostream& log)
{
    if (c.epsilons.empty()) throw ConfigError("field epsilons: compare needs a non-empty list");
    for (std::size_t i = 1; i < c.epsilons.size(); ++i)
        if (!(c.epsilons[i] < c.epsilons[i - 1])) throw ConfigError("field epsilons: must be strictly decreasing");
    const auto dir = detail::prepare_dir(c.output.directory);
    ResetAgeMeasure mu;
    mu.atoms.push_back({c.initial_mass, 0.0});
    const auto sweep = epsilon_sweep(c.model, c.epsilons, mu, c.solver_options(), c.solver.epsilon_cap, worker_cap());

    const TimeChange tc = detail::solve_meanfield(c);
    std::optional<PeriodicityReport> period;
    if (tc.episodes.size() >= 6) period = periodicity(tc, 1);
    const auto mf = detail::meanfield_stats(tc);

    const auto& pc = c.particle;
    const SpikeRaster r = simulate(c.model, pc.N, pc.t_max, pc.dt, pc.seed);
    std::vector<SyncEvent> ev;
    if (!r.events.empty()) ev = detect_sync_events(r, c.sync_window(), pc.min_fraction);
    const SyncSummary s = summarize_sync(ev);

    if (c.output.wants("json")) {
        detail::write_json(dir / "sweep.json", validation_report(c.model, sweep, period));
        nlohmann::json eps = nlohmann::json::array();
        for (const auto& e : tc.episodes) eps.push_back(to_json(e));
        auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
        nlohmann::json cmp{
            {"params", to_json(c.model)},
            {"meanfield", {{"period", num(mf.period)}, {"mean_pi", num(mf.pi)}, {"episodes", eps}}},
            {"particle", to_json(s, std::numeric_limits<double>::quiet_NaN(), r.events.size())},
            {"interval_ratio", num(s.mean_interval / mf.period)},
            {"size_difference", num(s.mean_size - mf.pi)},
        };
        cmp["particle"].erase("peak_frequency");
        detail::write_json(dir / "comparison.json", cmp);
    }
    log << "compare: sup_dev monotone = " << (sweep.sup_dev_monotone ? "yes" : "no") << ", mean-field period "
        << mf.period << ", particle interval " << s.mean_interval << '\n';
    return exit_ok;
}

inline int cmd_verify(const RunConfig& c, std::ostream& log)
{
    const auto dir = detail::prepare_dir(c.output.directory);
    auto checks = kernel_identity_checks();
    checks.push_back(hazard_band_check(c.model.lambda_reset));
    // a-priori flux bound on the configured mean-field solve
    const TimeChange tc = detail::solve_meanfield(c);
    const auto ab = apriori_bounds(c.model.lambda_reset);
    double gmax = 0.0, dgmax = 0.0;
    for (std::size_t k = 0; k < tc.flux.size(); ++k) {
        gmax = std::max(gmax, tc.flux.g[k]);
        dgmax = std::max(dgmax, std::abs(tc.flux.dg[k]));
    }
    checks.push_back({"sup g <= A |ic|", gmax, ab.A * c.initial_mass, gmax <= ab.A * c.initial_mass});
    checks.push_back({"sup |dg| <= B |ic|", dgmax, ab.B * c.initial_mass, dgmax <= ab.B * c.initial_mass});
    const auto app = check_appendix_bounds(c.model.lambda_reset, c.model.coupling, c.model.epsilon, c.model.nu, {},
                                           c.model.epsilon > 0.0 ? &tc : nullptr);
    for (const auto& sb : app.sup_bounds)
        checks.push_back({"M_ab numeric <= analytic on [" + detail::g17(sb.sigma_a) + ", " + detail::g17(sb.sigma_b) + "]",
                          sb.numeric, sb.analytic, sb.holds});
    if (app.xi) checks.push_back({"xi' <= 1 near the first blowup", app.xi->max_slope, 1.02, app.xi->max_slope <= 1.02});

    bool ok = true;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& ch : checks) {
        ok = ok && ch.pass;
        arr.push_back(to_json(ch));
        log << (ch.pass ? "PASS " : "FAIL ") << ch.name << ": " << ch.error << " (limit " << ch.tolerance << ")\n";
    }
    if (c.output.wants("json"))
        detail::write_json(dir / "verify.json", {{"params", to_json(c.model)}, {"checks", arr}, {"appendix", to_json(app)}});
    return ok ? exit_ok : exit_solver;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Mean-field blowup solver and particle simulator"};
    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    bool print_defaults = false;
    app.add_option("--config", config_path, "JSON configuration file");
    app.add_option("--out", out_dir, "output directory (overrides output.directory)");
    auto* seed_opt = app.add_option("--seed", seed, "particle RNG seed (overrides particle.seed)");
    app.add_flag("--print-defaults", print_defaults, "print the default configuration and exit");
    auto* solve = app.add_subcommand("solve", "solve the mean-field dynamics");
    auto* sim = app.add_subcommand("simulate", "simulate the finite particle system");
    auto* cmp = app.add_subcommand("compare", "epsilon sweep and particle comparison");
    auto* ver = app.add_subcommand("verify", "kernel identities and proof-constant checks");
    for (auto* s : {solve, sim, cmp, ver}) s->fallthrough();
    app.require_subcommand(0, 1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return exit_config;
    }
    try {
        if (print_defaults) {
            out << to_json(RunConfig{}).dump(2) << '\n';
            return exit_ok;
        }
        RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (!out_dir.empty()) c.output.directory = out_dir;
        if (seed_opt->count()) c.particle.seed = seed;
        validate(c);
        if (solve->parsed()) return cmd_solve(c, out);
        if (sim->parsed()) return cmd_simulate(c, out);
        if (cmp->parsed()) return cmd_compare(c, out);
        if (ver->parsed()) return cmd_verify(c, out);
        err << app.help();
        return exit_config;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return exit_io;
    } catch (const SolverError& e) {
        err << "solver halted (" << e.kind() << "): " << e.what() << '\n';
        return exit_solver;
    } catch (const std::exception& e) {
        err << "solver halted: " << e.what() << '\n';
        return exit_solver;
    }
}

} // namespace mfblowup
