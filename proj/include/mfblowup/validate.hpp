#pragma once

// Cross-checks: closed-form first-blowup approximation, eps -> 0 sweeps,
// periodicity of the inter-blowup map, and numeric checks of the constants
// used in the existence proofs.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <json.hpp>

#include "kernels.hpp"
#include "renewal.hpp"
#include "timechange.hpp"

namespace mfblowup {

// Worker cap: MFBLOWUP_THREADS if set and positive, else hardware concurrency.
inline unsigned worker_cap()
{
    if (const char* s = std::getenv("MFBLOWUP_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(s, &end, 10);
        if (end != s && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Runs job(i) for i in [0, n) on at most `threads` workers; first error rethrown.
template <class Job>
void parallel_for(std::size_t n, unsigned threads, Job&& job)
{
    std::vector<std::exception_ptr> errs(n);
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += threads) {
                try {
                    job(i);
                } catch (...) {
                    errs[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- first blowup

struct FirstBlowupApprox {
    double S1 = 0;
    double T1 = 0;
    double frequency = 0;
};

// Reset-free, pi = 1 approximation: S1 is the first root of h(S, Lambda) = 1/lambda,
// T1 = (S1 - lambda H(S1, Lambda)) / nu.
inline FirstBlowupApprox approx_first_blowup(const ModelParams& p)
{
    p.validate();
    const auto kc = kernel_constants(p.lambda_reset);
    const double level = 1.0 / p.coupling;
    if (!(kc.h_star > level)) throw std::domain_error("approx_first_blowup: lambda h* <= 1, no trigger");
    double lo = 0.0, hi = kc.sigma_star;
    for (int it = 0; it < 200 && hi - lo > 1e-16 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (fpt_density(mid, p.lambda_reset) >= level) hi = mid;
        else lo = mid;
    }
    FirstBlowupApprox r;
    r.S1 = hi;
    r.T1 = (r.S1 - p.coupling * fpt_cdf(r.S1, p.lambda_reset)) / p.nu;
    r.frequency = 1.0 / r.T1;
    return r;
}

// ---------------------------------------------------------------- eps sweep

struct EpsilonSweepReport {
    std::vector<double> epsilons, T1, pi1, sup_dev;
    double common_horizon = 0;
    bool sup_dev_monotone = false; // nonincreasing down the list within 10% slack
};

inline bool nonincreasing_with_slack(const std::vector<double>& v, double slack)
{
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[i - 1] * (1.0 + slack) + 1e-15) return false;
    return true;
}

// The same reset-age measure mu0 seeds every run; eps = 0 uses the PMF construction.
inline EpsilonSweepReport epsilon_sweep(const ModelParams& base, const std::vector<double>& epsilons,
                                        const ResetAgeMeasure& mu0, const SolverOptions& opt,
                                        double epsilon_cap = 0.05, unsigned threads = worker_cap())
{
    if (epsilons.empty()) throw std::invalid_argument("epsilon_sweep: empty epsilon list");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        if (!std::isfinite(epsilons[i]) || epsilons[i] < 0.0)
            throw std::invalid_argument("epsilon_sweep: epsilons must be finite and >= 0");
        if (epsilons[i] > epsilon_cap) throw std::invalid_argument("epsilon_sweep: epsilon above the configured cap");
        if (i > 0 && !(epsilons[i] < epsilons[i - 1]))
            throw std::invalid_argument("epsilon_sweep: epsilons must be strictly decreasing");
    }
    const std::size_t n = epsilons.size();
    std::vector<TimeChange> runs(n + 1);
    // index n holds the eps = 0 reference
    parallel_for(n + 1, threads, [&](std::size_t i) {
        ModelParams p = base;
        p.epsilon = i < n ? epsilons[i] : 0.0;
        const auto ic = construct_natural_ic(mu0, p.epsilon, p.nu, p.coupling, p.lambda_reset);
        if (p.epsilon > 0.0) runs[i] = solve_global_dpmf(p, ic, opt);
        else runs[i] = solve_global_pmf(p, ic, 0, opt).tc;
    });
    const TimeChange& ref = runs[n];
    if (ref.episodes.empty()) throw SolverError("no_blowup", "epsilon_sweep: reference solution has no blowup");
    EpsilonSweepReport rep;
    rep.common_horizon = ref.horizon();
    for (std::size_t i = 0; i < n; ++i) rep.common_horizon = std::min(rep.common_horizon, runs[i].horizon());
    for (std::size_t i = 0; i < n; ++i) {
        const TimeChange& tc = epsilons[i] > 0.0 ? runs[i] : ref;
        if (tc.episodes.empty()) throw SolverError("no_blowup", "epsilon_sweep: no blowup at eps = " + std::to_string(epsilons[i]));
        if (std::abs(tc.step - ref.step) > 1e-15) throw std::logic_error("epsilon_sweep: grids differ");
        rep.epsilons.push_back(epsilons[i]);
        rep.T1.push_back(tc.episodes[0].T);
        rep.pi1.push_back(tc.episodes[0].pi);
        double dev = 0.0;
        const std::size_t m = static_cast<std::size_t>(std::floor(rep.common_horizon / tc.step + 1e-9));
        for (std::size_t k = 0; k <= m && k < tc.Psi.size() && k < ref.Psi.size(); ++k)
            dev = std::max(dev, std::abs(tc.Psi[k] - ref.Psi[k]));
        rep.sup_dev.push_back(dev);
    }
    rep.sup_dev_monotone = nonincreasing_with_slack(rep.sup_dev, 0.10);
    return rep;
}

// ---------------------------------------------------------------- periodicity

struct PeriodicityReport {
    std::vector<double> gaps; // T_{k+1} - T_k for k >= k_min
    double estimate = 0;      // mean of the last five gaps
    double spread = 0;        // (max - min) / mean over the last five gaps
    bool declared = false;
};

inline PeriodicityReport periodicity(const TimeChange& tc, std::size_t k_min, double threshold = 1e-3)
{
    if (tc.episodes.size() < k_min + 5)
        throw std::invalid_argument("periodicity: need at least k_min + 5 episodes");
    PeriodicityReport r;
    for (std::size_t k = k_min; k + 1 < tc.episodes.size(); ++k) r.gaps.push_back(tc.episodes[k + 1].T - tc.episodes[k].T);
    const std::size_t m = std::min<std::size_t>(5, r.gaps.size());
    const auto first = r.gaps.end() - static_cast<std::ptrdiff_t>(m);
    double sum = 0.0, lo = *first, hi = *first;
    for (auto it = first; it != r.gaps.end(); ++it) {
        sum += *it;
        lo = std::min(lo, *it);
        hi = std::max(hi, *it);
    }
    r.estimate = sum / static_cast<double>(m);
    r.spread = (hi - lo) / r.estimate;
    r.declared = m >= 4 && r.spread < threshold;
    return r;
}

// ---------------------------------------------------------------- proof constants

struct ProofConstants {
    double a = 0, b = 0, l = 0, C = 0, s1 = 0, s2 = 0, sigma_sharp = 0, lambda_sharp = 0, L = 0;
    double delta_H = 0, A = 0, B = 0;
};

inline double first_level_crossing(double level, double lambda_reset)
{
    const auto kc = kernel_constants(lambda_reset);
    if (level > kc.h_star) return std::numeric_limits<double>::infinity();
    double lo = 0.0, hi = kc.sigma_star;
    for (int it = 0; it < 200 && hi - lo > 1e-16 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (fpt_density(mid, lambda_reset) >= level) hi = mid;
        else lo = mid;
    }
    return hi;
}

// pi1 enters only through s1, s2.
inline ProofConstants proof_constants(double lambda_reset, double coupling, double pi1 = 1.0)
{
    const double L = lambda_reset;
    const auto kc = kernel_constants(L);
    const auto ab = apriori_bounds(L);
    ProofConstants c;
    c.A = ab.A;
    c.B = ab.B;
    c.delta_H = kc.delta_H;
    c.sigma_sharp = kc.sigma_sharp;
    c.a = 0.5 / (1.0 + ab.A * kc.sigma_star);
    const double sd = kc.sigma_dagger;
    c.b = (L * L - (3.0 * sd + sd * sd)) / (2.0 * sd * sd * c.a);
    c.l = 1.0 / kc.h_dagger;
    c.C = 0.5 * std::min(1.0 / (2.0 * ab.A), c.b / ab.B);
    c.s1 = first_level_crossing(c.a / (pi1 * coupling), L);
    c.s2 = first_level_crossing(1.0 / (pi1 * coupling), L);
    // largest lambda with lambda <= (2/dH)(sigma# - 4 ln(C/(2 lambda)))
    auto f = [&](double lam) { return lam - 2.0 / c.delta_H * (c.sigma_sharp - 4.0 * std::log(c.C / (2.0 * lam))); };
    const double turn = 8.0 / c.delta_H; // f is increasing beyond
    if (f(turn) > 0.0) {
        c.lambda_sharp = 0.0;
    } else {
        double lo = turn, hi = 2.0 * turn;
        while (f(hi) <= 0.0) hi *= 2.0;
        for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (f(mid) <= 0.0) lo = mid;
            else hi = mid;
        }
        c.lambda_sharp = lo;
    }
    c.L = std::max({2.0 * c.l, 2.0 / c.C, 2.0 * std::sqrt(2.0 * std::numbers::pi * L) * std::exp(L * L / (2.0 * c.C)),
                    c.lambda_sharp});
    return c;
}

// ---------------------------------------------------------------- M_ab

struct SupBoundCheck {
    double sigma_a = 0, sigma_b = 0;
    double numeric = 0;  // sup_x int sup_sigma |d_sigma kappa| dy on the grid
    double analytic = 0; // sup_x of the closed-form majorant
    double argmax_x = 0;
    bool holds = false;
};

struct SupBoundGrid {
    double x_max = 0.0;      // 0: 10 + 2 sigma_b
    std::size_t nx = 200;
    std::size_t nsigma = 64;
    double dy_rel = 2e-3;    // y step relative to sqrt(sigma_a)
};

inline double sup_bound_analytic(double sa, double sb, double x)
{
    const double pref = std::exp(0.5 * (sb - sa)) / (2.0 * std::sqrt(2.0 * std::numbers::pi * std::pow(sa, 5)));
    const double A = pref * sb * (1.0 + 2.0 / std::numbers::e + sb);
    const double B = pref;
    return A * std::sqrt(std::numbers::pi / 2.0) * sb
        + B * ((1.0 + sb) * std::sqrt(std::numbers::pi / 2.0 * sb * sb * sb)
               + std::exp(-(x - sb) * (x - sb) / (2.0 * sb)) * sb * (sb + x));
}

// integral over y of sup over sigma in [sa, sb] of |d_sigma kappa(sigma, y, x)|
inline double sup_dsigma_kappa_integral(double sa, double sb, double x, std::size_t nsigma, double dy)
{
    const double ymax = x + 12.0 * std::sqrt(sb) + 2.0;
    double acc = 0.0, prev = 0.0;
    for (double y = dy; y <= ymax; y += dy) {
        double m = 0.0;
        for (std::size_t k = 0; k < nsigma; ++k) {
            const double s = nsigma == 1 ? sa : sa + (sb - sa) * static_cast<double>(k) / static_cast<double>(nsigma - 1);
            m = std::max(m, std::abs(heat_kernel_dsigma(s, y, x)));
        }
        acc += 0.5 * (prev + m) * dy;
        prev = m;
    }
    return acc;
}

inline SupBoundCheck check_sup_bound(double sa, double sb, const SupBoundGrid& g = {})
{
    if (!(sa > 0.0) || sb < sa) throw std::invalid_argument("check_sup_bound: need 0 < sigma_a <= sigma_b");
    SupBoundCheck r;
    r.sigma_a = sa;
    r.sigma_b = sb;
    const double xmax = g.x_max > 0.0 ? g.x_max : 10.0 + 2.0 * sb;
    const double dy = g.dy_rel * std::sqrt(sa);
    for (std::size_t i = 1; i <= g.nx; ++i) {
        const double x = xmax * static_cast<double>(i) / static_cast<double>(g.nx);
        const double v = sup_dsigma_kappa_integral(sa, sb, x, g.nsigma, dy);
        if (v > r.numeric) {
            r.numeric = v;
            r.argmax_x = x;
        }
        r.analytic = std::max(r.analytic, sup_bound_analytic(sa, sb, x));
    }
    r.holds = std::isfinite(r.numeric) && r.numeric <= r.analytic;
    return r;
}

struct XiSlopeCheck {
    double window_lo = 0, window_hi = 0;
    double max_slope = 0;
};

// Max difference quotient of xi = Phi(Psi - eps) over [S1 - s1/2, S1 + lambda/2].
inline XiSlopeCheck check_xi_slope(const TimeChange& tc, double s1)
{
    if (tc.episodes.empty()) throw std::invalid_argument("check_xi_slope: no blowup");
    const double eps = tc.params.epsilon;
    const double S = tc.episodes[0].S;
    XiSlopeCheck r;
    r.window_lo = std::max(0.0, S - 0.5 * s1);
    r.window_hi = std::min(tc.horizon(), S + 0.5 * tc.params.coupling);
    const auto k0 = static_cast<std::size_t>(std::ceil(r.window_lo / tc.step));
    const auto k1 = static_cast<std::size_t>(std::floor(r.window_hi / tc.step));
    double prev = tc.phi(tc.Psi[k0] - eps);
    for (std::size_t k = k0 + 1; k <= k1; ++k) {
        const double cur = tc.phi(tc.Psi[k] - eps);
        r.max_slope = std::max(r.max_slope, (cur - prev) / tc.step);
        prev = cur;
    }
    return r;
}

struct AppendixReport {
    ProofConstants constants;
    std::vector<SupBoundCheck> sup_bounds;
    std::optional<XiSlopeCheck> xi;
};

inline AppendixReport check_appendix_bounds(double lambda_reset, double coupling, double epsilon, double nu,
                                            const SupBoundGrid& grid = {}, const TimeChange* solved = nullptr)
{
    AppendixReport r;
    r.constants = proof_constants(lambda_reset, coupling, solved && !solved->episodes.empty() ? solved->episodes[0].pi : 1.0);
    r.sup_bounds.push_back(check_sup_bound(0.5, 1.0, grid));
    r.sup_bounds.push_back(check_sup_bound(0.5 * coupling, coupling + 2.0 * nu * epsilon, grid));
    if (solved) r.xi = check_xi_slope(*solved, r.constants.s1);
    return r;
}

// ---------------------------------------------------------------- kernel identities

struct Check {
    std::string name;
    double error = 0;     // worst observed deviation
    double tolerance = 0;
    bool pass = false;
};

namespace detail {
inline double integrate(const std::function<double(double)>& f, double a, double b)
{
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-13);
}
} // namespace detail

// dH/dsigma = h, int kappa dy = 1 - H, Chapman-Kolmogorov, h = d_y kappa(., 0, .)/2.
inline std::vector<Check> kernel_identity_checks()
{
    const double sigmas[] = {0.05, 0.3, 1.0, 4.0, 15.0};
    const double xs[] = {0.2, 1.0, 2.5};
    std::vector<Check> out;

    Check d{"dH/dsigma = h", 0.0, 1e-6};
    for (double s : sigmas)
        for (double x : xs) {
            const double e = 1e-5 * s;
            const double fd = (fpt_cdf(s + e, x) - fpt_cdf(s - e, x)) / (2.0 * e);
            d.error = std::max(d.error, std::abs(fd - fpt_density(s, x)));
        }
    out.push_back(d);

    Check m{"int kappa dy = 1 - H", 0.0, 1e-8};
    for (double s : sigmas)
        for (double x : xs) {
            const double top = x + 14.0 * std::sqrt(s) + 1.0;
            const double v = detail::integrate([&](double y) { return heat_kernel(s, y, x); }, 0.0, top);
            m.error = std::max(m.error, std::abs(v - fpt_survival(s, x)));
        }
    out.push_back(m);

    Check ck{"Chapman-Kolmogorov", 0.0, 1e-6};
    const double pairs[][2] = {{0.2, 0.3}, {0.5, 1.0}, {2.0, 3.0}};
    const double zs[] = {0.3, 1.0, 2.0};
    for (const auto& pr : pairs)
        for (double x : xs)
            for (double z : zs) {
                const double s = pr[0], t = pr[1];
                const double top = std::max(x, z) + 14.0 * std::sqrt(s + t) + 1.0;
                const double v = detail::integrate([&](double y) { return y > 0.0 ? heat_kernel(s, z, y) * heat_kernel(t, y, x) : 0.0; }, 0.0, top);
                ck.error = std::max(ck.error, std::abs(v - heat_kernel(s + t, z, x)));
            }
    out.push_back(ck);

    Check fl{"h = d_y kappa(sigma, 0, x) / 2", 0.0, 1e-6};
    for (double s : sigmas)
        for (double x : xs) {
            const double e = 1e-4 * std::sqrt(s);
            const double dy = (4.0 * heat_kernel(s, e, x) - heat_kernel(s, 2.0 * e, x)) / (2.0 * e);
            fl.error = std::max(fl.error, std::abs(0.5 * dy - fpt_density(s, x)));
        }
    out.push_back(fl);

    for (auto& c : out) c.pass = c.error <= c.tolerance;
    return out;
}

// |hazard(sigma, Lambda) - 1/2| relative to 1/2.
inline Check hazard_limit_check(double sigma, double lambda_reset, double rel_tol)
{
    Check c{"hazard -> 1/2 at sigma = " + std::to_string(sigma), 0.0, rel_tol};
    c.error = std::abs(hazard_rate(sigma, lambda_reset) - 0.5) / 0.5;
    c.pass = c.error <= rel_tol;
    return c;
}

// Weaker, true form: hazard stays in [0.4, 0.6] on [50, 200] and approaches 1/2 monotonically there.
inline Check hazard_band_check(double lambda_reset)
{
    Check c{"hazard in [0.4, 0.6] and approaching 1/2 on [50, 200]", 0.0, 0.1};
    double prev = std::numeric_limits<double>::infinity();
    bool monotone = true;
    for (double s = 50.0; s <= 200.0; s += 5.0) {
        const double d = std::abs(hazard_rate(s, lambda_reset) - 0.5);
        c.error = std::max(c.error, d);
        monotone = monotone && d <= prev;
        prev = d;
    }
    c.pass = monotone && c.error <= c.tolerance;
    return c;
}

inline nlohmann::json to_json(const Check& c)
{
    return {{"name", c.name}, {"error", c.error}, {"tolerance", c.tolerance}, {"pass", c.pass}};
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const ModelParams& p)
{
    return {{"lambda_reset", p.lambda_reset}, {"nu", p.nu}, {"coupling", p.coupling}, {"epsilon", p.epsilon}};
}

inline nlohmann::json to_json(const EpsilonSweepReport& r)
{
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < r.epsilons.size(); ++i)
        a.push_back({{"epsilon", r.epsilons[i]}, {"T1", r.T1[i]}, {"pi1", r.pi1[i]}, {"sup_dev", r.sup_dev[i]}});
    return a;
}

inline nlohmann::json to_json(const PeriodicityReport& r)
{
    return {{"estimate", r.estimate}, {"spread", r.spread}, {"declared", r.declared}, {"gaps", r.gaps}};
}

inline nlohmann::json validation_report(const ModelParams& p, const EpsilonSweepReport& sweep,
                                        const std::optional<PeriodicityReport>& period)
{
    nlohmann::json j{{"params", to_json(p)}, {"sweep", to_json(sweep)}};
    j["period"] = period ? to_json(*period) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const AppendixReport& r)
{
    const auto& c = r.constants;
    nlohmann::json j{{"constants",
                      {{"a", c.a}, {"b", c.b}, {"l", c.l}, {"C", c.C}, {"s1", c.s1}, {"s2", c.s2},
                       {"sigma_sharp", c.sigma_sharp}, {"lambda_sharp", c.lambda_sharp}, {"L", c.L},
                       {"delta_H", c.delta_H}, {"A", c.A}, {"B", c.B}}}};
    j["sup_bounds"] = nlohmann::json::array();
    for (const auto& s : r.sup_bounds)
        j["sup_bounds"].push_back({{"sigma_a", s.sigma_a}, {"sigma_b", s.sigma_b}, {"numeric", s.numeric},
                                   {"analytic", s.analytic}, {"argmax_x", s.argmax_x}, {"holds", s.holds}});
    if (r.xi) j["xi_slope"] = {{"window", {r.xi->window_lo, r.xi->window_hi}}, {"max", r.xi->max_slope}};
    return j;
}

} // namespace mfblowup
