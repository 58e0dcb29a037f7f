#pragma once

// Time change Psi(sigma) = sup_{s<=sigma} (s - lambda G(s)) / nu, blowup
// episodes, and the global solvers: co-marching for eps > 0, explicit
// episode-by-episode construction for eps = 0.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "kernels.hpp"
#include "renewal.hpp"

namespace mfblowup {

struct ModelParams {
    double lambda_reset = 1.0;
    double nu = 1.0;
    double coupling = 20.0;
    double epsilon = 0.0;

    void validate() const
    {
        if (!(lambda_reset > 0.0)) throw std::invalid_argument("lambda_reset must be > 0");
        if (!(nu > 0.0)) throw std::invalid_argument("nu must be > 0");
        if (!(coupling > 0.0)) throw std::invalid_argument("coupling must be > 0");
        if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
    }
};

struct BlowupEpisode {
    double S = 0;  // trigger
    double U = 0;  // exit, S + lambda pi
    double R = std::numeric_limits<double>::quiet_NaN(); // reset
    double pi = 0; // blowup size
    double T = 0;  // Psi(S)
    double dg_at_S = 0;
    double exit_mass = std::numeric_limits<double>::quiet_NaN(); // G(U) - G(S), once U is reached
};

struct SolverOptions {
    double delta_sigma = 0.0; // 0: 1e-3 min(1, Lambda)
    double horizon = 70.0;
    double pi_tolerance = 1e-10;
    std::size_t max_episodes = 0; // 0: unlimited
    bool check_bounds = true;

    double step(const ModelParams& p) const
    {
        return delta_sigma > 0.0 ? delta_sigma : 1e-3 * std::min(1.0, p.lambda_reset);
    }
};

// ---------------------------------------------------------------- blowup size

struct BlowupSizeOptions {
    double p_min = 1e-8;
    std::size_t scan_points = 200;
    double tolerance = 1e-10;
};

// Smallest p with p > int H(lambda p, x) q(S, dx): first upcrossing of
// F(p) = p - absorbed(lambda p) after F has been <= 0. Zero if F > 0 throughout.
template <class State>
double solve_blowup_size(const State& q, double coupling, const BlowupSizeOptions& opt = {})
{
    if (!(coupling > 0.0)) throw std::invalid_argument("solve_blowup_size: coupling must be > 0");
    auto F = [&](double p) { return p - q.absorbed(coupling * p); };
    const std::size_t n = std::max<std::size_t>(opt.scan_points, 2);
    const double ratio = std::pow(1.0 / opt.p_min, 1.0 / static_cast<double>(n - 1));
    double p = opt.p_min, prev_p = 0.0;
    bool seen_nonpositive = false;
    for (std::size_t i = 0; i < n; ++i, p *= ratio) {
        if (i + 1 == n) p = 1.0;
        const double f = F(p);
        if (f <= 0.0) {
            seen_nonpositive = true;
        } else if (seen_nonpositive) {
            double lo = prev_p, hi = p;
            while (hi - lo > opt.tolerance) {
                const double mid = 0.5 * (lo + hi);
                if (F(mid) > 0.0) hi = mid;
                else lo = mid;
            }
            return hi;
        }
        prev_p = p;
    }
    return seen_nonpositive ? 1.0 : 0.0;
}

// Atoms plus a sampled density (nodes with quadrature weights).
struct SampledDensity {
    std::vector<double> y, w, v;
    double mass() const
    {
        double m = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) m += w[i] * v[i];
        return m;
    }
};

struct SpatialState {
    std::vector<Atom> atoms;
    SampledDensity density;

    double absorbed(double b) const
    {
        if (b <= 0.0) return 0.0;
        double acc = 0.0;
        for (const auto& a : atoms) acc += a.mass * fpt_cdf(b, a.location);
        for (std::size_t i = 0; i < density.y.size(); ++i)
            if (density.y[i] > 0.0) acc += density.w[i] * density.v[i] * fpt_cdf(b, density.y[i]);
        return acc;
    }
    double mass() const
    {
        double m = density.mass();
        for (const auto& a : atoms) m += a.mass;
        return m;
    }

    static SpatialState from(const DensitySnapshot& s)
    {
        SpatialState st;
        st.atoms = s.atoms;
        const auto& d = s.density;
        for (std::size_t i = 0; i < d.size(); ++i) {
            st.density.y.push_back(d.x(i));
            st.density.w.push_back(d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0));
            st.density.v.push_back(d.values[i]);
        }
        return st;
    }
};

// ---------------------------------------------------------------- trigger

struct Trigger {
    double S = 0;
    double dg = 0;
    bool full = false;
};

inline double refine_crossing(const FluxSolution& f, double level, double lo, double hi)
{
    for (int it = 0; it < 100 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        if (f.g_at(mid) >= level) hi = mid;
        else lo = mid;
    }
    return hi;
}

inline std::optional<Trigger> detect_trigger(const FluxSolution& flux, double coupling, double from = 0.0)
{
    const double level = 1.0 / coupling;
    std::size_t k = static_cast<std::size_t>(std::max(0.0, std::ceil(from / flux.step - 1e-9)));
    if (k < flux.size() && flux.g[k] >= level) {
        Trigger t{flux.sigma(k), flux.dg[k], flux.dg[k] > 0.0};
        return t;
    }
    for (++k; k < flux.size(); ++k) {
        if (flux.g[k] >= level && flux.g[k - 1] < level) {
            Trigger t;
            t.S = refine_crossing(flux, level, std::max(flux.sigma(k - 1), from), flux.sigma(k));
            t.dg = flux.dg_at(t.S);
            t.full = t.dg > 0.0;
            return t;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------- time change

struct TimeChange {
    ModelParams params;
    double step = 0;
    double xi0 = 0;
    std::vector<double> Psi; // nodes k step
    std::vector<BlowupEpisode> episodes;
    std::vector<double> bases; // Psi = bases[j] + (s - lambda G(s))/nu after the j-th exit
    FluxSolution flux;

    double sigma(std::size_t k) const { return step * static_cast<double>(k); }
    double horizon() const { return Psi.empty() ? 0.0 : sigma(Psi.size() - 1); }

    double psi(double s) const;
    double phi(double t) const;      // inf{s : Psi(s) > t}
    double phi_left(double t) const; // inf{s : Psi(s) >= t}
};

namespace detail {

// Psi and its inverses on the solved part of a (possibly growing) solution.
struct PsiView {
    const ModelParams& p;
    const FluxSolution& f;
    const std::vector<BlowupEpisode>& eps; // S, U, T used; trailing entries may lack U
    const std::vector<double>& bases;
    const std::vector<double>& nodes;
    double xi0;
    double upto; // largest sigma with valid flux

    double phi_raw(double s) const { return (s - p.coupling * f.G_at(s)) / p.nu; }

    // stretch index j: [U_j, S_{j+1}] with U_0 = xi0
    double psi(double s) const
    {
        if (s < xi0) throw std::domain_error("Psi evaluated before xi0");
        if (s < 0.0) return phi_raw(s);
        std::size_t j = 0;
        for (std::size_t k = 0; k < eps.size(); ++k) {
            if (s < eps[k].S) break;
            if (k >= bases.size() - 1 || s < eps[k].U) return eps[k].T;
            j = k + 1;
        }
        return bases[j] + phi_raw(s);
    }

    double stretch_start(std::size_t j) const { return j == 0 ? xi0 : eps[j - 1].U; }
    double stretch_end(std::size_t j) const { return j < eps.size() ? eps[j].S : upto; }
    double stretch_value_start(std::size_t j) const { return j == 0 ? psi(xi0) : eps[j - 1].T; }

    // solve psi(s) = t on stretch j (psi strictly increasing there)
    double solve_on_stretch(std::size_t j, double t) const
    {
        double lo = stretch_start(j), hi = stretch_end(j);
        // narrow with node values where available
        if (hi > 0.0 && !nodes.empty()) {
            const double a = std::max(lo, 0.0);
            std::size_t ka = static_cast<std::size_t>(std::ceil(a / f.step - 1e-12));
            std::size_t kb = std::min(nodes.size() - 1, static_cast<std::size_t>(std::floor(hi / f.step + 1e-12)));
            if (ka <= kb) {
                // nodes inside [lo, hi] are on this stretch; find first with value > t
                std::size_t L = ka, R = kb + 1;
                while (L < R) {
                    const std::size_t mid = (L + R) / 2;
                    if (nodes[mid] > t) R = mid;
                    else L = mid + 1;
                }
                if (L <= kb) hi = std::min(hi, f.sigma(L));
                if (L > ka) lo = std::max(lo, f.sigma(L - 1));
            }
        }
        for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, std::abs(hi)); ++it) {
            const double mid = 0.5 * (lo + hi);
            if (psi(mid) >= t) hi = mid;
            else lo = mid;
        }
        return 0.5 * (lo + hi);
    }

    double phi(double t, bool left) const
    {
        if (t < stretch_value_start(0)) throw std::domain_error("Phi evaluated before the solved range");
        std::size_t j = 0;
        for (std::size_t k = 0; k < eps.size(); ++k) {
            if (t < eps[k].T) break;
            if (t == eps[k].T) {
                if (left) return eps[k].S;
                if (k + 1 >= bases.size()) throw std::out_of_range("Phi: plateau not closed");
                return eps[k].U;
            }
            if (k + 1 >= bases.size()) throw std::out_of_range("Phi evaluated beyond the solved range");
            j = k + 1;
        }
        return solve_on_stretch(j, t);
    }
};

inline PsiView view_of(const TimeChange& tc)
{
    return PsiView{tc.params, tc.flux, tc.episodes, tc.bases, tc.Psi, tc.xi0, tc.flux.horizon()};
}

} // namespace detail

inline double TimeChange::psi(double s) const { return detail::view_of(*this).psi(s); }
inline double TimeChange::phi(double t) const { return detail::view_of(*this).phi(t, false); }
inline double TimeChange::phi_left(double t) const { return detail::view_of(*this).phi(t, true); }

// Right-continuous inverse of Psi as a standalone rule.
inline std::function<double(double)> invert_timechange(const TimeChange& tc)
{
    auto p = std::make_shared<TimeChange>(tc);
    return [p](double t) {
        if (t > p->Psi.back()) throw std::out_of_range("Phi: t beyond solved range");
        return p->phi(t);
    };
}

// Leftmost sigma with Psi(sigma) >= Psi(S_k) + eps.
inline double reset_time(const TimeChange& tc, std::size_t k, double epsilon)
{
    const auto& e = tc.episodes.at(k);
    if (epsilon == 0.0) return e.U;
    const double target = e.T + epsilon;
    if (target > tc.Psi.back()) throw std::out_of_range("reset_time: horizon exhausted before Psi recovers");
    return tc.phi_left(target);
}

// xi = Phi(Psi - eps) at grid nodes (left inverse when eps = 0), with reset jumps.
inline BackwardFunction backward_function(const TimeChange& tc, double epsilon)
{
    std::vector<double> v(tc.Psi.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double t = tc.Psi[k] - epsilon;
        v[k] = std::min(epsilon > 0.0 ? tc.phi(t) : tc.phi_left(t), tc.sigma(k));
    }
    std::vector<ResetJump> jumps;
    for (const auto& e : tc.episodes)
        if (!std::isnan(e.R)) jumps.push_back({e.R, e.S, e.U});
    return BackwardFunction::gridded(tc.step, std::move(v), std::move(jumps));
}

// ---------------------------------------------------------------- dPMF

inline TimeChange solve_global_dpmf(const ModelParams& params, const NaturalInitialCondition& ic,
                                    const SolverOptions& opt = {})
{
    params.validate();
    if (!(params.epsilon > 0.0)) throw std::invalid_argument("solve_global_dpmf requires epsilon > 0");
    ic.validate(params.epsilon);
    const double step = opt.step(params);
    if (params.nu * params.epsilon < 2.0 * step)
        throw std::invalid_argument("solve_global_dpmf: nu*epsilon must be at least two grid steps");
    const double lam = params.coupling, nu = params.nu, eps = params.epsilon;
    const std::size_t nmax = static_cast<std::size_t>(std::llround(opt.horizon / step));

    TimeChange tc;
    tc.params = params;
    tc.step = step;
    double xi0 = ic.xi0;
    if (ic.flux_history.empty()) xi0 = -nu * eps; // nothing in transit: Psi(s) = s/nu on the history
    tc.xi0 = xi0;
    tc.bases.push_back(0.0);

    FluxSolution hist;
    hist.step = step;
    hist.history = ic.flux_history;
    FluxMarcher M(ic, params.lambda_reset, step, hist.G_at(xi0));

    std::vector<double> nodes{0.0};
    std::vector<BlowupEpisode>& eps_list = tc.episodes;
    // state shared with the reset callback
    bool in_plateau = false;
    double K_frozen = 0.0;
    double psi_last = 0.0;
    std::optional<std::size_t> pending_reset;
    double pending_base = 0.0; // base after the current plateau, once U is passed

    auto make_view = [&](const std::vector<double>& bases, double upto) {
        return detail::PsiView{params, M.solution(), eps_list, bases, nodes, xi0, upto};
    };

    auto reset = [&](const FluxMarcher& fm, std::size_t n) {
        const double s = fm.sigma(n);
        ResetUpdate up;
        std::vector<double> bases = tc.bases;
        if (in_plateau) {
            const auto& e = eps_list.back();
            if (s < e.U) {
                psi_last = e.T;
                up.K = K_frozen;
                return up;
            }
            pending_base = e.T - (e.U - lam * fm.G_at(e.U)) / nu;
            bases.push_back(pending_base);
        }
        auto view = make_view(bases, s);
        psi_last = bases.back() + (s - lam * fm.G_at(s)) / nu;
        const double t = psi_last - eps;
        std::optional<std::size_t> pr = pending_reset;
        if (in_plateau) pr = eps_list.size() - 1;
        if (pr && t >= eps_list[*pr].T) {
            const auto& e = eps_list[*pr];
            const double lo = std::max(fm.sigma(n - 1), e.U);
            double a = lo, b = s;
            for (int it = 0; it < 200 && b - a > 1e-15 * std::max(1.0, b); ++it) {
                const double mid = 0.5 * (a + b);
                if (view.psi(mid) >= e.T + eps) b = mid;
                else a = mid;
            }
            up.atoms.push_back({fm.G_at(e.U) - fm.G_at(e.S), b});
        }
        const double x = view.phi(t, false);
        up.K = fm.G_at(std::min(x, s));
        return up;
    };

    const double level = 1.0 / lam;
    BlowupSizeOptions popt;
    popt.tolerance = opt.pi_tolerance;

    for (std::size_t n = 1; n <= nmax; ++n) {
        M.advance(reset);
        const auto& f = M.solution();
        if (in_plateau && M.sigma(n) >= eps_list.back().U) {
            auto& e = eps_list.back();
            in_plateau = false;
            tc.bases.push_back(pending_base);
            e.exit_mass = M.G_at(e.U) - M.G_at(e.S);
            pending_reset = eps_list.size() - 1;
            if (f.g_at(e.U) >= level)
                throw SolverError("false_start", "flux at blowup exit U = " + std::to_string(e.U) + " is not below 1/lambda");
            for (const auto& a : M.reset_atoms())
                if (a.location > M.sigma(n - 1) && a.location <= M.sigma(n)) {
                    e.R = a.location;
                    pending_reset.reset();
                }
        } else if (!in_plateau) {
            if (pending_reset) {
                for (const auto& a : M.reset_atoms())
                    if (a.location > M.sigma(n - 1) && a.location <= M.sigma(n)) {
                        eps_list[*pending_reset].R = a.location;
                        pending_reset.reset();
                        break;
                    }
            }
            if (f.g[n] >= level && f.g[n - 1] < level) {
                if (opt.max_episodes && eps_list.size() >= opt.max_episodes) {
                    nodes.push_back(psi_last);
                    break;
                }
                BlowupEpisode e;
                e.S = refine_crossing(f, level, M.sigma(n - 1), M.sigma(n));
                bool late = pending_reset.has_value();
                for (const auto& a : M.reset_atoms()) late = late || a.location > e.S;
                if (late)
                    throw SolverError("ill_ordered", "new blowup triggered before the previous blowup mass reset");
                e.dg_at_S = f.dg_at(e.S);
                if (!(e.dg_at_S > 1e-9))
                    throw SolverError("non_full_blowup", "flux grazes 1/lambda without positive slope at S = " + std::to_string(e.S));
                e.T = tc.bases.back() + (e.S - lam * f.G_at(e.S)) / nu;
                auto view = make_view(tc.bases, e.S);
                const double xS = view.phi(e.T - eps, false);
                const double Kc_S = M.G_at(xS) - M.atom_total();
                const MarkovState st = M.markov_state(e.S, Kc_S);
                e.pi = solve_blowup_size(st, lam, popt);
                e.U = e.S + lam * e.pi;
                K_frozen = M.G_at(xS);
                eps_list.push_back(e);
                in_plateau = true;
                M.retreat();
                M.advance(reset);
            }
        }
        nodes.push_back(psi_last);
    }
    tc.Psi = std::move(nodes);
    tc.flux = M.solution();
    tc.flux.history = ic.flux_history;
    if (opt.check_bounds) check_flux_bound(tc.flux, apriori_bounds(params.lambda_reset).A * ic.mass());
    return tc;
}

// ---------------------------------------------------------------- PMF (eps = 0)

namespace detail {

// nodes of a graded grid on [0, ymax]: fine near the absorbing boundary
inline SampledDensity graded_grid(double ymax, double dy0 = 1e-3, double growth = 1.01, double dymax = 0.05)
{
    SampledDensity d;
    d.y.push_back(0.0);
    double dy = dy0;
    while (d.y.back() < ymax) {
        d.y.push_back(d.y.back() + dy);
        dy = std::min(dy * growth, dymax);
    }
    const std::size_t n = d.y.size();
    d.w.assign(n, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double h = d.y[i + 1] - d.y[i];
        d.w[i] += 0.5 * h;
        d.w[i + 1] += 0.5 * h;
    }
    d.v.assign(n, 0.0);
    return d;
}

struct GaussRule {
    std::vector<double> x, w;
};

inline GaussRule composite_gauss(double a, double b, double panel)
{
    using G = boost::math::quadrature::gauss<double, 10>;
    const auto& ab = G::abscissa();
    const auto& wt = G::weights();
    GaussRule r;
    const std::size_t np = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((b - a) / panel)));
    const double h = (b - a) / static_cast<double>(np);
    for (std::size_t p = 0; p < np; ++p) {
        const double c = a + h * (p + 0.5), r2 = 0.5 * h;
        for (std::size_t i = 0; i < ab.size(); ++i) {
            r.x.push_back(c - r2 * ab[i]);
            r.w.push_back(r2 * wt[i]);
            r.x.push_back(c + r2 * ab[i]);
            r.w.push_back(r2 * wt[i]);
        }
    }
    return r;
}

// Initial state of one PMF episode: atoms plus a sampled survivor density,
// evolving with instantaneous reset at Lambda.
struct PmfEpisode {
    double L;
    std::vector<Atom> atoms;
    SampledDensity dens;

    template <class K>
    double sum(K&& k) const
    {
        double v = 0.0;
        for (const auto& a : atoms) v += a.mass * k(a.location);
        for (std::size_t i = 0; i < dens.y.size(); ++i)
            if (dens.y[i] > 0.0 && dens.v[i] != 0.0) v += dens.w[i] * dens.v[i] * k(dens.y[i]);
        return v;
    }
    double g(double s) const { return sum([&](double x) { return fundamental_flux(s, x, L, 1e-16); }); }
    double dg(double s) const { return sum([&](double x) { return fundamental_flux_d1(s, x, L, 1e-16); }); }
    double G(double s) const { return sum([&](double x) { return fundamental_cumulative(s, x, L, 1e-16); }); }
    double mass() const
    {
        double m = dens.mass();
        for (const auto& a : atoms) m += a.mass;
        return m;
    }
};

// State at local trigger time S with resets (instantaneous) on [0, S].
struct PmfTriggerState {
    const PmfEpisode& ep;
    double S;
    GaussRule resets; // weights already multiplied by the reset flux
    std::vector<double> base_atoms, base_dens, base_resets;

    PmfTriggerState(const PmfEpisode& e, double S_, GaussRule r) : ep(e), S(S_), resets(std::move(r))
    {
        for (const auto& a : ep.atoms) base_atoms.push_back(fpt_survival(S, a.location));
        for (double y : ep.dens.y) base_dens.push_back(y > 0.0 ? fpt_survival(S, y) : 0.0);
        for (double t : resets.x) base_resets.push_back(fpt_survival(S - t, ep.L));
    }

    double absorbed(double b) const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i < ep.atoms.size(); ++i)
            acc += ep.atoms[i].mass * (base_atoms[i] - fpt_survival(S + b, ep.atoms[i].location));
        const auto& d = ep.dens;
        for (std::size_t i = 0; i < d.y.size(); ++i)
            if (d.y[i] > 0.0 && d.v[i] != 0.0) acc += d.w[i] * d.v[i] * (base_dens[i] - fpt_survival(S + b, d.y[i]));
        for (std::size_t i = 0; i < resets.x.size(); ++i)
            acc += resets.w[i] * (base_resets[i] - fpt_survival(S - resets.x[i] + b, ep.L));
        return acc;
    }

    // flux and its derivative b after the trigger, no resets
    void flux(double b, double& g, double& dg) const
    {
        g = dg = 0.0;
        auto add = [&](double w, double s, double x) {
            if (s <= 0.0) return;
            const double hv = fpt_density(s, x);
            g += w * hv;
            dg += w * hv * fpt_log_density_d1(s, x);
        };
        for (const auto& a : ep.atoms) add(a.mass, S + b, a.location);
        const auto& d = ep.dens;
        for (std::size_t i = 0; i < d.y.size(); ++i)
            if (d.y[i] > 0.0 && d.v[i] != 0.0) add(d.w[i] * d.v[i], S + b, d.y[i]);
        for (std::size_t i = 0; i < resets.x.size(); ++i) add(resets.w[i], S - resets.x[i] + b, ep.L);
    }

    double mass() const
    {
        double m = 0.0;
        for (std::size_t i = 0; i < ep.atoms.size(); ++i) m += ep.atoms[i].mass * base_atoms[i];
        for (std::size_t i = 0; i < ep.dens.y.size(); ++i) m += ep.dens.w[i] * ep.dens.v[i] * base_dens[i];
        for (std::size_t i = 0; i < resets.x.size(); ++i) m += resets.w[i] * base_resets[i];
        return m;
    }

    // survivors after a further time b, as a sampled density
    SampledDensity survivors(double b) const
    {
        const double t = S + b;
        double xmax = ep.L, vmax = 0.0;
        for (const auto& a : ep.atoms) xmax = std::max(xmax, a.location);
        for (double v : ep.dens.v) vmax = std::max(vmax, v);
        for (std::size_t i = 0; i < ep.dens.y.size(); ++i)
            if (ep.dens.v[i] > 1e-16 * vmax) xmax = std::max(xmax, ep.dens.y[i]);
        SampledDensity out = graded_grid(xmax + 12.0 * std::sqrt(t) + 2.0);
        for (std::size_t j = 1; j < out.y.size(); ++j) {
            const double y = out.y[j];
            double v = 0.0;
            for (const auto& a : ep.atoms) v += a.mass * heat_kernel(t, y, a.location);
            const auto& d = ep.dens;
            for (std::size_t i = 0; i < d.y.size(); ++i)
                if (d.y[i] > 0.0 && d.v[i] != 0.0) v += d.w[i] * d.v[i] * heat_kernel(t, y, d.y[i]);
            for (std::size_t i = 0; i < resets.x.size(); ++i) v += resets.w[i] * heat_kernel(t - resets.x[i], y, ep.L);
            out.v[j] = v;
        }
        // drop the negligible far tail
        const double top = *std::max_element(out.v.begin(), out.v.end());
        std::size_t keep = out.y.size();
        while (keep > 2 && out.v[keep - 1] <= 1e-16 * top) --keep;
        if (keep < out.y.size()) {
            out.y.resize(keep);
            out.v.resize(keep);
            out.w.resize(keep);
            out.w[keep - 1] = 0.5 * (out.y[keep - 1] - out.y[keep - 2]);
        }
        return out;
    }
};

} // namespace detail

struct PmfEpisodeRecord {
    double S_local = 0;     // trigger time measured from the episode start
    double initial_mass = 0; // |q_{0,k}|
    double survivor_mass = 0;
};

struct PmfSolution {
    TimeChange tc;
    std::vector<PmfEpisodeRecord> records;
};

inline PmfSolution solve_global_pmf(const ModelParams& params, const NaturalInitialCondition& ic,
                                    std::size_t n_episodes, const SolverOptions& opt = {})
{
    params.validate();
    if (params.epsilon != 0.0) throw std::invalid_argument("solve_global_pmf requires epsilon = 0");
    ic.validate(0.0);
    if (ic.history_mass() > 0.0) throw std::invalid_argument("solve_global_pmf: initial condition must be purely spatial");
    const double L = params.lambda_reset, lam = params.coupling, nu = params.nu;
    const double step = opt.step(params);
    const double level = 1.0 / lam;
    const std::size_t nmax = static_cast<std::size_t>(std::llround(opt.horizon / step));

    PmfSolution out;
    TimeChange& tc = out.tc;
    tc.params = params;
    tc.step = step;
    tc.xi0 = 0.0;
    tc.bases.push_back(0.0);
    auto& f = tc.flux;
    f.step = step;

    detail::PmfEpisode ep{L, ic.atoms, {}};
    {
        const auto& d = ic.density;
        for (std::size_t i = 0; i < d.size(); ++i) {
            ep.dens.y.push_back(d.x(i));
            ep.dens.w.push_back(d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0));
            ep.dens.v.push_back(d.values[i]);
        }
    }

    BlowupSizeOptions popt;
    popt.tolerance = opt.pi_tolerance;
    double start = 0.0, T = 0.0, G_start = 0.0;
    std::size_t n = 0;
    auto push = [&](double g, double dg, double G, double psi) {
        f.g.push_back(g);
        f.dg.push_back(dg);
        f.G.push_back(G);
        tc.Psi.push_back(psi);
    };

    while (n <= nmax) {
        out.records.push_back({0.0, ep.mass(), ep.dens.mass()});
        // stretch: resets instantaneous, local time s = sigma - start
        bool triggered = false;
        double s_prev = -1.0;
        double g_prev = 0.0;
        for (; n <= nmax; ++n) {
            const double s = step * static_cast<double>(n) - start;
            const double g = s > 0.0 ? ep.g(s) : 0.0;
            if (s_prev >= 0.0 && g >= level && g_prev < level) {
                triggered = true;
                break;
            }
            if (s_prev < 0.0 && s > 0.0 && g >= level)
                throw SolverError("false_start", "episode starts with flux above 1/lambda");
            const double Gl = ep.G(s);
            push(g, s > 0.0 ? ep.dg(s) : 0.0, G_start + Gl, T + (s - lam * Gl) / nu);
            s_prev = s;
            g_prev = g;
        }
        if (!triggered) break;
        if (n_episodes && tc.episodes.size() >= n_episodes) {
            // complete the node that revealed the next trigger, then stop
            const double s = step * static_cast<double>(n) - start;
            const double Gl = ep.G(s);
            push(ep.g(s), ep.dg(s), G_start + Gl, T + (s - lam * Gl) / nu);
            break;
        }
        // refine the local trigger time
        double lo = s_prev, hi = step * static_cast<double>(n) - start;
        for (int it = 0; it < 100 && hi - lo > 1e-15; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (ep.g(mid) >= level) hi = mid;
            else lo = mid;
        }
        const double Sl = hi;
        BlowupEpisode e;
        e.dg_at_S = ep.dg(Sl);
        if (!(e.dg_at_S > 1e-9))
            throw SolverError("non_full_blowup", "flux grazes 1/lambda without positive slope");
        const double GS_local = ep.G(Sl);
        e.S = start + Sl;
        e.T = T + (Sl - lam * GS_local) / nu;
        out.records.back().S_local = Sl;

        detail::GaussRule rr = detail::composite_gauss(0.0, Sl, std::min(0.01, Sl));
        for (std::size_t i = 0; i < rr.x.size(); ++i) rr.w[i] *= ep.g(rr.x[i]);
        const detail::PmfTriggerState st(ep, Sl, std::move(rr));
        e.pi = solve_blowup_size(st, lam, popt);
        e.U = e.S + lam * e.pi;
        e.R = e.U;
        const double GS = G_start + GS_local;
        e.exit_mass = st.absorbed(lam * e.pi);
        tc.episodes.push_back(e);

        // plateau: no resets, flux of the frozen state. Away from the trigger
        // the flux is smooth; evaluate every plateau_stride nodes and fill
        // with cubic Hermite in between.
        constexpr std::size_t plateau_stride = 10;
        for (; n <= nmax; ++n) {
            const double s = step * static_cast<double>(n);
            if (s >= e.U) break;
            const std::size_t m = n + plateau_stride;
            if (s - e.S > 0.5 && m <= nmax && step * static_cast<double>(m) < e.U && !f.g.empty()) {
                double g1, d1;
                st.flux(step * static_cast<double>(m) - e.S, g1, d1);
                const double G1 = GS + st.absorbed(step * static_cast<double>(m) - e.S);
                const double g0 = f.g.back(), d0 = f.dg.back(), G0 = f.G.back();
                const double h = step * static_cast<double>(m - n + 1);
                for (std::size_t i = 1; i <= plateau_stride; ++i) {
                    const double t = static_cast<double>(i) / static_cast<double>(plateau_stride + 1);
                    const double t2 = t * t, t3 = t2 * t;
                    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + t, h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
                    const double d00 = (6 * t2 - 6 * t) / h, d10 = 3 * t2 - 4 * t + 1, d01 = (-6 * t2 + 6 * t) / h, d11 = 3 * t2 - 2 * t;
                    push(h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1,
                         d00 * g0 + d10 * d0 + d01 * g1 + d11 * d1,
                         h00 * G0 + h10 * h * g0 + h01 * G1 + h11 * h * g1, e.T);
                }
                push(g1, d1, G1, e.T);
                n = m;
                continue;
            }
            double g, dg;
            st.flux(s - e.S, g, dg);
            push(g, dg, GS + st.absorbed(s - e.S), e.T);
        }
        if (n > nmax) {
            tc.bases.push_back(e.T - (e.U - lam * (GS + e.exit_mass)) / nu);
            break;
        }
        // next episode: survivors plus the reset atom
        detail::PmfEpisode next{L, {{e.pi, L}}, st.survivors(e.U - e.S)};
        out.records.back().survivor_mass = next.dens.mass();
        ep = std::move(next);
        start = e.U;
        T = e.T;
        G_start = GS + e.exit_mass;
        tc.bases.push_back(T - (start - lam * G_start) / nu);
    }
    if (f.g.size() < 2) throw std::runtime_error("solve_global_pmf: horizon shorter than one grid step");
    if (opt.check_bounds) check_flux_bound(f, apriori_bounds(L).A * ic.mass());
    return out;
}

inline std::size_t default_pmf_episodes() { return 0; }

} // namespace mfblowup
