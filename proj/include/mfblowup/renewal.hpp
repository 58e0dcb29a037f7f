#pragma once

// Quasi-renewal flux equation
//   g(s) = int h(s,x) q0(dx) + int_0^s h(s-t, Lambda) dK(t),   K = G o xi,
// marched on a uniform sigma-grid. The reset measure dK is kept as exact
// cell increments plus a list of reset atoms; the kernel is averaged over
// each cell, so the scheme is second order and the singular reset density
// near a reset time needs no special treatment.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "kernels.hpp"

namespace mfblowup {

class SolverError : public std::runtime_error {
public:
    SolverError(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct Atom {
    double mass = 0;
    double location = 0;
};

// Piecewise-linear function on a uniform grid, zero outside.
struct GridFunction {
    double x0 = 0;
    double step = 0;
    std::vector<double> values;

    bool empty() const { return values.empty(); }
    std::size_t size() const { return values.size(); }
    double x(std::size_t i) const { return x0 + step * static_cast<double>(i); }
    double end() const { return values.empty() ? x0 : x(values.size() - 1); }

    double operator()(double s) const
    {
        if (values.empty() || s < x0 || s > end()) return 0.0;
        if (values.size() == 1) return values[0];
        const double u = (s - x0) / step;
        const std::size_t i = std::min(static_cast<std::size_t>(u), values.size() - 2);
        const double f = u - static_cast<double>(i);
        return values[i] + f * (values[i + 1] - values[i]);
    }

    double integral() const
    {
        if (values.size() < 2) return 0.0;
        double s = 0.5 * (values.front() + values.back());
        for (std::size_t i = 1; i + 1 < values.size(); ++i) s += values[i];
        return s * step;
    }

    // int_{x0}^{s}
    double cumulative(double s) const
    {
        if (values.size() < 2 || s <= x0) return 0.0;
        if (s >= end()) return integral();
        const double u = (s - x0) / step;
        const std::size_t i = static_cast<std::size_t>(u);
        double acc = 0.0;
        for (std::size_t j = 0; j < i; ++j) acc += 0.5 * (values[j] + values[j + 1]) * step;
        const double f = u - static_cast<double>(i);
        const double vi = values[i], vs = (*this)(s);
        return acc + 0.5 * (vi + vs) * f * step;
    }
};

// Elapsed-time-since-reset measure of the currently active population.
struct ResetAgeMeasure {
    std::vector<Atom> atoms; // location = elapsed time tau >= 0
    GridFunction density;    // density in tau
    double mass() const
    {
        double m = density.integral();
        for (const auto& a : atoms) m += a.mass;
        return m;
    }
};

struct NaturalInitialCondition {
    std::vector<Atom> atoms;   // Dirac components of q0
    GridFunction density;      // q0 on a state grid starting at 0
    GridFunction flux_history; // g0 on [xi0, 0]
    double xi0 = 0;

    double spatial_mass() const
    {
        double m = density.integral();
        for (const auto& a : atoms) m += a.mass;
        return m;
    }
    double history_mass() const { return flux_history.integral(); }
    double mass() const { return spatial_mass() + history_mass(); }

    void validate(double epsilon = -1.0) const
    {
        for (const auto& a : atoms) {
            if (!(a.location > 0.0)) throw std::invalid_argument("initial atom location must be > 0");
            if (!(a.mass >= 0.0 && a.mass <= 1.0)) throw std::invalid_argument("initial atom mass outside [0,1]");
        }
        for (double v : density.values)
            if (!(v >= 0.0)) throw std::invalid_argument("initial density must be >= 0");
        for (double v : flux_history.values)
            if (!(v >= 0.0)) throw std::invalid_argument("flux history must be >= 0");
        if (!density.empty() && density.x0 < 0.0) throw std::invalid_argument("initial density must live on x >= 0");
        if (xi0 > 0.0) throw std::invalid_argument("xi0 must be <= 0");
        if (mass() > 1.0 + 1e-9) throw std::invalid_argument("initial condition has total mass > 1");
        if (epsilon == 0.0 && (history_mass() > 0.0 || xi0 != 0.0))
            throw std::invalid_argument("zero refractory period admits no flux history");
    }

    static NaturalInitialCondition reset_atom(double mass, double lambda_reset)
    {
        NaturalInitialCondition ic;
        ic.atoms.push_back({mass, lambda_reset});
        return ic;
    }
};

// q0(x) = int kappa(t,x,L)/(1-H(t,L)) mu0(dt), g0(s) = int h(s+t,L)/(1-H(t,L)) mu0(dt) on [xi0,0),
// with xi0 the root of xi0 + lambda int_{xi0}^0 g0 = -nu eps.
inline NaturalInitialCondition construct_natural_ic(const ResetAgeMeasure& mu0, double epsilon, double nu,
                                                    double lambda, double lambda_reset, double dx = 1e-3)
{
    if (mu0.mass() > 1.0 + 1e-12) throw std::invalid_argument("construct_natural_ic: mass exceeds 1");
    if (!(epsilon >= 0.0 && nu > 0.0 && lambda > 0.0 && lambda_reset > 0.0 && dx > 0.0))
        throw std::invalid_argument("construct_natural_ic: bad parameters");
    const double L = lambda_reset;

    // cohorts (weight, age); a zero age collapses onto the reset value
    std::vector<Atom> cohorts;
    NaturalInitialCondition ic;
    double atom_at_reset = 0.0;
    for (const auto& a : mu0.atoms) {
        if (a.location < 0.0) throw std::invalid_argument("construct_natural_ic: negative age");
        if (a.location == 0.0) atom_at_reset += a.mass;
        else cohorts.push_back(a);
    }
    const auto& d = mu0.density;
    for (std::size_t i = 0; i < d.size(); ++i) {
        double w = d.values[i] * d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0);
        if (w <= 0.0) continue;
        const double t = d.x(i);
        if (t <= 0.0) atom_at_reset += w;
        else cohorts.push_back({w, t});
    }
    if (atom_at_reset > 0.0) ic.atoms.push_back({atom_at_reset, L});

    double tmax = 0.0;
    for (const auto& c : cohorts) tmax = std::max(tmax, c.location);
    if (!cohorts.empty()) {
        const double xmax = L + tmax + 10.0 * std::sqrt(tmax) + 1.0;
        const std::size_t nx = static_cast<std::size_t>(std::ceil(xmax / dx)) + 1;
        ic.density.x0 = 0.0;
        ic.density.step = dx;
        ic.density.values.assign(nx, 0.0);
        for (const auto& c : cohorts) {
            const double w = c.mass / fpt_survival(c.location, L);
            for (std::size_t i = 1; i < nx; ++i) ic.density.values[i] += w * heat_kernel(c.location, ic.density.x(i), L);
        }
    }

    if (epsilon > 0.0 && !cohorts.empty()) {
        auto g0 = [&](double s) {
            double v = 0.0;
            for (const auto& c : cohorts) {
                const double u = s + c.location;
                if (u > 0.0) v += c.mass * fpt_density(u, L) / fpt_survival(c.location, L);
            }
            return v;
        };
        // march backward from 0 until xi + lambda int_xi^0 g0 + nu eps <= 0
        const double ds = dx;
        std::vector<double> vals{g0(-0.0)};
        double integral = 0.0, s = 0.0;
        const double target = nu * epsilon;
        while (true) {
            const double sn = s - ds;
            const double vn = g0(sn);
            const double inc = 0.5 * (vals.back() + vn) * ds;
            const double f_old = s + lambda * integral + target;
            const double f_new = sn + lambda * (integral + inc) + target;
            if (f_new <= 0.0) {
                // linear root inside the last cell
                const double frac = f_old / (f_old - f_new);
                const double xi0 = s - frac * ds;
                vals.push_back(g0(xi0));
                std::reverse(vals.begin(), vals.end());
                // rebuild on a uniform grid ending exactly at 0
                const std::size_t m = vals.size() - 1;
                ic.xi0 = xi0;
                ic.flux_history.x0 = xi0;
                ic.flux_history.step = -xi0 / static_cast<double>(m);
                ic.flux_history.values.resize(m + 1);
                for (std::size_t i = 0; i <= m; ++i) ic.flux_history.values[i] = g0(ic.flux_history.x(i));
                break;
            }
            if (lambda * vn >= 1.0)
                throw std::invalid_argument("construct_natural_ic: flux history exceeds 1/lambda");
            vals.push_back(vn);
            integral += inc;
            s = sn;
            if (vals.size() > 100000000) throw std::runtime_error("construct_natural_ic: xi0 search diverged");
        }
    } else if (epsilon > 0.0) {
        ic.xi0 = -nu * epsilon;
    }
    return ic;
}

struct FluxSolution {
    double step = 0;
    std::vector<double> G, g, dg; // nodes k*step, k = 0..n
    GridFunction history;         // g0 on [xi0, 0]

    std::size_t size() const { return g.size(); }
    double sigma(std::size_t k) const { return step * static_cast<double>(k); }
    double horizon() const { return g.empty() ? 0.0 : sigma(g.size() - 1); }

    // cubic Hermite in g, its exact integral for G
    double g_at(double s) const
    {
        if (s < 0.0) return history(s);
        std::size_t i;
        double t;
        locate(s, i, t);
        return hermite(g[i], dg[i], g[i + 1], dg[i + 1], t);
    }
    double dg_at(double s) const
    {
        if (s < 0.0) return 0.0;
        std::size_t i;
        double t;
        locate(s, i, t);
        const double t2 = t * t;
        return (g[i] * (6 * t2 - 6 * t) + step * dg[i] * (3 * t2 - 4 * t + 1) + g[i + 1] * (-6 * t2 + 6 * t)
                + step * dg[i + 1] * (3 * t2 - 2 * t)) / step;
    }
    double G_at(double s) const
    {
        if (s < 0.0) {
            if (history.empty() || s <= history.x0) return -history.integral();
            return history.cumulative(s) - history.integral();
        }
        std::size_t i;
        double t;
        locate(s, i, t);
        return G[i] + hermite_integral(g[i], dg[i], g[i + 1], dg[i + 1], t);
    }

    double hermite(double g0, double d0, double g1, double d1, double t) const
    {
        const double t2 = t * t, t3 = t2 * t;
        return g0 * (2 * t3 - 3 * t2 + 1) + step * d0 * (t3 - 2 * t2 + t) + g1 * (-2 * t3 + 3 * t2)
            + step * d1 * (t3 - t2);
    }
    double hermite_integral(double g0, double d0, double g1, double d1, double t) const
    {
        const double t2 = t * t, t3 = t2 * t, t4 = t3 * t;
        return step * (g0 * (0.5 * t4 - t3 + t) + step * d0 * (0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2)
                       + g1 * (-0.5 * t4 + t3) + step * d1 * (0.25 * t4 - t3 / 3.0));
    }

private:
    void locate(double s, std::size_t& i, double& t) const
    {
        if (g.size() < 2) throw std::out_of_range("FluxSolution: empty");
        const double u = s / step;
        if (u > static_cast<double>(g.size() - 1) + 1e-9) throw std::out_of_range("FluxSolution: beyond horizon");
        i = std::min(static_cast<std::size_t>(u), g.size() - 2);
        t = u - static_cast<double>(i);
    }
};

struct ResetJump {
    double R = 0;    // reset time
    double from = 0; // xi(R-)
    double to = 0;   // xi(R)
};

// xi as identity, constant delay, or node values plus explicit jumps.
class BackwardFunction {
public:
    enum class Kind { identity, constant_delay, gridded };

    static BackwardFunction identity() { return BackwardFunction(Kind::identity); }
    static BackwardFunction constant_delay(double d)
    {
        if (!(d >= 0.0)) throw std::invalid_argument("delay must be >= 0");
        BackwardFunction b(Kind::constant_delay);
        b.delay_ = d;
        return b;
    }
    static BackwardFunction gridded(double step, std::vector<double> values, std::vector<ResetJump> jumps)
    {
        BackwardFunction b(Kind::gridded);
        b.step_ = step;
        b.values_ = std::move(values);
        b.jumps_ = std::move(jumps);
        for (std::size_t i = 0; i < b.values_.size(); ++i)
            if (b.values_[i] > step * static_cast<double>(i) + 1e-12)
                throw std::invalid_argument("backward function must satisfy xi(s) <= s");
        return b;
    }

    Kind kind() const { return kind_; }
    double delay() const { return delay_; }
    double step() const { return step_; }
    const std::vector<double>& values() const { return values_; }
    const std::vector<ResetJump>& jumps() const { return jumps_; }
    double xi0() const
    {
        switch (kind_) {
        case Kind::identity: return 0.0;
        case Kind::constant_delay: return -delay_;
        default: return values_.empty() ? 0.0 : values_.front();
        }
    }

    double operator()(double s) const
    {
        switch (kind_) {
        case Kind::identity: return s;
        case Kind::constant_delay: return s - delay_;
        default: break;
        }
        if (s < 0.0) throw std::domain_error("backward function evaluated before 0");
        const double u = s / step_;
        if (u > static_cast<double>(values_.size() - 1) + 1e-9) throw std::out_of_range("backward function: beyond grid");
        const std::size_t i = std::min(static_cast<std::size_t>(u), values_.size() - 2);
        const double f = u - static_cast<double>(i);
        const double lo = step_ * static_cast<double>(i), hi = lo + step_;
        for (const auto& j : jumps_)
            if (j.R > lo && j.R <= hi) return s < j.R ? values_[i] : values_[i + 1];
        return values_[i] + f * (values_[i + 1] - values_[i]);
    }

    // value at grid node k of a grid with the given step (exact for gridded data)
    double at_node(std::size_t k, double step) const
    {
        if (kind_ == Kind::gridded) return values_.at(k);
        return (*this)(step * static_cast<double>(k));
    }

private:
    explicit BackwardFunction(Kind k) : kind_(k) {}
    Kind kind_;
    double delay_ = 0;
    double step_ = 0;
    std::vector<double> values_;
    std::vector<ResetJump> jumps_;
};

// State at time S seen through the Markov property:
//   int H(b,y) q(S,y) dy = int [H(S+b,x)-H(S,x)] q0(dx) + int [H(S-t+b,L)-H(S-t,L)] dK(t).
class MarkovState {
public:
    MarkovState(const NaturalInitialCondition& ic, double lambda_reset, double S, std::vector<Atom> resets)
        : ic_(ic), L_(lambda_reset), S_(S), resets_(std::move(resets))
    {
        for (const auto& r : resets_) base_.push_back(fpt_survival(std::max(S_ - r.location, 0.0), L_));
        for (const auto& a : ic_.atoms) ic_base_.push_back(fpt_survival(S_, a.location));
        const auto& d = ic_.density;
        for (std::size_t i = 0; i < d.size(); ++i)
            dens_base_.push_back(d.x(i) > 0.0 ? fpt_survival(S_, d.x(i)) : 0.0);
    }

    double absorbed(double b) const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i < ic_.atoms.size(); ++i)
            acc += ic_.atoms[i].mass * (ic_base_[i] - fpt_survival(S_ + b, ic_.atoms[i].location));
        const auto& d = ic_.density;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double x = d.x(i);
            if (x <= 0.0 || d.values[i] == 0.0) continue;
            const double w = d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0);
            acc += w * d.values[i] * (dens_base_[i] - fpt_survival(S_ + b, x));
        }
        for (std::size_t i = 0; i < resets_.size(); ++i)
            acc += resets_[i].mass * (base_[i] - fpt_survival(std::max(S_ - resets_[i].location, 0.0) + b, L_));
        return acc;
    }

    double mass() const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i < ic_.atoms.size(); ++i) acc += ic_.atoms[i].mass * ic_base_[i];
        const auto& d = ic_.density;
        for (std::size_t i = 0; i < d.size(); ++i)
            acc += d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0) * d.values[i] * dens_base_[i];
        for (std::size_t i = 0; i < resets_.size(); ++i) acc += resets_[i].mass * base_[i];
        return acc;
    }

    double time() const { return S_; }

private:
    NaturalInitialCondition ic_;
    double L_, S_;
    std::vector<Atom> resets_; // masses at elapsed-reset locations (time of reset)
    std::vector<double> base_, ic_base_, dens_base_;
};

// Explicit marcher. The caller supplies, for each new node, the value of
// K = G(xi(sigma_n)) and any reset atoms landing in (sigma_{n-1}, sigma_n].
struct ResetUpdate {
    double K = 0;
    std::vector<Atom> atoms; // location = reset time
};

class FluxMarcher {
public:
    FluxMarcher(const NaturalInitialCondition& ic, double lambda_reset, double step, double K0)
        : ic_(ic), L_(lambda_reset), step_(step)
    {
        if (!(step > 0.0)) throw std::invalid_argument("FluxMarcher: step must be > 0");
        sol_.step = step;
        sol_.history = ic.flux_history;
        double g0 = 0.0;
        // flux at 0+ of the spatial part is q0'(0)/2
        const auto& d = ic_.density;
        if (d.size() >= 2 && d.x0 == 0.0) g0 = 0.5 * (d.values[1] - d.values[0]) / d.step;
        sol_.g.push_back(g0);
        sol_.G.push_back(0.0);
        sol_.dg.push_back(0.0);
        Kc_.push_back(K0);
    }

    const FluxSolution& solution() const { return sol_; }
    std::size_t last() const { return sol_.g.size() - 1; }
    double sigma(std::size_t k) const { return step_ * static_cast<double>(k); }
    double lambda_reset() const { return L_; }
    const std::vector<Atom>& reset_atoms() const { return atoms_; }
    double atom_total() const { return atom_total_; }
    const std::vector<double>& Kc() const { return Kc_; }
    double K_total(std::size_t k) const
    {
        double a = 0.0;
        for (const auto& at : atoms_)
            if (at.location <= sigma(k)) a += at.mass;
        return Kc_[k] + a;
    }

    double G_at(double s) const { return sol_.G_at(s); }
    double g_at(double s) const { return sol_.g_at(s); }

    // Advance one node. Predictor uses the previous cell increment.
    template <class Reset>
    void advance(Reset&& reset)
    {
        const std::size_t n = sol_.g.size();
        ensure_tables(n);
        const double s = sigma(n);
        const double I = initial_flux(s, false) ;
        const double dI = initial_flux(s, true);
        double conv = 0.0, dconv = 0.0;
        {
            const double* c = cell_.data();
            const double* hb = hbar_.data() + (n - 1);
            const double* dhb = dhbar_.data() + (n - 1);
            // the kernel decays like exp(-sigma/2); cells older than its support drop out
            const std::size_t j0 = n - 1 > support_ ? n - 1 - support_ : 0;
            for (std::size_t j = j0; j + 1 < n; ++j) {
                conv += hb[-static_cast<std::ptrdiff_t>(j)] * c[j];
                dconv += dhb[-static_cast<std::ptrdiff_t>(j)] * c[j];
            }
        }
        double atom_part = 0.0, datom_part = 0.0;
        for (const auto& a : atoms_) {
            const double u = s - a.location;
            if (u > 0.0) {
                atom_part += a.mass * fpt_density(u, L_);
                datom_part += a.mass * fpt_density_d1(u, L_);
            }
        }
        const double Kprev = Kc_.back();
        double m_last = n >= 2 ? Kc_[n - 1] - Kc_[n - 2] : 0.0;
        std::vector<Atom> pending;
        sol_.g.push_back(0.0);
        sol_.dg.push_back(0.0);
        sol_.G.push_back(0.0);
        Kc_.push_back(Kprev);
        for (int it = 0; it < 8; ++it) {
            double gn = I + atom_part + conv + hbar_[0] * m_last;
            double dgn = dI + datom_part + dconv + dhbar_[0] * m_last;
            for (const auto& a : pending) {
                const double u = s - a.location;
                if (u > 0.0) {
                    gn += a.mass * fpt_density(u, L_);
                    dgn += a.mass * fpt_density_d1(u, L_);
                }
            }
            sol_.g[n] = gn;
            sol_.dg[n] = dgn;
            sol_.G[n] = sol_.G[n - 1] + 0.5 * step_ * (sol_.g[n - 1] + gn)
                + step_ * step_ / 12.0 * (sol_.dg[n - 1] - dgn);
            ResetUpdate up = reset(*this, n);
            double new_atoms = 0.0;
            for (const auto& a : up.atoms) new_atoms += a.mass;
            const double Kc_new = up.K - atom_total_ - new_atoms;
            const double m_new = Kc_new - Kprev;
            pending = std::move(up.atoms);
            Kc_[n] = Kc_new;
            const bool done = std::abs(m_new - m_last) <= 1e-15 * (1.0 + std::abs(m_new)) && it > 0;
            m_last = m_new;
            if (done) break;
        }
        for (const auto& a : pending) {
            atoms_.push_back(a);
            atom_total_ += a.mass;
        }
        cell_.push_back(Kc_[n] - Kc_[n - 1]);
    }

    // Undo the last node (used when a trigger is found inside the last cell).
    void retreat()
    {
        const std::size_t n = last();
        if (n == 0) return;
        while (!atoms_.empty() && atoms_.back().location > sigma(n - 1)) {
            atom_total_ -= atoms_.back().mass;
            atoms_.pop_back();
        }
        sol_.g.pop_back();
        sol_.dg.pop_back();
        sol_.G.pop_back();
        Kc_.pop_back();
        cell_.pop_back();
    }

    // Markov view of the state at time S in (sigma_{n-1}, sigma_n], n = last(),
    // with the continuous reset cumulative at S given.
    MarkovState markov_state(double S, double Kc_at_S) const
    {
        std::vector<Atom> r;
        const std::size_t n = static_cast<std::size_t>(std::floor(S / step_));
        const std::size_t full = std::min(n, Kc_.size() - 1);
        r.reserve(full + atoms_.size() + 1);
        for (std::size_t j = 0; j < full; ++j) {
            const double m = Kc_[j + 1] - Kc_[j];
            if (m != 0.0) r.push_back({m, sigma(j) + 0.5 * step_});
        }
        const double part = Kc_at_S - Kc_[full];
        if (part != 0.0) r.push_back({part, 0.5 * (sigma(full) + S)});
        for (const auto& a : atoms_)
            if (a.location <= S) r.push_back(a);
        return MarkovState(ic_, L_, S, std::move(r));
    }

    double initial_flux(double s, bool derivative) const
    {
        if (s <= 0.0) return derivative ? 0.0 : sol_.g[0];
        double v = 0.0;
        for (const auto& a : ic_.atoms) v += a.mass * (derivative ? fpt_density_d1(s, a.location) : fpt_density(s, a.location));
        const auto& d = ic_.density;
        if (d.size() >= 2) {
            const double w = 38.6 * std::sqrt(s) + 1.0;
            const double lo = std::max(d.x0, s - w), hi = std::min(d.end(), s + w);
            if (lo < hi) {
                const std::size_t i0 = static_cast<std::size_t>(std::floor((lo - d.x0) / d.step));
                const std::size_t i1 = std::min(d.size() - 1, static_cast<std::size_t>(std::ceil((hi - d.x0) / d.step)));
                for (std::size_t i = i0; i <= i1; ++i) {
                    const double x = d.x(i);
                    if (x <= 0.0 || d.values[i] == 0.0) continue;
                    const double wgt = d.step * ((i == 0 || i + 1 == d.size()) ? 0.5 : 1.0);
                    v += wgt * d.values[i] * (derivative ? fpt_density_d1(s, x) : fpt_density(s, x));
                }
            }
        }
        return v;
    }

private:
    void ensure_tables(std::size_t n)
    {
        while (hbar_.size() < n + 1) {
            const std::size_t k = hbar_.size();
            const double a = sigma(k), b = sigma(k + 1);
            hbar_.push_back((fpt_cdf(b, L_) - fpt_cdf(a, L_)) / step_);
            dhbar_.push_back((fpt_density(b, L_) - fpt_density(a, L_)) / step_);
            hmax_ = std::max(hmax_, hbar_.back());
            dhmax_ = std::max(dhmax_, std::abs(dhbar_.back()));
            if (support_ == npos && b > 4.0 * (1.0 + L_ * L_) && hbar_.back() < 1e-20 * hmax_
                && std::abs(dhbar_.back()) < 1e-20 * dhmax_)
                support_ = k;
        }
    }

    NaturalInitialCondition ic_;
    double L_, step_;
    FluxSolution sol_;
    std::vector<double> Kc_; // continuous part of G o xi at nodes
    std::vector<double> cell_; // Kc increments per cell
    std::vector<Atom> atoms_;
    double atom_total_ = 0.0;
    std::vector<double> hbar_, dhbar_;
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t support_ = npos;
    double hmax_ = 0.0, dhmax_ = 0.0;
};

inline void check_flux_bound(const FluxSolution& f, double bound, double slack = 1.1)
{
    for (std::size_t k = 0; k < f.g.size(); ++k)
        if (f.g[k] > slack * bound)
            throw SolverError("flux_bound", "flux exceeds the a-priori bound at sigma = " + std::to_string(f.sigma(k)));
}

// Solve the flux equation for a prescribed backward function.
inline FluxSolution solve_flux(const NaturalInitialCondition& ic, const BackwardFunction& xi, double step,
                               double horizon, double lambda_reset)
{
    ic.validate();
    if (!(step > 0.0 && horizon > 0.0)) throw std::invalid_argument("solve_flux: bad grid");
    const std::size_t n = static_cast<std::size_t>(std::llround(horizon / step));
    if (ic.mass() == 0.0) {
        FluxSolution z;
        z.step = step;
        z.G.assign(n + 1, 0.0);
        z.g.assign(n + 1, 0.0);
        z.dg.assign(n + 1, 0.0);
        return z;
    }
    const double x0 = xi.xi0();
    FluxSolution hist;
    hist.step = step;
    hist.history = ic.flux_history;
    const double K0 = x0 < 0.0 ? hist.G_at(x0) : 0.0;
    FluxMarcher m(ic, lambda_reset, step, K0);
    auto reset = [&](const FluxMarcher& fm, std::size_t k) {
        ResetUpdate up;
        const double s = fm.sigma(k), sp = fm.sigma(k - 1);
        const double x = xi.at_node(k, step);
        up.K = fm.G_at(std::min(x, s));
        for (const auto& j : xi.jumps())
            if (j.R > sp && j.R <= s) up.atoms.push_back({fm.G_at(j.to) - fm.G_at(j.from), j.R});
        return up;
    };
    for (std::size_t k = 1; k <= n; ++k) m.advance(reset);
    FluxSolution out = m.solution();
    check_flux_bound(out, apriori_bounds(lambda_reset).A * ic.mass());
    return out;
}

struct DensitySnapshot {
    double sigma = 0;
    GridFunction density;
    std::vector<Atom> atoms; // undispersed mass (at sigma = 0 or exactly at a reset)
    double active_mass = 0;
    double inactive_fraction = 0; // ic mass minus active mass
};

// q(sigma, .) by Duhamel's formula on a uniform state grid.
inline DensitySnapshot density_at(const NaturalInitialCondition& ic, const FluxSolution& flux,
                                  const BackwardFunction& xi, double sigma, double lambda_reset, double dx = 0.0)
{
    if (sigma < 0.0 || sigma > flux.horizon() + 1e-12) throw std::out_of_range("density_at: sigma outside flux grid");
    const double L = lambda_reset;
    const double step = flux.step;
    if (dx <= 0.0) dx = step;
    DensitySnapshot snap;
    snap.sigma = sigma;
    if (sigma == 0.0) {
        snap.atoms = ic.atoms;
        snap.density = ic.density;
        snap.active_mass = ic.spatial_mass();
        snap.inactive_fraction = ic.mass() - snap.active_mass;
        return snap;
    }
    if (dx > 0.25 * std::sqrt(sigma)) throw std::invalid_argument("density_at: state grid too coarse for sigma");
    double xmax = L + sigma + 6.0 * std::sqrt(sigma) + 1.0;
    for (const auto& a : ic.atoms) xmax = std::max(xmax, a.location + 6.0 * std::sqrt(sigma) + 1.0);
    if (!ic.density.empty()) xmax = std::max(xmax, ic.density.end() + 6.0 * std::sqrt(sigma));
    const std::size_t nx = static_cast<std::size_t>(std::ceil(xmax / dx)) + 1;
    snap.density.x0 = 0.0;
    snap.density.step = dx;
    auto& q = snap.density.values;
    q.assign(nx, 0.0);

    // reset measure: exact increments of G o xi at nodes, jumps as atoms
    const std::size_t nfull = static_cast<std::size_t>(std::floor(sigma / step + 1e-12));
    std::vector<double> K(nfull + 1);
    std::vector<Atom> jumps;
    for (const auto& j : xi.jumps())
        if (j.R <= sigma) jumps.push_back({flux.G_at(j.to) - flux.G_at(j.from), j.R});
    for (std::size_t k = 0; k <= nfull; ++k) {
        const double s = step * static_cast<double>(k);
        double a = 0.0;
        for (const auto& j : jumps)
            if (j.location <= s) a += j.mass;
        K[k] = flux.G_at(std::min(xi.at_node(k, step), s)) - a;
    }
    std::vector<Atom> cells;
    for (std::size_t k = 0; k < nfull; ++k) cells.push_back({K[k + 1] - K[k], step * (k + 0.5)});
    const double send = step * static_cast<double>(nfull);
    if (sigma > send + 1e-14) {
        double a = 0.0;
        for (const auto& j : jumps)
            if (j.location <= sigma) a += j.mass;
        const double Ks = flux.G_at(std::min(xi(sigma), sigma)) - a;
        cells.push_back({Ks - K[nfull], 0.5 * (send + sigma)});
    }

    for (std::size_t i = 1; i < nx; ++i) {
        const double y = snap.density.x(i);
        double v = 0.0;
        for (const auto& a : ic.atoms) v += a.mass * heat_kernel(sigma, y, a.location);
        const auto& d = ic.density;
        for (std::size_t j = 0; j < d.size(); ++j) {
            const double x = d.x(j);
            if (x <= 0.0 || d.values[j] == 0.0) continue;
            v += d.step * ((j + 1 == d.size()) ? 0.5 : 1.0) * d.values[j] * heat_kernel(sigma, y, x);
        }
        for (const auto& c : cells)
            if (c.mass != 0.0 && sigma - c.location > 0.0) v += c.mass * heat_kernel(sigma - c.location, y, L);
        for (const auto& j : jumps)
            if (sigma - j.location > 0.0) v += j.mass * heat_kernel(sigma - j.location, y, L);
        q[i] = v;
    }
    for (const auto& j : jumps)
        if (j.location == sigma) snap.atoms.push_back({j.mass, L});
    snap.active_mass = snap.density.integral();
    for (const auto& a : snap.atoms) snap.active_mass += a.mass;
    snap.inactive_fraction = ic.mass() - snap.active_mass;
    return snap;
}

} // namespace mfblowup
