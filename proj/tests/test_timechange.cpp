#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include <mfblowup/timechange.hpp>

using namespace mfblowup;

namespace {

// p = H(lambda p, 1) by bisection on the raw closed form (no erfcx);
// the e^{2x} factor is harmless at x = 1.
double scalar_blowup_root(double lambda)
{
    auto H = [](double s) {
        const double r = std::sqrt(2.0 * s);
        return 0.5 * (std::erfc((1.0 - s) / r) + std::exp(2.0) * std::erfc((1.0 + s) / r));
    };
    double lo = 0.5, hi = 1.0; // p - H(lambda p) < 0 at 1/2 for lambda >= 20, > 0 at 1
    for (int i = 0; i < 200; ++i) {
        const double m = 0.5 * (lo + hi);
        (m - H(lambda * m) > 0.0 ? hi : lo) = m;
    }
    return 0.5 * (lo + hi);
}

// smallest root of h(s, 1) = 1/lambda below the peak
double trigger_root(double lambda)
{
    double lo = 1e-3, hi = (-3.0 + std::sqrt(13.0)) / 2.0;
    for (int i = 0; i < 200; ++i) {
        const double m = 0.5 * (lo + hi);
        const double h = std::exp(-(1.0 - m) * (1.0 - m) / (2.0 * m)) / std::sqrt(2.0 * std::numbers::pi * m * m * m);
        (h >= 1.0 / lambda ? hi : lo) = m;
    }
    return hi;
}

// Blowup size from the state evolved to S from delta_1: the atom's survivors
// plus the mass that fired in (0, S) and re-entered at 1 instantly
// (second-generation resets are below 1e-12 at S ~ 0.07).
double first_blowup_size(double S, double lambda)
{
    namespace bq = boost::math::quadrature;
    auto absorbed = [&](double b) {
        const double resets = bq::gauss_kronrod<double, 61>::integrate(
            [&](double t) { return fpt_density(t, 1.0) * (fpt_cdf(S - t + b, 1.0) - fpt_cdf(S - t, 1.0)); }, 0.0, S,
            10, 1e-14);
        return fpt_cdf(S + b, 1.0) - fpt_cdf(S, 1.0) + resets;
    };
    double lo = 0.5, hi = 1.0;
    for (int i = 0; i < 60; ++i) {
        const double m = 0.5 * (lo + hi);
        (m - absorbed(lambda * m) > 0.0 ? hi : lo) = m;
    }
    return 0.5 * (lo + hi);
}

ModelParams params(double lambda, double eps)
{
    ModelParams p;
    p.coupling = lambda;
    p.epsilon = eps;
    return p;
}

const PmfSolution& pmf20()
{
    static const PmfSolution s = [] {
        SolverOptions o;
        o.horizon = 70.0;
        return solve_global_pmf(params(20.0, 0.0), NaturalInitialCondition::reset_atom(1.0, 1.0), 0, o);
    }();
    return s;
}

const TimeChange& dpmf20()
{
    static const TimeChange tc = [] {
        SolverOptions o;
        o.horizon = 70.0;
        return solve_global_dpmf(params(20.0, 0.01), NaturalInitialCondition::reset_atom(1.0, 1.0), o);
    }();
    return tc;
}

void expect_running_max_identity(const TimeChange& tc)
{
    double gmax = 0.0;
    for (double v : tc.flux.g) gmax = std::max(gmax, v);
    const double tol = 2.0 * tc.step * (1.0 + tc.params.coupling * gmax);
    double m = tc.xi0 / tc.params.nu;
    for (std::size_t k = 0; k < tc.Psi.size(); ++k) {
        m = std::max(m, (tc.sigma(k) - tc.params.coupling * tc.flux.G[k]) / tc.params.nu);
        ASSERT_NEAR(tc.Psi[k], m, tol) << "sigma " << tc.sigma(k);
    }
}

void expect_exact_plateaus(const TimeChange& tc)
{
    for (const auto& e : tc.episodes)
        for (std::size_t k = 0; k < tc.Psi.size(); ++k) {
            const double s = tc.sigma(k);
            if (s >= e.S && s < e.U) {
                ASSERT_EQ(tc.Psi[k], e.T) << s;
            }
        }
    for (std::size_t k = 1; k < tc.Psi.size(); ++k) {
        const double q = (tc.Psi[k] - tc.Psi[k - 1]) / tc.step;
        ASSERT_GE(q, 0.0) << tc.sigma(k);
        ASSERT_LE(q, 1.0 / tc.params.nu + 1e-9) << tc.sigma(k);
    }
}

} // namespace

// ------------------------------------------------------------- trigger

TEST(DetectTrigger, FirstCrossingOfInverseCoupling)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::identity(), 1e-3, 1.0, 1.0);
    const auto t = detect_trigger(f, 20.0);
    ASSERT_TRUE(t.has_value());
    EXPECT_NEAR(t->S, 0.07143, 1e-3);
    EXPECT_NEAR(t->S, trigger_root(20.0), 1e-6);
    EXPECT_GT(t->dg, 0.0);
    EXPECT_TRUE(t->full);
}

TEST(DetectTrigger, NoneBelowPeakForWeakCoupling)
{
    const KernelConstants kc = kernel_constants(1.0);
    const double lambda = 0.9 / kc.h_star;
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::identity(), 1e-3, kc.sigma_star, 1.0);
    EXPECT_FALSE(detect_trigger(f, lambda).has_value());
}

TEST(DetectTrigger, StartsSearchAtGivenTime)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::identity(), 1e-3, 1.0, 1.0);
    const auto t = detect_trigger(f, 20.0, 0.5);
    ASSERT_TRUE(t.has_value()); // already above the level at 0.5
    EXPECT_DOUBLE_EQ(t->S, 0.5);
}

// --------------------------------------------------------- blowup size

TEST(BlowupSize, MatchesScalarOracle)
{
    SpatialState q;
    q.atoms.push_back({1.0, 1.0});
    const double p20 = solve_blowup_size(q, 20.0);
    EXPECT_NEAR(p20, scalar_blowup_root(20.0), 1e-8);
    EXPECT_NEAR(p20, 0.99999905519024431724, 1e-9);
    EXPECT_GT(p20, 0.999);
    EXPECT_LT(p20, 1.0);
}

TEST(BlowupSize, MonotoneInCoupling)
{
    SpatialState q;
    q.atoms.push_back({1.0, 1.0});
    const double p20 = solve_blowup_size(q, 20.0), p40 = solve_blowup_size(q, 40.0);
    EXPECT_GE(p40, p20);
    EXPECT_NEAR(p40, scalar_blowup_root(40.0), 1e-8);
}

TEST(BlowupSize, FarMassGivesNoSynchrony)
{
    SpatialState q;
    q.atoms.push_back({0.6, 50.0});
    q.atoms.push_back({0.4, 80.0});
    EXPECT_EQ(solve_blowup_size(q, 1.0), 0.0);
}

TEST(BlowupSize, RootPropertyOnRandomStates)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> loc(0.05, 2.0), w(0.1, 1.0), lam(5.0, 60.0);
    for (int trial = 0; trial < 40; ++trial) {
        SpatialState q;
        double tot = 0.0;
        for (int i = 0; i < 3; ++i) {
            q.atoms.push_back({w(rng), loc(rng)});
            tot += q.atoms.back().mass;
        }
        for (auto& a : q.atoms) a.mass /= tot;
        const double l = lam(rng);
        const double p = solve_blowup_size(q, l);
        if (p == 0.0) continue;
        // F(p) = p - absorbed(l p) changes sign from <= 0 to > 0 at p
        EXPECT_GT(p - q.absorbed(l * p), 0.0) << trial;
        const double below = std::max(p - 1e-9, 0.0);
        EXPECT_LE(below - q.absorbed(l * below), 1e-9) << trial;
        EXPECT_LE(p, 1.0);
    }
}

TEST(BlowupSize, RejectsNonPositiveCoupling)
{
    SpatialState q;
    q.atoms.push_back({1.0, 1.0});
    EXPECT_THROW(solve_blowup_size(q, 0.0), std::invalid_argument);
}

// ------------------------------------------------------------------ PMF

TEST(Pmf, FirstTriggerAndFrequency)
{
    const auto& tc = pmf20().tc;
    ASSERT_FALSE(tc.episodes.empty());
    const auto& e = tc.episodes.front();
    EXPECT_NEAR(e.S, trigger_root(20.0), 1e-6);
    EXPECT_GT(e.dg_at_S, 0.0);
    EXPECT_NEAR(1.0 / e.T, 16.18, 0.05);
    // T1 = (S1 - lambda H(S1, 1)) / nu with nothing reset before S1
    EXPECT_NEAR(e.T, e.S - 20.0 * fpt_cdf(e.S, 1.0), 1e-9);
    EXPECT_NEAR(e.pi, first_blowup_size(e.S, 20.0), 1e-8);
    EXPECT_DOUBLE_EQ(e.R, e.U);
}

TEST(Pmf, MassBookkeepingAndExitConsistency)
{
    const auto& s = pmf20();
    ASSERT_GE(s.tc.episodes.size(), 3u);
    for (const auto& r : s.records) EXPECT_NEAR(r.initial_mass, 1.0, 1e-9);
    for (const auto& e : s.tc.episodes) {
        EXPECT_NEAR(e.U - e.S, 20.0 * e.pi, 1e-12);
        if (!std::isnan(e.exit_mass)) {
            EXPECT_NEAR((e.U - e.S) / 20.0, e.exit_mass, 1e-8);
        }
    }
}

TEST(Pmf, PeriodSettles)
{
    const auto& eps = pmf20().tc.episodes;
    ASSERT_GE(eps.size(), 3u);
    for (std::size_t k = 1; k < eps.size(); ++k) {
        const double gap = eps[k].T - eps[k - 1].T;
        EXPECT_GT(gap, 0.0);
        EXPECT_NEAR(gap, eps[0].T, 1e-6);
    }
}

TEST(Pmf, RunningMaxIdentityAndPlateaus)
{
    expect_running_max_identity(pmf20().tc);
    expect_exact_plateaus(pmf20().tc);
}

TEST(Pmf, InverseTimeChangeJumps)
{
    const auto& tc = pmf20().tc;
    const auto Phi = invert_timechange(tc);
    EXPECT_NEAR(Phi(0.0), 0.0, 1e-12);
    for (const auto& e : tc.episodes) {
        if (e.U > tc.horizon()) break;
        EXPECT_NEAR(Phi(e.T), e.U, 1e-12);
        EXPECT_NEAR(tc.phi_left(e.T), e.S, 1e-12);
        EXPECT_NEAR(Phi(e.T) - tc.phi_left(e.T), 20.0 * e.pi, 2.0 * tc.step);
    }
    EXPECT_THROW(Phi(tc.Psi.back() + 1.0), std::out_of_range);
}

TEST(Pmf, InversePairOnStretches)
{
    const auto& tc = pmf20().tc;
    for (std::size_t k = 1; k < tc.Psi.size(); k += 211) {
        const double s = tc.sigma(k);
        bool plateau = false;
        for (const auto& e : tc.episodes) plateau = plateau || (s >= e.S && s <= e.U);
        if (plateau) continue;
        EXPECT_NEAR(tc.phi(tc.psi(s)), s, 2.0 * tc.step) << s;
    }
}

TEST(Pmf, BackwardFunctionIsIdentityBeforeFirstBlowup)
{
    const auto& tc = pmf20().tc;
    const auto xi = backward_function(tc, 0.0);
    const double S = tc.episodes.front().S;
    for (std::size_t k = 0; tc.sigma(k) < S; ++k) ASSERT_NEAR(xi.at_node(k, tc.step), tc.sigma(k), 1e-12);
    EXPECT_EQ(reset_time(tc, 0, 0.0), tc.episodes.front().U);
}

TEST(Pmf, LimitedEpisodesAndErrors)
{
    SolverOptions o;
    o.horizon = 70.0;
    const auto one = solve_global_pmf(params(20.0, 0.0), NaturalInitialCondition::reset_atom(1.0, 1.0), 1, o);
    EXPECT_EQ(one.tc.episodes.size(), 1u);
    EXPECT_THROW(solve_global_pmf(params(20.0, 0.01), NaturalInitialCondition::reset_atom(1.0, 1.0), 0, o),
                 std::invalid_argument);
}

TEST(Pmf, LargeCouplingPersistence)
{
    // pi_k >= 1 - C / lambda with C uniform in k; C is reported
    for (double lambda : {20.0, 40.0}) {
        SolverOptions o;
        o.horizon = 10.5 * lambda;
        const auto s = solve_global_pmf(params(lambda, 0.0), NaturalInitialCondition::reset_atom(1.0, 1.0), 10, o);
        ASSERT_GE(s.tc.episodes.size(), 10u);
        double C = 0.0;
        for (const auto& e : s.tc.episodes) {
            EXPECT_GT(e.pi, 0.5);
            C = std::max(C, lambda * (1.0 - e.pi));
        }
        RecordProperty("C_lambda_" + std::to_string(static_cast<int>(lambda)), std::to_string(C));
        EXPECT_LT(C, 1.0);
    }
}

// ----------------------------------------------------------------- dPMF

TEST(Dpmf, GlobalStructure)
{
    const auto& tc = dpmf20();
    const double nu_eps = 0.01;
    ASSERT_GE(tc.episodes.size(), 3u);
    for (std::size_t k = 0; k < tc.episodes.size(); ++k) {
        const auto& e = tc.episodes[k];
        EXPECT_GT(e.pi, 0.5);
        EXPECT_NEAR(e.U, e.S + 20.0 * e.pi, 1e-12);
        if (std::isnan(e.R)) continue;
        EXPECT_GT(e.R - e.U, nu_eps);
        EXPECT_LT(e.R - e.U, 2.0 * nu_eps);
        EXPECT_NEAR((e.U - e.S) / 20.0, tc.flux.G_at(e.U) - tc.flux.G_at(e.S), 1e-4);
        if (k + 1 < tc.episodes.size()) {
            EXPECT_LT(e.R, tc.episodes[k + 1].S);
            EXPECT_GE(tc.episodes[k + 1].T - e.T, 0.01);
        }
    }
}

// Mass that fired during the last eps of T before S1 is refractory and sits
// out the first blowup; H is the exact flux integral before any reset.
TEST(Dpmf, FirstBlowupMissesOnlyInTransitMass)
{
    const double pi0 = pmf20().tc.episodes[0].pi;
    for (double eps : {0.02, 0.01, 0.005, 0.0025}) {
        SolverOptions o;
        o.horizon = 1.0;
        const auto tc = solve_global_dpmf(params(20.0, eps), NaturalInitialCondition::reset_atom(1.0, 1.0), o);
        const auto& e = tc.episodes.at(0);
        const double x = tc.phi(e.T - eps);
        const double transit = fpt_cdf(e.S, 1.0) - fpt_cdf(x, 1.0);
        EXPECT_NEAR(1.0 - e.pi, (1.0 - pi0) + transit, 1e-8) << eps;
        // dPsi/dsigma -> 0 at S, so the window is much wider than nu eps
        EXPECT_GT(e.S - x, 1.4 * eps) << eps;
    }
}

TEST(Dpmf, RunningMaxIdentityAndPlateaus)
{
    expect_running_max_identity(dpmf20());
    expect_exact_plateaus(dpmf20());
}

TEST(Dpmf, BackwardDelayBounds)
{
    const auto& tc = dpmf20();
    const auto xi = backward_function(tc, 0.01);
    for (std::size_t k = 0; k < tc.Psi.size(); ++k) {
        const double eta = tc.sigma(k) - xi.at_node(k, tc.step);
        ASSERT_LE(eta, 20.0 + 0.01 + 1e-9) << tc.sigma(k);
        ASSERT_GE(eta, 0.01 - 1e-9) << tc.sigma(k);
    }
    // xi frozen on plateaus: eta grows with unit slope
    for (const auto& e : tc.episodes) {
        const std::size_t a = static_cast<std::size_t>(std::ceil(e.S / tc.step));
        const std::size_t b = std::min(tc.Psi.size() - 1, static_cast<std::size_t>(std::floor(e.U / tc.step)) - 1);
        for (std::size_t k = a + 1; k <= b; ++k) ASSERT_EQ(xi.at_node(k, tc.step), xi.at_node(a, tc.step));
    }
}

TEST(Dpmf, ResetTimeAgreesWithSolverAndScalesWithEpsilon)
{
    const auto& tc = dpmf20();
    const auto& e = tc.episodes.front();
    EXPECT_NEAR(reset_time(tc, 0, 0.01), e.R, 1e-9);

    SolverOptions o;
    o.horizon = 25.0;
    const auto half = solve_global_dpmf(params(20.0, 0.005), NaturalInitialCondition::reset_atom(1.0, 1.0), o);
    ASSERT_FALSE(half.episodes.empty());
    const auto& h = half.episodes.front();
    ASSERT_FALSE(std::isnan(h.R));
    EXPECT_NEAR((h.R - h.U) / (e.R - e.U), 0.5, 0.15);
}

TEST(Dpmf, SmallDelayPersistence)
{
    SolverOptions o;
    o.horizon = 70.0;
    const auto tc = solve_global_dpmf(params(20.0, 0.005), NaturalInitialCondition::reset_atom(1.0, 1.0), o);
    ASSERT_GE(tc.episodes.size(), 3u);
    double C = 0.0;
    for (const auto& e : tc.episodes) C = std::max(C, 20.0 * (1.0 - e.pi));
    RecordProperty("C_dpmf", std::to_string(C));
    EXPECT_LT(C, 1.0);
}

TEST(Dpmf, ArgumentErrors)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    EXPECT_THROW(solve_global_dpmf(params(20.0, 0.0), ic), std::invalid_argument);
    SolverOptions o;
    o.delta_sigma = 1e-2;
    EXPECT_THROW(solve_global_dpmf(params(20.0, 0.01), ic, o), std::invalid_argument);
    EXPECT_THROW(solve_global_dpmf(params(-1.0, 0.01), ic), std::invalid_argument);
    EXPECT_THROW(reset_time(dpmf20(), 99, 0.01), std::out_of_range);
}

TEST(Dpmf, WeakCouplingHasNoBlowup)
{
    SolverOptions o;
    o.horizon = 10.0;
    const auto tc = solve_global_dpmf(params(0.5, 0.01), NaturalInitialCondition::reset_atom(1.0, 1.0), o);
    EXPECT_TRUE(tc.episodes.empty());
    for (std::size_t k = 0; k < tc.Psi.size(); k += 100)
        EXPECT_NEAR(tc.Psi[k], tc.sigma(k) - 0.5 * tc.flux.G[k], 1e-12);
}
