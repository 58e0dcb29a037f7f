#include <cmath>
#include <random>
#include <stdexcept>

#include <gtest/gtest.h>

#include <mfblowup/renewal.hpp>

using namespace mfblowup;

namespace {

double sup_error_vs_series(double step, double delay, double horizon)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const auto xi = delay == 0.0 ? BackwardFunction::identity() : BackwardFunction::constant_delay(delay);
    const FluxSolution f = solve_flux(ic, xi, step, horizon, 1.0);
    double e = 0.0;
    for (std::size_t k = 1; k < f.size(); ++k)
        e = std::max(e, std::abs(f.g[k] - delayed_flux_series(f.sigma(k), 1.0, delay, 1.0)));
    return e;
}

} // namespace

TEST(GridFunction, InterpolationAndIntegrals)
{
    GridFunction f{1.0, 0.5, {0.0, 1.0, 2.0, 3.0}}; // 2(x-1) on [1, 2.5]
    EXPECT_DOUBLE_EQ(f(1.25), 0.5);
    EXPECT_EQ(f(0.9), 0.0);
    EXPECT_EQ(f(2.6), 0.0);
    EXPECT_DOUBLE_EQ(f.integral(), 2.25);
    EXPECT_DOUBLE_EQ(f.cumulative(2.0), 1.0);
    EXPECT_DOUBLE_EQ(f.cumulative(1.75), 0.5625);
}

TEST(BackwardFunction, KindsAndJumps)
{
    EXPECT_DOUBLE_EQ(BackwardFunction::identity()(3.0), 3.0);
    EXPECT_DOUBLE_EQ(BackwardFunction::constant_delay(0.5)(3.0), 2.5);
    EXPECT_DOUBLE_EQ(BackwardFunction::constant_delay(0.5).xi0(), -0.5);
    EXPECT_THROW(BackwardFunction::constant_delay(-1.0), std::invalid_argument);
    EXPECT_THROW(BackwardFunction::gridded(0.1, {0.0, 0.2}, {}), std::invalid_argument);

    // plateau at 0.05 until the reset at 0.25, then a jump to 0.2
    const auto xi = BackwardFunction::gridded(0.1, {-0.1, 0.0, 0.05, 0.2, 0.3}, {{0.25, 0.05, 0.2}});
    EXPECT_DOUBLE_EQ(xi(0.24), 0.05);
    EXPECT_DOUBLE_EQ(xi(0.25), 0.2);
    EXPECT_DOUBLE_EQ(xi(0.35), 0.25);
    EXPECT_DOUBLE_EQ(xi.xi0(), -0.1);
    EXPECT_THROW(xi(-0.1), std::domain_error);
    EXPECT_THROW(xi(0.5), std::out_of_range);
}

TEST(SolveFlux, MatchesSeriesWithinSecondOrderBound)
{
    const double dt = 1e-3;
    EXPECT_LE(sup_error_vs_series(dt, 0.0, 10.0), 3.0 * dt * dt);
}

TEST(SolveFlux, ConstantDelayMatchesSeries)
{
    const double dt = 1e-3;
    EXPECT_LE(sup_error_vs_series(dt, 1.0, 10.0), 3.0 * dt * dt);
}

TEST(SolveFlux, RenewalLimitWithDelay)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f0 = solve_flux(ic, BackwardFunction::identity(), 1e-3, 50.0, 1.0);
    const FluxSolution f1 = solve_flux(ic, BackwardFunction::constant_delay(1.0), 1e-3, 50.0, 1.0);
    EXPECT_NEAR(f0.g.back(), 1.0, 0.01);
    EXPECT_NEAR(f1.g.back(), 0.5, 0.01);
}

TEST(SolveFlux, SecondOrderConvergence)
{
    for (double d : {0.0, 1.0}) {
        const double e1 = sup_error_vs_series(2e-3, d, 10.0);
        const double e2 = sup_error_vs_series(1e-3, d, 10.0);
        EXPECT_GE(e1 / e2, 3.5) << "delay " << d;
    }
}

TEST(SolveFlux, ZeroMassGivesZeroFlux)
{
    NaturalInitialCondition ic;
    const FluxSolution f = solve_flux(ic, BackwardFunction::identity(), 1e-2, 5.0, 1.0);
    ASSERT_EQ(f.size(), 501u);
    for (std::size_t k = 0; k < f.size(); ++k) {
        ASSERT_EQ(f.g[k], 0.0);
        ASSERT_EQ(f.G[k], 0.0);
    }
}

TEST(SolveFlux, InvariantsOfCumulative)
{
    const double dt = 1e-3;
    const auto ic = NaturalInitialCondition::reset_atom(0.8, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::constant_delay(0.3), dt, 8.0, 1.0);
    EXPECT_EQ(f.G[0], 0.0);
    double dgmax = 0.0;
    for (double v : f.dg) dgmax = std::max(dgmax, std::abs(v));
    double trap = 0.0;
    for (std::size_t k = 1; k < f.size(); ++k) {
        ASSERT_GE(f.g[k], -1e-14);
        ASSERT_GE(f.G[k], f.G[k - 1] - 1e-15); // roundoff where g underflows
        trap += 0.5 * dt * (f.g[k - 1] + f.g[k]);
        ASSERT_NEAR(trap, f.G[k], 2.0 * dt * dt * dgmax * f.sigma(k) + 1e-12);
    }
}

TEST(SolveFlux, DerivativeConsistentWithFlux)
{
    const double dt = 1e-3;
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::constant_delay(0.5), dt, 6.0, 1.0);
    // central differences are only second order; skip the steep onset
    for (std::size_t k = 300; k + 1 < f.size(); k += 97)
        EXPECT_NEAR((f.g[k + 1] - f.g[k - 1]) / (2 * dt), f.dg[k], 5e-4) << f.sigma(k);
    // Hermite interpolant reproduces nodes and integrates to G
    EXPECT_DOUBLE_EQ(f.g_at(f.sigma(1234)), f.g[1234]);
    EXPECT_NEAR(f.G_at(f.sigma(2000)), f.G[2000], 1e-14);
    EXPECT_THROW(f.g_at(6.5), std::out_of_range);
}

TEST(SolveFlux, AprioriBoundsHoldOnRandomNaturalInitialConditions)
{
    // natural states: cohorts that last reset at random ages
    const AprioriBounds b = apriori_bounds(1.0);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> age(0.0, 4.0), w(0.0, 1.0), delay(0.0, 2.0);
    for (int trial = 0; trial < 8; ++trial) {
        ResetAgeMeasure mu;
        const int k = 1 + trial % 3;
        std::vector<double> ws(k);
        double total = 0.0;
        for (auto& v : ws) total += (v = w(rng) + 0.05);
        const double m = 0.05 + 0.95 * w(rng);
        for (int i = 0; i < k; ++i) mu.atoms.push_back({m * ws[i] / total, trial == 0 && i == 0 ? 0.0 : age(rng)});
        const auto ic = construct_natural_ic(mu, 0.0, 1.0, 20.0, 1.0, 1e-2);
        const FluxSolution f = solve_flux(ic, BackwardFunction::constant_delay(delay(rng)), 2e-3, 8.0, 1.0);
        for (std::size_t i = 0; i < f.size(); ++i) {
            ASSERT_LE(f.g[i], b.A * ic.mass()) << trial;
            ASSERT_LE(std::abs(f.dg[i]), b.B * ic.mass()) << trial;
        }
    }
}

TEST(SolveFlux, BoundCheckReportsBlowUp)
{
    FluxSolution f;
    f.step = 1.0;
    f.g = {0.0, 1.0, 5.0};
    try {
        check_flux_bound(f, 4.0);
        FAIL() << "no error";
    } catch (const SolverError& e) {
        EXPECT_EQ(e.kind(), "flux_bound");
    }
    EXPECT_NO_THROW(check_flux_bound(f, 4.6));
}

TEST(SolveFlux, RejectsBadInput)
{
    auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    EXPECT_THROW(solve_flux(ic, BackwardFunction::identity(), 0.0, 1.0, 1.0), std::invalid_argument);
    ic.atoms.push_back({0.5, 2.0});
    EXPECT_THROW(solve_flux(ic, BackwardFunction::identity(), 1e-2, 1.0, 1.0), std::invalid_argument);
    auto bad = NaturalInitialCondition::reset_atom(0.5, -1.0);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// ------------------------------------------------------- natural initial data

TEST(NaturalIc, FreshResetCollapsesToAtom)
{
    ResetAgeMeasure mu;
    mu.atoms.push_back({0.7, 0.0});
    const auto ic = construct_natural_ic(mu, 0.0, 1.0, 20.0, 1.0);
    ASSERT_EQ(ic.atoms.size(), 1u);
    EXPECT_DOUBLE_EQ(ic.atoms[0].mass, 0.7);
    EXPECT_DOUBLE_EQ(ic.atoms[0].location, 1.0);
    EXPECT_TRUE(ic.density.empty());
    EXPECT_TRUE(ic.flux_history.empty());
}

TEST(NaturalIc, ConservesMass)
{
    ResetAgeMeasure mu;
    mu.atoms.push_back({0.5, 1.0});
    const auto ic = construct_natural_ic(mu, 0.0, 1.0, 20.0, 1.0, 1e-4);
    EXPECT_NEAR(ic.density.integral(), 0.5, 1e-8);
    EXPECT_EQ(ic.history_mass(), 0.0);
}

TEST(NaturalIc, BoundaryCompatibility)
{
    ResetAgeMeasure mu;
    const double dtau = 1e-3;
    mu.density = GridFunction{0.5, dtau, std::vector<double>(501, 2.0)};
    const auto ic = construct_natural_ic(mu, 0.01, 1.0, 0.5, 1.0, 1e-3);
    ASSERT_FALSE(ic.flux_history.empty());
    const auto& q = ic.density;
    const double dq0 = (-3.0 * q.values[0] + 4.0 * q.values[1] - q.values[2]) / (2.0 * q.step);
    EXPECT_LT(std::abs(ic.flux_history.values.back() - 0.5 * dq0), 1e-3);
    // xi0 solves xi0 + lambda int_{xi0}^0 g0 = -nu eps
    EXPECT_NEAR(ic.xi0 + 0.5 * ic.flux_history.integral(), -0.01, 1e-6);
}

TEST(NaturalIc, Errors)
{
    ResetAgeMeasure mu;
    mu.atoms.push_back({0.8, 1.0});
    mu.atoms.push_back({0.3, 2.0});
    EXPECT_THROW(construct_natural_ic(mu, 0.0, 1.0, 20.0, 1.0), std::invalid_argument);
    ResetAgeMeasure neg;
    neg.atoms.push_back({0.5, -1.0});
    EXPECT_THROW(construct_natural_ic(neg, 0.0, 1.0, 20.0, 1.0), std::invalid_argument);
    // recent resets make the history flux cross 1/lambda: not a natural state
    ResetAgeMeasure hot;
    hot.atoms.push_back({0.9, 0.3});
    EXPECT_THROW(construct_natural_ic(hot, 0.01, 1.0, 20.0, 1.0), std::invalid_argument);
}

// ---------------------------------------------------------------- density

TEST(DensityAt, InitialSnapshotIsTheAtom)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const FluxSolution f = solve_flux(ic, BackwardFunction::identity(), 1e-3, 1.0, 1.0);
    const auto snap = density_at(ic, f, BackwardFunction::identity(), 0.0, 1.0);
    ASSERT_EQ(snap.atoms.size(), 1u);
    EXPECT_DOUBLE_EQ(snap.atoms[0].location, 1.0);
    EXPECT_DOUBLE_EQ(snap.active_mass, 1.0);
}

TEST(DensityAt, ConservationAndBoundaryFlux)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const auto xi = BackwardFunction::identity();
    const FluxSolution f = solve_flux(ic, xi, 1e-3, 1.0, 1.0);
    const auto snap = density_at(ic, f, xi, 0.5, 1.0);
    EXPECT_NEAR(snap.active_mass, 1.0, 1e-4);
    EXPECT_EQ(snap.density.values[0], 0.0);
    const auto& q = snap.density;
    const double dq0 = (-3.0 * q.values[0] + 4.0 * q.values[1] - q.values[2]) / (2.0 * q.step);
    EXPECT_NEAR(0.5 * dq0, f.g_at(0.5), 1e-3);
}

TEST(DensityAt, InTransitMassBalancesWithDelay)
{
    // active + (resets fired but not yet re-entered) = initial mass
    const double d = 0.7, dt = 2e-3;
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const auto xi = BackwardFunction::constant_delay(d);
    const FluxSolution f = solve_flux(ic, xi, dt, 3.0, 1.0);
    for (int i = 1; i <= 10; ++i) {
        const double s = 0.3 * i;
        const auto snap = density_at(ic, f, xi, s, 1.0, 2e-3);
        const double transit = f.G_at(s) - f.G_at(std::max(s - d, 0.0));
        EXPECT_NEAR(snap.active_mass + transit, 1.0, 5.0 * (dt + 2e-3)) << s;
        EXPECT_NEAR(snap.inactive_fraction, transit, 5.0 * (dt + 2e-3)) << s;
    }
}

TEST(DensityAt, Errors)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    const auto xi = BackwardFunction::identity();
    const FluxSolution f = solve_flux(ic, xi, 1e-2, 1.0, 1.0);
    EXPECT_THROW(density_at(ic, f, xi, 2.0, 1.0), std::out_of_range);
    EXPECT_THROW(density_at(ic, f, xi, 0.01, 1.0, 0.1), std::invalid_argument);
}

// ----------------------------------------------------------------- marcher

TEST(FluxMarcher, RetreatRestoresState)
{
    const auto ic = NaturalInitialCondition::reset_atom(1.0, 1.0);
    FluxMarcher m(ic, 1.0, 1e-2, 0.0);
    auto reset = [](const FluxMarcher& fm, std::size_t k) {
        ResetUpdate u;
        u.K = fm.G_at(fm.sigma(k));
        return u;
    };
    for (int i = 0; i < 100; ++i) m.advance(reset);
    const double g100 = m.solution().g.back();
    m.advance(reset);
    m.retreat();
    EXPECT_EQ(m.last(), 100u);
    EXPECT_DOUBLE_EQ(m.solution().g.back(), g100);
    m.advance(reset);
    EXPECT_NEAR(m.solution().g.back(), fundamental_flux(1.01, 1.0, 1.0), 3e-4);
}

TEST(FluxMarcher, ResetAtomsEnterAsKernelTerms)
{
    // a fixed atom of mass 0.3 re-entering at sigma = 0.5, nothing else
    NaturalInitialCondition ic;
    ic.atoms.push_back({0.2, 3.0});
    FluxMarcher m(ic, 1.0, 1e-3, 0.0);
    auto reset = [](const FluxMarcher& fm, std::size_t k) {
        ResetUpdate u;
        u.K = fm.K_total(k - 1);
        if (std::abs(fm.sigma(k) - 0.5) < 1e-9) {
            u.atoms.push_back({0.3, 0.5});
            u.K += 0.3;
        }
        return u;
    };
    for (int i = 0; i < 2000; ++i) m.advance(reset);
    EXPECT_NEAR(m.atom_total(), 0.3, 1e-15);
    const double s = 1.5;
    EXPECT_NEAR(m.g_at(s), 0.2 * fpt_density(s, 3.0) + 0.3 * fpt_density(s - 0.5, 1.0), 1e-10);
}
