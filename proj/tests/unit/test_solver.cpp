#include <gtest/gtest.h>

#include <random>

#include "hjbcert/hjb_solver.hpp"
#include "hjbcert/models.hpp"
#include "hjbcert/oracles.hpp"

using namespace hjbcert;

namespace {

ControlProblem constant_coefficients(double b, double s) {
    ControlProblem pr;
    pr.controls = ControlSet(1, 1.0, {Box::interval(-1.0, 1.0)});
    pr.domain = Box::whole(1);
    pr.drift = [b](double, const Vec&, const Vec&) { return vec1(b); };
    pr.diffusion = [s](double, const Vec&, const Vec&) { return mat1(s); };
    pr.payoff = [](const Vec&) { return 0.0; };
    pr.gauge = [](const Vec&) { return 1.0; };
    pr.constraint = Constraint::positive(1.0);
    return pr;
}

ControlProblem abs_payoff_problem(double bound, double horizon) {
    return volatility_control_problem(bound, horizon, [](const Vec& x) { return std::abs(x[0] - 1.0); },
                                      [](const Vec& x) { return 1.0 + std::abs(x[0] - 1.0); }, 2.0);
}

SchemeConfig merton_scheme(std::size_t time_nodes, int res) {
    SchemeConfig cfg;
    cfg.time_nodes = time_nodes;
    cfg.control_resolution = res;
    cfg.boundary = BoundaryMode::gauge;
    return cfg;
}

}  // namespace

TEST(DiscreteGenerator, AffineWithConstantDriftIsExact) {
    const SpatialGrid grid = SpatialGrid::uniform(-1.0, 3.0, 41);
    GridFunction v = GridFunction::sample(grid, [](const Vec& x) { return 2.0 - 0.75 * x[0]; });
    for (double c : {1.5, -2.0}) {
        std::size_t edges = 0;
        GridFunction out = discrete_generator(constant_coefficients(c, 0.0), vec1(0.0), v, 0.0, &edges);
        EXPECT_EQ(edges, 2u);
        for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(out[i], -0.75 * c, 1e-12);
    }
}

TEST(DiscreteGenerator, SquareGivesDiffusionSquared) {
    const SpatialGrid grid = SpatialGrid::uniform(-2.0, 2.0, 41);
    GridFunction v = GridFunction::sample(grid, [](const Vec& x) { return x[0] * x[0]; });
    GridFunction out = discrete_generator(constant_coefficients(0.0, 0.7), vec1(0.0), v, 0.0);
    for (std::size_t i = 1; i + 1 < grid.size(); ++i) EXPECT_NEAR(out[i], 0.49, 1e-12);
}

TEST(DiscreteGenerator, ConstantsAnnihilated) {
    const SpatialGrid grid = SpatialGrid::uniform(-2.0, 2.0, 21);
    GridFunction v(grid, std::vector<double>(grid.size(), 3.0));
    const ControlProblem pr = bounded_control_problem(2.0);
    for (double u : {-2.0, 0.0, 1.3}) {
        GridFunction out = discrete_generator(pr, vec1(u), v, 0.0);
        for (double y : out.values) EXPECT_EQ(y, 0.0);
    }
    EXPECT_THROW(discrete_generator(pr, vec1(5.0), v, 0.0), ArgumentError);
}

TEST(Solver, ConstantTerminalStaysConstant) {
    ControlProblem pr = bounded_control_problem(1.0);
    pr.payoff = [](const Vec&) { return 2.5; };
    const SpatialGrid grid = SpatialGrid::uniform(-2.0, 2.0, 41);
    SchemeConfig cfg;
    cfg.time_nodes = 11;
    cfg.control_resolution = 11;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    for (const auto& s : sol.slices)
        for (double y : s.values) EXPECT_NEAR(y, 2.5, 1e-12);
}

TEST(Solver, HeatMomentIdentity) {
    const ControlProblem pr = heat_problem(1.0, 1.0);
    const SpatialGrid grid = SpatialGrid::uniform(-6.0, 6.0, 121);
    SchemeConfig cfg;
    cfg.time_nodes = 101;
    cfg.control_resolution = 1;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::raw), cfg);
    double worst = 0.0;
    for (std::size_t n = 0; n < sol.times.size(); ++n)
        for (std::size_t k = 0; k < grid.size(); ++k) {
            if (!grid.in_trust_region(k)) continue;
            const double x = grid.axis(0).physical(k);
            worst = std::max(worst, std::abs(sol.slices[n][k] - heat_value(sol.times[n], x, 1.0, 1.0, HeatPayoff::square)));
        }
    EXPECT_LT(worst, 1e-2);
    EXPECT_EQ(sol.meta.non_monotone_pairs, 0u);
}

TEST(Solver, ExplicitStepAboveCflRejected) {
    const ControlProblem pr = heat_problem(1.0, 1.0);
    SchemeConfig cfg;
    cfg.time_nodes = 3;
    cfg.control_resolution = 1;
    cfg.substeps = 1;
    const SpatialGrid grid = SpatialGrid::uniform(-6.0, 6.0, 121);
    EXPECT_THROW(solve_hjb(pr, make_terminal(pr, grid, TerminalKind::raw), cfg), ConfigError);
}

TEST(Solver, InvalidConfigRejected) {
    const ControlProblem pr = heat_problem(1.0, 1.0);
    const SpatialGrid grid = SpatialGrid::uniform(-1.0, 1.0, 11);
    SchemeConfig cfg;
    cfg.time_nodes = 1;
    EXPECT_THROW(solve_hjb(pr, make_terminal(pr, grid, TerminalKind::raw), cfg), ConfigError);
}

TEST(Solver, MertonMatchesClosedForm) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    const SpatialGrid grid = SpatialGrid::log_uniform(0.2, 5.0, 101);
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), merton_scheme(51, 101));
    for (double x : {0.6, 1.0, 1.5})
        EXPECT_NEAR(sol.value_at(0.0, vec1(x)) / merton_value(0.0, x, m), 1.0, 1e-2);
    // interior argmax close to u* = 5 within the control spacing 0.2
    const FeedbackPolicy pol = extract_policy(sol);
    for (double x : {0.6, 1.0, 1.5})
        for (double t : {0.0, 0.5, 0.9}) EXPECT_NEAR(pol(t, vec1(x))[0], 5.0, 0.2 + 1e-9);
}

TEST(Solver, SingletonControlPolicy) {
    const ControlProblem pr = heat_problem(1.0, 1.0);
    const SpatialGrid grid = SpatialGrid::uniform(-2.0, 2.0, 21);
    SchemeConfig cfg;
    cfg.time_nodes = 5;
    cfg.control_resolution = 7;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::raw), cfg);
    const FeedbackPolicy pol = extract_policy(sol);
    EXPECT_EQ(pol.bound, 0.0);
    for (double t : {0.0, 0.3, 1.0})
        for (double x : {-1.9, 0.0, 1.2}) EXPECT_EQ(pol(t, vec1(x))[0], 0.0);
}

TEST(Solver, MirrorSymmetricPolicy) {
    // b = u, σ = 1, g = -x²: reflecting x and u leaves the problem unchanged.
    const ControlProblem pr = bounded_control_problem(2.0);
    const SpatialGrid grid = SpatialGrid::uniform(-3.0, 3.0, 61);
    SchemeConfig cfg;
    cfg.time_nodes = 11;
    cfg.control_resolution = 41;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    const double spacing = 0.1;
    for (std::size_t n = 0; n + 1 < sol.times.size(); ++n)
        for (std::size_t k = 1; k + 1 < grid.size(); ++k) {
            const double u = sol.controls[sol.policy[n][k]][0];
            const double um = sol.controls[sol.policy[n][grid.size() - 1 - k]][0];
            EXPECT_LE(std::min(std::abs(u - um), std::abs(u + um)), spacing + 1e-9) << n << " " << k;
        }
}

TEST(Solver, DiscreteComparisonOnOrderedTerminals) {
    const ControlProblem pr = abs_payoff_problem(2.0, 0.1);
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 41);
    SchemeConfig cfg;
    cfg.time_nodes = 6;
    cfg.control_resolution = 11;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> bump(0.0, 0.5);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> a(grid.size()), b(grid.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = n(rng);
            b[i] = a[i] + bump(rng);
        }
        auto s1 = solve_hjb(pr, GridFunction(grid, a), cfg);
        auto s2 = solve_hjb(pr, GridFunction(grid, b), cfg);
        for (std::size_t t = 0; t < s1.slices.size(); ++t)
            for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_LE(s1.slices[t][i], s2.slices[t][i]);
    }
}

TEST(Solver, ProjectionKeepsSlicesConcave) {
    const ControlProblem pr = abs_payoff_problem(2.0, 0.1);
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 101);
    SchemeConfig cfg;
    cfg.time_nodes = 11;
    cfg.control_resolution = 21;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    const double h = 0.02;
    for (const auto& s : sol.slices)
        for (std::size_t i = 1; i + 1 < grid.size(); ++i) EXPECT_LE(s[i + 1] - 2 * s[i] + s[i - 1], 1e-12 * h * h + 1e-12);
}

TEST(Solver, TerminalLayerCloserToFacelift) {
    const ControlProblem pr = abs_payoff_problem(2.0, 0.1);
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 101);
    SchemeConfig cfg;
    cfg.time_nodes = 11;
    cfg.control_resolution = 21;
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::raw), cfg);
    const GridFunction ghat = concave_envelope(sol.payoff);
    const GridFunction& before = sol.slices[sol.slices.size() - 2];
    EXPECT_LT(sup_distance(before, ghat), sup_distance(before, sol.payoff));
    EXPECT_GT(sup_distance(before, sol.payoff), 0.5);
}

TEST(Solver, LargerControlBoundNeverLowersValue) {
    MertonParams m;
    const SpatialGrid grid = SpatialGrid::log_uniform(0.2, 5.0, 41);
    std::vector<SpaceTimeSolution> sols;
    for (double b : {1.0, 2.0, 4.0}) {
        m.bound = b;
        SchemeConfig cfg = merton_scheme(11, static_cast<int>(10 * b) + 1);
        cfg.substeps = 300;
        const ControlProblem pr = merton_problem(m);
        sols.push_back(solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg));
    }
    for (std::size_t j = 1; j < sols.size(); ++j)
        for (std::size_t n = 0; n < sols[j].slices.size(); ++n)
            for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_GE(sols[j].slices[n][k], sols[j - 1].slices[n][k]);
}

TEST(Solver, DeterministicAcrossThreadCounts) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    const SpatialGrid grid = SpatialGrid::log_uniform(0.2, 5.0, 41);
    SchemeConfig cfg = merton_scheme(11, 51);
    auto a = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    cfg.threads = 3;
    auto b = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    for (std::size_t n = 0; n < a.slices.size(); ++n) {
        EXPECT_EQ(a.slices[n].values, b.slices[n].values);
        EXPECT_EQ(a.policy[n], b.policy[n]);
    }
}

TEST(Convergence, ConstantTerminalHasZeroDifferences) {
    ControlProblem pr = bounded_control_problem(1.0);
    pr.payoff = [](const Vec&) { return -1.25; };
    SchemeConfig cfg;
    cfg.time_nodes = 5;
    cfg.control_resolution = 5;
    auto rep = convergence_study(pr, SpatialGrid::uniform(-1.0, 1.0, 11), TerminalKind::facelift, cfg, 3);
    ASSERT_EQ(rep.levels.size(), 3u);
    for (std::size_t i = 1; i < 3; ++i) EXPECT_LE(rep.levels[i].diff_to_previous, 1e-13);
}

TEST(Convergence, HeatOrders) {
    ControlProblem pr = heat_problem(1.0, 1.0);
    pr.payoff = [](const Vec& x) { return std::cos(x[0]); };
    const SpatialGrid base = SpatialGrid::uniform(-3.0 * M_PI, 3.0 * M_PI, 31);
    SchemeConfig cfg;
    cfg.time_nodes = 5;
    cfg.control_resolution = 1;
    cfg.substeps = 400;
    auto oracle = [](double t, const Vec& x) { return std::exp(-0.5 * (1.0 - t)) * std::cos(x[0]); };
    auto space = convergence_study(pr, base, TerminalKind::raw, cfg, 4, RefineMode::space, oracle);
    ASSERT_EQ(space.orders.size(), 2u);
    for (double o : space.orders) EXPECT_NEAR(o, 2.0, 0.3);
    EXPECT_LT(space.levels.back().oracle_error, space.levels.front().oracle_error);

    cfg.substeps = 40;
    auto time = convergence_study(pr, base, TerminalKind::raw, cfg, 4, RefineMode::time);
    ASSERT_EQ(time.orders.size(), 2u);
    for (double o : time.orders) EXPECT_NEAR(o, 1.0, 0.2);
}

TEST(Convergence, MertonDifferencesShrink) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    auto rep = convergence_study(pr, SpatialGrid::log_uniform(0.2, 5.0, 26), TerminalKind::facelift,
                                 merton_scheme(6, 101), 3, RefineMode::space_time,
                                 [&](double t, const Vec& x) { return merton_value(t, x[0], m); });
    EXPECT_TRUE(rep.differences_shrink(1.5)) << rep.levels[1].diff_to_previous << " " << rep.levels[2].diff_to_previous;
}

TEST(Convergence, TimeModeNeedsSubsteps) {
    const ControlProblem pr = heat_problem(1.0, 1.0);
    SchemeConfig cfg;
    cfg.time_nodes = 3;
    cfg.control_resolution = 1;
    EXPECT_THROW(convergence_study(pr, SpatialGrid::uniform(-1, 1, 11), TerminalKind::raw, cfg, 2, RefineMode::time),
                 ArgumentError);
}
