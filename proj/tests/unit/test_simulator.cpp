#include <gtest/gtest.h>

#include "hjbcert/hjb_solver.hpp"
#include "hjbcert/models.hpp"
#include "hjbcert/oracles.hpp"
#include "hjbcert/simulator.hpp"

using namespace hjbcert;

namespace {

ControlProblem constant_coefficients(double b, double s) {
    ControlProblem pr;
    pr.controls = ControlSet(1, 1.0, {Box::interval(-1.0, 1.0)});
    pr.domain = Box::whole(1);
    pr.drift = [b](double, const Vec&, const Vec&) { return vec1(b); };
    pr.diffusion = [s](double, const Vec&, const Vec&) { return mat1(s); };
    pr.payoff = [](const Vec& x) { return x[0] * x[0]; };
    pr.gauge = [](const Vec& x) { return 1.0 + x[0] * x[0]; };
    pr.constraint = Constraint::positive(1.0);
    return pr;
}

const FeedbackPolicy kZero = constant_policy(vec1(0.0), "zero");

}  // namespace

TEST(Simulate, DeterministicOdeEndsExactly) {
    const ControlProblem pr = constant_coefficients(1.0, 0.0);
    PathEnsemble ens = simulate_paths(pr, kZero, 0.0, vec1(0.0), 50, 64, 3);
    for (std::size_t p = 0; p < ens.n_paths; ++p) EXPECT_EQ(ens.terminal(p)[0], 1.0);
    EXPECT_EQ(ens.exit_fraction(), 0.0);
    EXPECT_EQ(ens.times.size(), 65u);
}

TEST(Simulate, BrownianMoments) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    const std::size_t n = 40000;
    PathEnsemble ens = simulate_paths(pr, kZero, 0.0, vec1(0.0), n, 16, 5, {false, 1, {}});
    std::vector<double> xs(n), sq(n);
    for (std::size_t p = 0; p < n; ++p) {
        xs[p] = ens.terminal(p)[0];
        sq[p] = xs[p] * xs[p];
    }
    const ValueEstimate m = summarize(xs);
    const ValueEstimate v = summarize(sq);
    EXPECT_LT(std::abs(m.mean), 4.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_LT(std::abs(v.mean - m.mean * m.mean - 1.0), 4.0 * v.stderr_);
}

TEST(Simulate, GeometricMeanInLogCoordinates) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    const double u0 = 3.0, t0 = 0.25, x0 = 1.5;
    PathEnsemble ens = simulate_paths(pr, constant_policy(vec1(u0)), t0, vec1(x0), 20000, 8, 9);
    ValueEstimate e = estimate_value(ens, [](const Vec& x) { return x[0]; });
    EXPECT_LT(std::abs(e.mean - x0 * std::exp(u0 * m.mu * (1.0 - t0))), 4.0 * e.stderr_);
    EXPECT_EQ(e.exit_fraction, 0.0);
    for (std::size_t p = 0; p < 100; ++p)
        for (std::size_t k = 0; k <= 8; ++k) EXPECT_GT(ens.state(p, k)[0], 0.0);
}

TEST(Simulate, DeterministicAcrossThreadCounts) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    const FeedbackPolicy pol = constant_policy(vec1(5.0));
    PathEnsemble a = simulate_paths(pr, pol, 0.0, vec1(1.0), 1000, 32, 42, {true, 1, {}});
    PathEnsemble b = simulate_paths(pr, pol, 0.0, vec1(1.0), 1000, 32, 42, {true, 4, {}});
    PathEnsemble c = simulate_paths(pr, pol, 0.0, vec1(1.0), 1000, 32, 42, {true, 1, {}});
    EXPECT_EQ(a.states, b.states);
    EXPECT_EQ(a.states, c.states);
    PathEnsemble d = simulate_paths(pr, pol, 0.0, vec1(1.0), 1000, 32, 43, {true, 1, {}});
    EXPECT_NE(a.states, d.states);
}

TEST(Simulate, ControlsOutsideBoundRejected) {
    MertonParams m;
    m.bound = 1.0;
    const ControlProblem pr = merton_problem(m);
    EXPECT_THROW(simulate_paths(pr, constant_policy(vec1(2.0)), 0.0, vec1(1.0), 10, 4, 1), ArgumentError);
    FeedbackPolicy liar = constant_policy(vec1(3.0), "liar");
    liar.bound = 1.0;
    EXPECT_THROW(simulate_paths(pr, liar, 0.0, vec1(1.0), 10, 4, 1), ComputeError);
}

TEST(Simulate, InvalidArgumentsRejected) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    EXPECT_THROW(simulate_paths(pr, kZero, 0.0, vec1(-1.0), 10, 4, 1), DomainError);
    EXPECT_THROW(simulate_paths(pr, kZero, 0.0, vec1(1.0), 10, 0, 1), ArgumentError);
    EXPECT_THROW(simulate_paths(pr, kZero, 1.0, vec1(1.0), 10, 4, 1), ArgumentError);
}

TEST(Simulate, BoxExitStopsAndFlags) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    SimulationOptions opt;
    opt.sim_box = Box::interval(-0.5, 0.5);
    PathEnsemble ens = simulate_paths(pr, kZero, 0.0, vec1(0.0), 2000, 64, 2, opt);
    EXPECT_GT(ens.exit_fraction(), 0.5);
    for (std::size_t p = 0; p < ens.n_paths; ++p) EXPECT_LE(std::abs(ens.terminal(p)[0]), 0.5);
}

TEST(Estimate, ConstantPayoffHasZeroWidth) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    PathEnsemble ens = simulate_paths(pr, kZero, 0.0, vec1(0.0), 500, 8, 1);
    ValueEstimate e = estimate_value(ens, [](const Vec&) { return 4.0; });
    EXPECT_EQ(e.mean, 4.0);
    EXPECT_EQ(e.half_width_95, 0.0);
}

TEST(Estimate, HeatSecondMoment) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    ValueEstimate e = estimate_value(simulate_paths(pr, kZero, 0.0, vec1(0.0), 20000, 16, 8), pr.payoff);
    EXPECT_LT(std::abs(e.mean - 1.0), e.half_width_95 * 2.0);
}

TEST(Estimate, MertonOptimalPolicy) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    ValueEstimate e = estimate_value(simulate_paths(pr, constant_policy(vec1(5.0)), 0.0, vec1(1.0), 20000, 32, 12),
                                     pr.payoff);
    EXPECT_LT(std::abs(e.mean - std::exp(0.125)), 2.0 * e.half_width_95);
}

TEST(Estimate, HalvingStepMovesLessThanCi) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    ValueEstimate a = estimate_value(simulate_paths(pr, kZero, 0.0, vec1(0.3), 20000, 8, 4), pr.payoff);
    ValueEstimate b = estimate_value(simulate_paths(pr, kZero, 0.0, vec1(0.3), 20000, 16, 4), pr.payoff);
    EXPECT_LT(std::abs(a.mean - b.mean), 2.0 * (a.half_width_95 + b.half_width_95));
}

TEST(Optimize, BestConstantNearMertonMaximiser) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    SimulationConfig sc;
    sc.x0 = vec1(1.0);
    sc.n_paths = 10000;
    sc.n_steps = 16;
    OptimizationResult r = optimize_policy(pr, constant_family(pr.controls.grid(21)), sc);
    EXPECT_EQ(r.evaluations, 21u);
    EXPECT_NEAR(r.best(0.0, vec1(1.0))[0], 5.0, 1.0);
}

TEST(Optimize, SingletonFamily) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    SimulationConfig sc;
    sc.x0 = vec1(1.0);
    sc.n_paths = 2000;
    OptimizationResult r = optimize_policy(pr, constant_family({vec1(2.0)}), sc);
    EXPECT_EQ(r.evaluations, 1u);
    EXPECT_EQ(r.best(0.0, vec1(1.0))[0], 2.0);
    ValueEstimate direct = estimate_value(simulate_paths(pr, r.best, 0.0, vec1(1.0), 2000, 64, 1, {false, 1, {}}), pr.payoff);
    EXPECT_EQ(direct.mean, r.estimate.mean);
}

TEST(Optimize, NestedFamiliesOrdered) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    SimulationConfig sc;
    sc.x0 = vec1(0.8);
    sc.n_paths = 4000;
    sc.n_steps = 16;
    OptimizationResult small = optimize_policy(pr, constant_family(pr.controls.grid(5)), sc);
    OptimizationResult big = optimize_policy(pr, constant_family(pr.controls.grid(9)), sc);
    EXPECT_GE(big.estimate.mean, small.estimate.mean);
}

TEST(Optimize, HjbPolicyCompetesWithConstants) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    SchemeConfig cfg;
    cfg.time_nodes = 21;
    cfg.control_resolution = 41;
    cfg.boundary = BoundaryMode::gauge;
    const SpatialGrid grid = SpatialGrid::log_uniform(0.05, 20.0, 81);
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    SimulationConfig sc;
    sc.x0 = vec1(1.0);
    sc.n_paths = 10000;
    sc.n_steps = 32;
    PolicyFamily fam = constant_family(pr.controls.grid(11));
    OptimizationResult constants = optimize_policy(pr, fam, sc);
    fam.members.push_back(extract_policy(sol));
    OptimizationResult with_hjb = optimize_policy(pr, fam, sc);
    const ValueEstimate hjb = with_hjb.member_estimates.back();
    EXPECT_GE(hjb.mean, constants.estimate.mean - constants.estimate.half_width_95);
}

TEST(Gauge, BoundedTruncationNoFlag) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    SimulationOptions opt;
    opt.sim_box = Box::interval(-1.0, 1.0);
    GaugeReport r = gauge_check(simulate_paths(pr, kZero, 0.0, vec1(0.0), 2000, 32, 1, opt), pr.gauge);
    EXPECT_LE(r.mean_sup, 2.0);
    EXPECT_FALSE(r.heavy_tail);
}

TEST(Gauge, HeatSupWithinDoobBand) {
    const ControlProblem pr = constant_coefficients(0.0, 1.0);
    GaugeReport r = gauge_check(simulate_paths(pr, kZero, 0.0, vec1(0.0), 5000, 64, 1), pr.gauge);
    EXPECT_GT(r.mean_sup, 1.0);
    EXPECT_LE(r.mean_sup, 1.0 + 4.0);
    EXPECT_FALSE(r.heavy_tail);
}

TEST(Gauge, PowerGaugeOnGeometricDynamics) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    GaugeReport r = gauge_check(simulate_paths(pr, constant_policy(vec1(5.0)), 0.0, vec1(1.0), 5000, 32, 1), pr.gauge);
    EXPECT_TRUE(std::isfinite(r.mean_sup));
    EXPECT_FALSE(r.heavy_tail);
    const PathEnsemble terminal_only = simulate_paths(pr, kZero, 0.0, vec1(1.0), 10, 4, 1, {false, 1, {}});
    EXPECT_THROW(gauge_check(terminal_only, pr.gauge), ArgumentError);
}
