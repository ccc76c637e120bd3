#include <gtest/gtest.h>

#include <random>

#include "hjbcert/facelift.hpp"
#include "hjbcert/models.hpp"
#include "test_oracles.hpp"

using namespace hjbcert;

namespace {

ControlProblem concave_problem() {
    return volatility_control_problem(1.0, 1.0, [](const Vec& x) { return std::abs(x[0] - 1.0); },
                                      [](const Vec& x) { return 1.0 + std::abs(x[0]); }, 2.0);
}

std::vector<double> xs_of(const SpatialGrid& g) {
    std::vector<double> xs(g.size());
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = g.axis(0).physical(i);
    return xs;
}

GridFunction random_payoff(const SpatialGrid& grid, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(grid.size());
    for (double& y : v) y = n(rng);
    return GridFunction(grid, v);
}

double max_second_difference(const GridFunction& w) {
    const auto xs = xs_of(w.grid);
    double worst = -kInf;
    for (std::size_t i = 1; i + 1 < w.size(); ++i) {
        const double hp = xs[i + 1] - xs[i], hm = xs[i] - xs[i - 1];
        worst = std::max(worst, ((w[i + 1] - w[i]) / hp - (w[i] - w[i - 1]) / hm));
    }
    return worst;
}

}  // namespace

TEST(ConcaveEnvelope, ConcaveInputUnchanged) {
    const SpatialGrid grid = SpatialGrid::uniform(0.25, 4.0, 101);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::sqrt(x[0]); });
    EXPECT_LE(sup_distance(concave_envelope(g), g), 1e-12);
}

TEST(ConcaveEnvelope, AbsoluteValueBecomesChord) {
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 201);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::abs(x[0] - 1.0); });
    GridFunction w = concave_envelope(g);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], 1.0, 1e-12);
    EXPECT_EQ(w.values, testref::brute_force_upper_hull(xs_of(grid), g.values));
}

TEST(ConcaveEnvelope, SpikeBecomesTent) {
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 1.0, 11);
    std::vector<double> v(11, 0.0);
    v[3] = 1.0;
    GridFunction w = concave_envelope(GridFunction(grid, v));
    const auto xs = xs_of(grid);
    for (std::size_t i = 0; i < 11; ++i) {
        const double tent = i <= 3 ? xs[i] / xs[3] : (1.0 - xs[i]) / (1.0 - xs[3]);
        EXPECT_NEAR(w[i], tent, 1e-15) << i;
    }
}

TEST(ConcaveEnvelope, MatchesBruteForceHullExactly) {
    std::mt19937_64 rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        const SpatialGrid grid = SpatialGrid::uniform(-1.0, 2.0, 31 + rep);
        GridFunction g = random_payoff(grid, rng);
        EXPECT_EQ(concave_envelope(g).values, testref::brute_force_upper_hull(xs_of(grid), g.values));
    }
}

TEST(ConcaveEnvelope, TwoDimensionalRejected) {
    const SpatialGrid grid = SpatialGrid::uniform2(0, 1, 3, 0, 1, 3);
    EXPECT_THROW(concave_envelope(GridFunction(grid, std::vector<double>(9, 0.0))), UnsupportedError);
}

TEST(ConcaveEnvelope, Properties) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> bump(0.0, 0.5);
    for (int rep = 0; rep < 25; ++rep) {
        const SpatialGrid grid = SpatialGrid::uniform(0.0, 1.0, 41);
        GridFunction g1 = random_payoff(grid, rng);
        GridFunction g2 = g1;
        for (double& y : g2.values) y += bump(rng);
        const GridFunction w1 = concave_envelope(g1), w2 = concave_envelope(g2);
        EXPECT_EQ(concave_envelope(w1).values, w1.values);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            EXPECT_GE(w1[i], g1[i]);
            EXPECT_LE(w1[i], w2[i]);
        }
        EXPECT_LE(max_second_difference(w1), 1e-12);
        GridFunction shifted = g1;
        for (double& y : shifted.values) y += 3.25;
        const GridFunction ws = concave_envelope(shifted);
        for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(ws[i], w1[i] + 3.25, 1e-12);
    }
}

TEST(FaceliftGeneral, PositiveConstantReturnsPayoff) {
    const ControlProblem pr = bounded_control_problem(1.0);
    const SpatialGrid grid = SpatialGrid::uniform(-2.0, 2.0, 41);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::abs(x[0]); });
    EXPECT_EQ(facelift_general(g, pr).values, g.values);
    EXPECT_EQ(facelift(g, pr).values, g.values);
}

TEST(FaceliftGeneral, AgreesWithEnvelopeOnAbsoluteValue) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 101);
    GridFunction g = GridFunction::sample(grid, pr.payoff);
    FaceliftOptions opt;
    FaceliftStats stats;
    GridFunction w = facelift_general(g, pr, opt, &stats);
    EXPECT_LE(sup_distance(w, concave_envelope(g)), 10 * opt.tol);
    EXPECT_GT(stats.iterations, 0u);
    EXPECT_LT(stats.contraction, 1.0);
}

TEST(FaceliftGeneral, AgreesWithEnvelopeOnRandomPayoffs) {
    const ControlProblem pr = concave_problem();
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 4; ++rep) {
        const SpatialGrid grid = SpatialGrid::uniform(0.0, 1.0, 33);
        GridFunction g = random_payoff(grid, rng);
        FaceliftOptions opt;
        EXPECT_LE(sup_distance(facelift_general(g, pr, opt), concave_envelope(g)), 10 * opt.tol);
    }
}

TEST(FaceliftGeneral, ConcaveInputUnchanged) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.25, 4.0, 61);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::sqrt(x[0]); });
    FaceliftOptions opt;
    EXPECT_LE(sup_distance(facelift_general(g, pr, opt), g), opt.tol);
}

TEST(FaceliftGeneral, ConvergenceErrorCarriesLastIterate) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 51);
    GridFunction g = GridFunction::sample(grid, pr.payoff);
    FaceliftOptions opt;
    opt.max_iters = 5;
    try {
        facelift_general(g, pr, opt);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_EQ(e.iterations, 5u);
        EXPECT_GT(e.residual, 0.0);
        EXPECT_EQ(e.last_iterate.size(), g.size());
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_GE(e.last_iterate[i], g[i]);
    }
}

TEST(FaceliftGeneral, MonotoneInPayoff) {
    const ControlProblem pr = concave_problem();
    std::mt19937_64 rng(8);
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 1.0, 21);
    GridFunction g1 = random_payoff(grid, rng);
    GridFunction g2 = g1;
    std::uniform_real_distribution<double> bump(0.0, 0.3);
    for (double& y : g2.values) y += bump(rng);
    const GridFunction w1 = facelift_general(g1, pr), w2 = facelift_general(g2, pr);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_GE(w1[i], g1[i]);
        EXPECT_LE(w1[i], w2[i] + 1e-12);
    }
}

TEST(FaceliftGeneral, TwoDimensionalConcavity) {
    const ControlProblem pr = [] {
        ControlProblem p = concave_problem();
        p.state_dim = 2;
        p.noise_dim = 2;
        p.controls = ControlSet(1, 1.0);
        p.domain = Box::whole(2);
        p.drift = [](double, const Vec&, const Vec&) { return Vec(Vec::Zero(2)); };
        p.diffusion = [](double, const Vec&, const Vec& u) { return Mat(u[0] * Mat::Identity(2, 2)); };
        return p;
    }();
    const SpatialGrid grid = SpatialGrid::uniform2(-1, 1, 11, -1, 1, 11);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::abs(x[0]) + std::abs(x[1]); });
    FaceliftOptions opt;
    GridFunction w = facelift_general(g, pr, opt);
    FaceliftReport rep = verify_facelift(w, g, pr, 1e-6);
    EXPECT_TRUE(rep.dominance_ok);
    EXPECT_TRUE(rep.complementarity_ok) << rep.worst_complementarity;
    EXPECT_GT(w[grid.flat_index({5, 5})], g[grid.flat_index({5, 5})] + 0.5);
}

TEST(VerifyFacelift, EnvelopeOfAbsoluteValuePasses) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 41);
    GridFunction g = GridFunction::sample(grid, pr.payoff);
    FaceliftReport rep = verify_facelift(concave_envelope(g), g, pr, 1e-9);
    EXPECT_TRUE(rep.passed());
    EXPECT_GT(rep.probes, 0u);
}

TEST(VerifyFacelift, ConcavePayoffItselfPasses) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.25, 4.0, 41);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::sqrt(x[0]); });
    EXPECT_TRUE(verify_facelift(g, g, pr, 1e-9).passed());
}

TEST(VerifyFacelift, RaisedPayoffIsNotMinimal) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.25, 4.0, 41);
    GridFunction g = GridFunction::sample(grid, [](const Vec& x) { return std::sqrt(x[0]); });
    GridFunction raised = g;
    for (double& y : raised.values) y += 1.0;
    FaceliftReport rep = verify_facelift(raised, g, pr, 1e-9);
    EXPECT_FALSE(rep.minimal);
    EXPECT_FALSE(rep.passed());
    EXPECT_TRUE(rep.dominance_ok);
}

TEST(VerifyFacelift, BelowPayoffFailsDominance) {
    const ControlProblem pr = concave_problem();
    const SpatialGrid grid = SpatialGrid::uniform(0.0, 2.0, 21);
    GridFunction g = GridFunction::sample(grid, pr.payoff);
    GridFunction w = concave_envelope(g);
    w[10] = g[10] - 0.5;
    EXPECT_FALSE(verify_facelift(w, g, pr, 1e-9).dominance_ok);
}

TEST(VerifyFacelift, GridMismatchRejected) {
    const ControlProblem pr = concave_problem();
    GridFunction a = GridFunction::sample(SpatialGrid::uniform(0.0, 2.0, 21), pr.payoff);
    GridFunction b = GridFunction::sample(SpatialGrid::uniform(0.0, 2.0, 23), pr.payoff);
    EXPECT_THROW(verify_facelift(a, b, pr, 1e-9), ArgumentError);
}
