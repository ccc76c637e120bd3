#include <gtest/gtest.h>

#include <sstream>

#include "hjbcert/spec_io.hpp"

using namespace hjbcert;

TEST(ProblemJson, MertonFamily) {
    const json j = json::parse(R"({"family": "merton", "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "B": 10}, "horizon": 1})");
    const ControlProblem pr = problem_from_json(j);
    EXPECT_EQ(pr.name, "merton");
    EXPECT_EQ(pr.controls.bound(), 10.0);
    EXPECT_EQ(pr.constraint.kind, ConstraintKind::concavity);
    EXPECT_DOUBLE_EQ(pr.drift(0.0, vec1(2.0), vec1(3.0))[0], 0.1 * 3.0 * 2.0);
    EXPECT_DOUBLE_EQ(pr.payoff(vec1(4.0)), 2.0);
    EXPECT_FALSE(pr.in_domain(vec1(0.0)));
}

TEST(ProblemJson, ConstantFamilyDefaults) {
    const json j = json::parse(R"({"family": "constant", "params": {"b": [0.5], "s": [[0.3]]},
                                    "payoff": {"type": "constant", "value": 2}})");
    const ControlProblem pr = problem_from_json(j);
    EXPECT_EQ(pr.controls.bound(), 0.0);
    EXPECT_EQ(pr.constraint.kind, ConstraintKind::positive_constant);
    EXPECT_EQ(pr.drift(0.0, vec1(9.0), vec1(0.0))[0], 0.5);
    EXPECT_EQ(pr.diffusion(0.0, vec1(9.0), vec1(0.0))(0, 0), 0.3);
    EXPECT_EQ(pr.payoff(vec1(-3.0)), 2.0);
}

TEST(ProblemJson, LinearDriftAndDefaultConstraint) {
    const json j = json::parse(R"({"family": "linear_drift",
        "params": {"b0": [1], "bx": [[-0.5]], "bu": [[2]], "s0": [[0.1]], "su": [[[1]]]},
        "controls": {"dim": 1, "bound": 3},
        "payoff": {"type": "abs", "center": 1}})");
    const ControlProblem pr = problem_from_json(j);
    EXPECT_DOUBLE_EQ(pr.drift(0.0, vec1(2.0), vec1(1.5))[0], 1.0 - 1.0 + 3.0);
    EXPECT_DOUBLE_EQ(pr.diffusion(0.0, vec1(2.0), vec1(1.5))(0, 0), 0.1 + 1.5);
    EXPECT_EQ(pr.constraint.kind, ConstraintKind::concavity);
    EXPECT_DOUBLE_EQ(pr.payoff(vec1(-1.0)), 2.0);
}

TEST(ProblemJson, ProportionalControlLivesOnPositiveOrthant) {
    const json j = json::parse(R"({"family": "proportional_control",
        "params": {"mu": [[0.1]], "sigma": [[[0.2]]]},
        "controls": {"bound": 5, "pieces": [{"lower": [-5], "upper": [5]}]},
        "payoff": {"type": "power", "exponent": 0.5}})");
    const ControlProblem pr = problem_from_json(j);
    EXPECT_FALSE(pr.in_domain(vec1(-1.0)));
    EXPECT_DOUBLE_EQ(pr.drift(0.0, vec1(2.0), vec1(3.0))[0], 0.6);
    EXPECT_DOUBLE_EQ(pr.diffusion(0.0, vec1(2.0), vec1(3.0))(0, 0), 1.2);
    EXPECT_EQ(pr.constraint.kind, ConstraintKind::positive_constant);
}

TEST(ProblemJson, TableCoefficientsInterpolate) {
    const json j = json::parse(R"({"family": "table",
        "params": {"x": [0, 1], "u": [-1, 1], "b": [[0, 2], [2, 4]], "sigma": [[1, 1], [1, 1]]},
        "controls": {"bound": 1, "pieces": [{"lower": [-1], "upper": [1]}]}})");
    const ControlProblem pr = problem_from_json(j);
    EXPECT_DOUBLE_EQ(pr.drift(0.0, vec1(0.5), vec1(0.0))[0], 2.0);
    EXPECT_DOUBLE_EQ(pr.drift(0.0, vec1(5.0), vec1(1.0))[0], 4.0);
}

TEST(ProblemJson, Errors) {
    EXPECT_THROW(problem_from_json(json::parse(R"({"family": "nope"})")), UnsupportedError);
    EXPECT_THROW(problem_from_json(json::parse(R"({"params": {}})")), InputError);
    EXPECT_THROW(problem_from_json(json::parse(R"({"family": "linear_drift"})")), ArgumentError);
    EXPECT_THROW(problem_from_json(json::parse(R"({"family": "merton", "params": {"p": 2}})")), ArgumentError);
    EXPECT_THROW(problem_from_json(json::parse(R"({"family": "heat", "payoff": {"type": "wavy"}})")), UnsupportedError);
}

TEST(StateFunctions, Catalogue) {
    auto f = [](const char* s) { return io::state_function(json::parse(s), 1, "f"); };
    EXPECT_DOUBLE_EQ(f(R"({"type": "quadratic", "center": 1, "coef": 2})")(vec1(3.0)), 8.0);
    EXPECT_DOUBLE_EQ(f(R"({"type": "affine", "a": 1, "b": [2]})")(vec1(3.0)), 7.0);
    EXPECT_DOUBLE_EQ(f(R"({"type": "call", "strike": 1, "scale": 2, "offset": 0.5})")(vec1(3.0)), 4.5);
    EXPECT_DOUBLE_EQ(f(R"({"type": "piecewise_linear", "x": [0, 1, 2], "y": [0, 1, 0]})")(vec1(1.5)), 0.5);
    EXPECT_THROW(f(R"({"type": "piecewise_linear", "x": [0, 0], "y": [0, 1]})"), ArgumentError);
}

TEST(GridJson, AxesSchemeAndFacelift) {
    const json j = json::parse(R"({"axes": [{"lower": 0.2, "upper": 5, "nodes": 11, "spacing": "log"}],
        "scheme": {"time_nodes": 21, "control_resolution": 31, "boundary": "gauge", "constraint_mode": "penalize"},
        "facelift": {"tol": 1e-9, "edges": "free"}})");
    GridSpec g = grid_spec_from_json(j);
    EXPECT_EQ(g.grid.size(), 11u);
    EXPECT_TRUE(g.grid.has_log_axis());
    EXPECT_DOUBLE_EQ(g.grid.axis(0).physical(10), 5.0);
    EXPECT_EQ(g.scheme.time_nodes, 21u);
    EXPECT_EQ(g.scheme.boundary, BoundaryMode::gauge);
    EXPECT_EQ(g.scheme.constraint_mode, ConstraintMode::penalize);
    EXPECT_EQ(g.facelift.edges, EdgeRule::free);
    SchemeConfig back = scheme_from_json(to_json(g.scheme));
    EXPECT_EQ(to_json(back), to_json(g.scheme));
    FaceliftOptions fo = facelift_options_from_json(to_json(g.facelift));
    EXPECT_EQ(to_json(fo), to_json(g.facelift));
    EXPECT_THROW(grid_spec_from_json(json::parse(R"({"axes": [{"lower": 0, "upper": 1, "nodes": 2}]})")), ArgumentError);
    EXPECT_THROW(scheme_from_json(json::parse(R"({"boundary": "reflect"})")), ConfigError);
}

TEST(SolutionCsv, RoundTripIsExact) {
    MertonParams m;
    const ControlProblem pr = merton_problem(m);
    SchemeConfig cfg;
    cfg.time_nodes = 4;
    cfg.control_resolution = 11;
    const SpatialGrid grid = SpatialGrid::log_uniform(0.2, 5.0, 15);
    SpaceTimeSolution sol = solve_hjb(pr, make_terminal(pr, grid, TerminalKind::facelift), cfg);
    std::stringstream ss;
    write_solution_csv(ss, sol);
    SolutionTable t = read_table_csv(ss);
    ASSERT_EQ(t.times, sol.times);
    for (std::size_t n = 0; n < sol.times.size(); ++n) EXPECT_EQ(t.values[n], sol.slices[n].values);
    const FeedbackPolicy a = extract_policy(sol), b = t.policy("table");
    for (double tt : {0.0, 0.4, 0.99})
        for (double x : {0.3, 1.0, 4.0}) EXPECT_EQ(a(tt, vec1(x))[0], b(tt, vec1(x))[0]);
    std::stringstream again;
    write_table_csv(again, t);
    std::stringstream first;
    write_solution_csv(first, sol);
    EXPECT_EQ(again.str(), first.str());
}

TEST(SolutionCsv, MalformedTablesRejected) {
    std::stringstream missing("t,x0,value\n0,1,2\n0,2,3\n1,1,2\n");
    EXPECT_THROW(read_table_csv(missing), ArgumentError);
    std::stringstream nothing("t,x0\n0,1\n");
    EXPECT_THROW(read_table_csv(nothing), ArgumentError);
    std::stringstream pts("t,x0\n0,1\n0.5,2\n");
    auto p = read_points_csv(pts);
    ASSERT_EQ(p.size(), 2u);
    EXPECT_EQ(p[1].first, 0.5);
}

TEST(Candidates, MertonClosedForm) {
    const ControlProblem pr = problem_from_json(json::parse(R"({"family": "merton"})"));
    const json j = json::parse(R"({"kind": "super", "type": "closed-form", "family": "merton",
                                   "params": {"mu": 0.1, "sigma": 0.2, "p": 0.5, "delta": 0.05}})");
    CandidateFunction w = candidate_from_json(j, pr);
    EXPECT_EQ(w.kind, CandidateKind::super);
    EXPECT_NEAR(w(0.0, vec1(1.0)), std::exp(0.175), 1e-14);
    EXPECT_NEAR(w.policies.front()(0.0, vec1(1.0))[0], 5.0, 1e-12);
    EXPECT_THROW(candidate_from_json(json::parse(R"({"kind": "both", "type": "constant", "value": 1})"), pr), ArgumentError);
}

TEST(Candidates, ConstantInfersGrowthConstant) {
    const ControlProblem pr = problem_from_json(json::parse(R"({"family": "merton"})"));
    CandidateFunction w = candidate_from_json(json::parse(R"({"kind": "sub", "type": "constant", "value": 0.5})"), pr);
    EXPECT_TRUE(std::isnan(w.growth_constant));
    TestConfig cfg;
    cfg.test_box = Box::interval(0.5, 2.0);
    cfg.paths_per_test = 50;
    CertificationReport rep = certify_subsolution(w, pr, cfg);
    EXPECT_TRUE(rep.passed);
}

TEST(Candidates, PolicyOverride) {
    const ControlProblem pr = problem_from_json(json::parse(R"({"family": "merton", "params": {"B": 2}})"));
    const json j = json::parse(R"({"kind": "sub", "type": "constant", "value": 0.1, "policy": {"type": "constant", "u": [1.5], "id": "mine"}})");
    CandidateFunction w = candidate_from_json(j, pr);
    ASSERT_EQ(w.policies.size(), 1u);
    EXPECT_EQ(w.policies.front().id, "mine");
    EXPECT_THROW(policy_from_json(json::parse(R"({"type": "constant", "u": [3]})"), pr), ArgumentError);
    FeedbackPolicy opt = policy_from_json(json::parse(R"({"type": "merton-optimal"})"), pr);
    EXPECT_EQ(opt(0.0, vec1(1.0))[0], 2.0);
}

TEST(Reports, CertificationJsonNamesFailures) {
    CertificationReport r;
    r.candidate = "w";
    r.kind = CandidateKind::sub;
    TestRecord t;
    t.passed = false;
    t.policy_id = "companion";
    r.tests.push_back(t);
    r.passed = false;
    r.verdict = "not certified";
    const json j = to_json(r);
    EXPECT_EQ(j.at("failing").size(), 1u);
    CertificationReport back = report_summary_from_json(j);
    EXPECT_EQ(back.candidate, "w");
    EXPECT_FALSE(back.passed);
}
