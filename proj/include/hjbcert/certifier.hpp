#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hjbcert/parallel.hpp"
#include "hjbcert/policy.hpp"
#include "hjbcert/problem.hpp"
#include "hjbcert/simulator.hpp"

namespace hjbcert {

enum class CandidateKind { sub, super };

inline const char* to_string(CandidateKind k) { return k == CandidateKind::sub ? "sub" : "super"; }

/// A (t, x) function proposed as a stochastic sub- or super-solution.
/// Sub-candidates carry companion policies; `select` picks one per test start (τ, ξ).
struct CandidateFunction {
    std::string name = "candidate";
    CandidateKind kind = CandidateKind::sub;
    std::function<double(double t, const Vec& x)> eval;
    /// C in |w| <= C ψ; NaN lets the certifier infer it on the test box.
    double growth_constant = 1.0;
    std::vector<FeedbackPolicy> policies;
    std::function<std::size_t(double t, const Vec& x)> select;

    double operator()(double t, const Vec& x) const { return eval(t, x); }

    const FeedbackPolicy& companion(double t, const Vec& x) const {
        const std::size_t i = select ? select(t, x) : 0;
        return policies.at(i);
    }

    /// L(v): the largest declared bound among the companion policies.
    double policy_bound() const {
        double b = 0.0;
        for (const auto& p : policies) b = std::max(b, p.bound);
        return b;
    }
};

struct TestConfig {
    /// Compact start region for ξ; also the region of the terminal and growth checks.
    Box test_box;
    double z = 4.0;
    double tol = 1e-4;
    std::size_t steps_per_horizon = 32;
    std::size_t paths_per_test = 100000;
    std::uint64_t seed = 1;
    int threads = 1;
    bool stop_on_first_failure = false;
    /// Start times as fractions of T.
    std::vector<double> start_fractions{0.0, 0.25, 0.5, 0.75};
    /// Ball radius as a fraction of the widest side of the test box.
    double ball_fraction = 0.25;
    std::size_t probe_nodes = 101;
    std::size_t probe_times = 5;

    void validate(int dim) const {
        if (test_box.dim() != dim || test_box.empty() || !test_box.bounded())
            throw ConfigError("certifier: test box must be a bounded nonempty box of the state dimension");
        if (!(z >= 0.0) || !(tol >= 0.0)) throw ConfigError("certifier: z and tol must be >= 0");
        if (steps_per_horizon < 8 || steps_per_horizon % 8 != 0)
            throw ConfigError("certifier: steps per horizon must be a positive multiple of 8");
        if (paths_per_test < 2) throw ConfigError("certifier: need at least 2 paths per test");
        if (probe_nodes < 2 || probe_times < 1) throw ConfigError("certifier: probe sizes too small");
    }
};

struct AdversaryConfig {
    /// Supplied adversaries, tried first (typically the HJB argmax policy).
    std::vector<FeedbackPolicy> policies;
    std::size_t random_policies = 4;
    std::size_t segments = 4;
    bool corners = true;
    std::size_t constant_levels = 5;
    std::uint64_t seed = 7;
};

enum class StopKind { fixed, horizon, ball };

inline const char* to_string(StopKind k) {
    switch (k) {
        case StopKind::fixed: return "tau+T/8";
        case StopKind::horizon: return "T";
        default: return "ball-exit";
    }
}

struct TestRecord {
    double tau = 0.0;
    StopKind stop = StopKind::fixed;
    double rho = 0.0;
    double radius = 0.0;
    std::string policy_id;
    std::size_t paths = 0;
    double margin = 0.0;
    double stderr_ = 0.0;
    double threshold = 0.0;
    double exit_fraction = 0.0;
    bool passed = true;
    bool skipped = false;

    std::string label() const {
        std::ostringstream os;
        os << "tau=" << tau << " rho=" << to_string(stop) << " policy=" << policy_id;
        return os.str();
    }
};

struct CheckRecord {
    std::string name;
    std::size_t points = 0;
    double worst = 0.0;
    bool passed = true;
};

struct CertificationReport {
    std::string candidate;
    CandidateKind kind = CandidateKind::sub;
    std::vector<TestRecord> tests;
    std::vector<CheckRecord> checks;
    std::string adversary_class;
    TestConfig config;
    bool passed = true;
    std::string verdict;

    std::vector<const TestRecord*> failing() const {
        std::vector<const TestRecord*> out;
        for (const auto& t : tests)
            if (!t.skipped && !t.passed) out.push_back(&t);
        return out;
    }
};

namespace detail {

inline std::vector<Vec> box_lattice(const Box& box, std::size_t n) {
    std::vector<Vec> pts;
    const int d = box.dim();
    auto coord = [&](int i, std::size_t k) {
        return box.lower[static_cast<std::size_t>(i)] + box.width(i) * static_cast<double>(k) / static_cast<double>(n - 1);
    };
    if (d == 1) {
        for (std::size_t k = 0; k < n; ++k) pts.push_back(vec1(coord(0, k)));
    } else {
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) pts.push_back(vec2(coord(0, a), coord(1, b)));
    }
    return pts;
}

inline std::vector<CheckRecord> static_checks(const CandidateFunction& w, const ControlProblem& problem,
                                              const TestConfig& cfg) {
    const auto pts = detail::box_lattice(cfg.test_box, cfg.probe_nodes);
    const double T = problem.horizon;
    CheckRecord term{w.kind == CandidateKind::sub ? "terminal w(T,x) <= g(x)" : "terminal w(T,x) >= g(x)", 0, 0.0, true};
    for (const Vec& x : pts) {
        if (!problem.in_domain(x)) continue;
        const double diff = w.kind == CandidateKind::sub ? problem.payoff(x) - w(T, x) : w(T, x) - problem.payoff(x);
        term.worst = term.points == 0 ? diff : std::min(term.worst, diff);
        ++term.points;
        if (!(diff >= -cfg.tol)) term.passed = false;
    }
    CheckRecord growth{"growth |w| <= C psi", 0, 0.0, true};
    double c = w.growth_constant;
    if (std::isnan(c)) {
        // No declared constant: take the smallest one that holds on the probe lattice.
        growth.name = "growth |w| <= C psi (C inferred)";
        c = 0.0;
        for (std::size_t k = 0; k < cfg.probe_times; ++k) {
            const double t = cfg.probe_times == 1 ? 0.0 : T * static_cast<double>(k) / static_cast<double>(cfg.probe_times - 1);
            for (const Vec& x : pts)
                if (problem.in_domain(x)) c = std::max(c, std::abs(w(t, x)) / problem.gauge(x));
        }
    }
    for (std::size_t k = 0; k < cfg.probe_times; ++k) {
        const double t = cfg.probe_times == 1 ? 0.0 : T * static_cast<double>(k) / static_cast<double>(cfg.probe_times - 1);
        for (const Vec& x : pts) {
            if (!problem.in_domain(x)) continue;
            const double slack = c * problem.gauge(x) - std::abs(w(t, x));
            growth.worst = growth.points == 0 ? slack : std::min(growth.worst, slack);
            ++growth.points;
            if (!(slack >= -cfg.tol)) growth.passed = false;
        }
    }
    std::vector<CheckRecord> out{term, growth};
    if (w.kind == CandidateKind::sub) {
        CheckRecord pb{"companion bound L(v) <= B", w.policies.size(), problem.controls.bound() - w.policy_bound(), true};
        pb.passed = pb.worst >= -1e-12;
        out.push_back(pb);
    }
    return out;
}

struct Battery {
    double tau;
    StopKind stop;
};

inline std::vector<Battery> battery(const TestConfig& cfg) {
    std::vector<Battery> out;
    for (double f : cfg.start_fractions)
        for (StopKind k : {StopKind::fixed, StopKind::horizon, StopKind::ball}) out.push_back({f, k});
    return out;
}

/// Runs one martingale test. policy_for(ξ) gives the control rule used from (τ, ξ).
template <class PolicyFor>
TestRecord run_test(const CandidateFunction& w, const ControlProblem& problem, const TestConfig& cfg, double tau,
                    StopKind stop, std::uint64_t stream, PolicyFor&& policy_for, const std::string& policy_id) {
    const double T = problem.horizon;
    const double dt = T / static_cast<double>(cfg.steps_per_horizon);
    const auto start_step = static_cast<std::size_t>(std::llround(tau / dt));
    const std::size_t to_end = cfg.steps_per_horizon - start_step;
    const std::size_t max_steps = stop == StopKind::fixed ? std::min(cfg.steps_per_horizon / 8, to_end) : to_end;
    double widest = 0.0;
    for (int i = 0; i < cfg.test_box.dim(); ++i) widest = std::max(widest, cfg.test_box.width(i));
    const double radius = cfg.ball_fraction * widest;

    SdeStepper st(problem);
    std::vector<double> diffs(cfg.paths_per_test);
    std::vector<char> exited(cfg.paths_per_test, 0);
    parallel_for(cfg.paths_per_test, cfg.threads, [&](std::size_t begin, std::size_t end) {
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (std::size_t p = begin; p < end; ++p) {
            std::mt19937_64 rng(stream_seed(cfg.seed, stream, p));
            Vec xi(problem.state_dim);
            for (int i = 0; i < problem.state_dim; ++i)
                xi[i] = cfg.test_box.lower[static_cast<std::size_t>(i)] + cfg.test_box.width(i) * unit(rng);
            const FeedbackPolicy& pol = policy_for(xi);
            PathEnd e;
            if (stop == StopKind::ball)
                e = run_path(st, pol, tau, xi, dt, max_steps, rng, [&](double, const Vec& x) { return (x - xi).norm() >= radius; });
            else
                e = run_path(st, pol, tau, xi, dt, max_steps, rng, [](double, const Vec&) { return false; });
            const double start = w(tau, xi);
            const double finish = w(e.t, e.x);
            diffs[p] = w.kind == CandidateKind::sub ? finish - start : start - finish;
            exited[p] = e.exited;
        }
    });
    ValueEstimate s = summarize(diffs);
    TestRecord rec;
    rec.tau = tau;
    rec.stop = stop;
    rec.rho = stop == StopKind::fixed ? tau + static_cast<double>(max_steps) * dt : T;
    rec.radius = stop == StopKind::ball ? radius : 0.0;
    rec.policy_id = policy_id;
    rec.paths = cfg.paths_per_test;
    rec.margin = s.mean;
    rec.stderr_ = s.stderr_;
    rec.threshold = -cfg.z * s.stderr_ - cfg.tol;
    rec.passed = rec.margin >= rec.threshold;
    std::size_t n_exit = 0;
    for (char c : exited) n_exit += c != 0;
    rec.exit_fraction = static_cast<double>(n_exit) / static_cast<double>(cfg.paths_per_test);
    return rec;
}

/// z with P(N(0,1) > z) = alpha, by bisection on erfc.
inline double normal_upper_quantile(double alpha) {
    double lo = 0.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (0.5 * std::erfc(mid / std::sqrt(2.0)) > alpha ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline double joint_growth(double c1, double c2) {
    if (std::isnan(c1) || std::isnan(c2)) return std::numeric_limits<double>::quiet_NaN();
    return std::max(c1, c2);
}

inline void finish(CertificationReport& rep, const std::string& pass_verdict) {
    rep.passed = true;
    for (const auto& c : rep.checks) rep.passed = rep.passed && c.passed;
    for (const auto& t : rep.tests) rep.passed = rep.passed && (t.skipped || t.passed);
    rep.verdict = rep.passed ? pass_verdict : "not certified";
}

}  // namespace detail

/// Monte-Carlo test of w(τ, ξ) <= E[w(ρ, X_ρ)] under the companion policy, over
/// the battery τ ∈ {start fractions}·T, ρ ∈ {τ + T/8, T, ball exit}, plus the
/// terminal, growth and policy-bound checks. A test fails when its mean margin
/// is below -z·stderr - tol.
inline CertificationReport certify_subsolution(const CandidateFunction& w, const ControlProblem& problem,
                                               const TestConfig& cfg) {
    if (w.kind != CandidateKind::sub) throw ArgumentError("certify_subsolution: candidate is not a sub-candidate");
    if (w.policies.empty()) throw ArgumentError("certify_subsolution: candidate has no companion policy");
    if (!w.eval) throw ArgumentError("certify_subsolution: candidate has no evaluator");
    cfg.validate(problem.state_dim);
    CertificationReport rep;
    rep.candidate = w.name;
    rep.kind = CandidateKind::sub;
    rep.config = cfg;
    rep.checks = detail::static_checks(w, problem, cfg);
    bool failed = std::any_of(rep.checks.begin(), rep.checks.end(), [](const CheckRecord& c) { return !c.passed; });
    // An out-of-bound companion cannot be simulated.
    const bool infeasible = !rep.checks.back().passed;
    std::uint64_t stream = 1;
    for (const auto& b : detail::battery(cfg)) {
        const double tau = b.tau * problem.horizon;
        if (infeasible || (failed && cfg.stop_on_first_failure)) {
            TestRecord skip;
            skip.tau = tau;
            skip.stop = b.stop;
            skip.skipped = true;
            skip.policy_id = "companion";
            rep.tests.push_back(skip);
            ++stream;
            continue;
        }
        TestRecord rec = detail::run_test(
            w, problem, cfg, tau, b.stop, stream++,
            [&](const Vec& xi) -> const FeedbackPolicy& { return w.companion(tau, xi); }, "companion");
        failed = failed || !rec.passed;
        rep.tests.push_back(rec);
    }
    detail::finish(rep, "certified (statistical)");
    return rep;
}

/// Piecewise-constant in time, values drawn once from the control set.
inline FeedbackPolicy random_piecewise_policy(const ControlSet& controls, double horizon, std::size_t segments,
                                              std::uint64_t seed, std::string id) {
    std::mt19937_64 rng(seed);
    std::vector<Vec> values;
    for (std::size_t s = 0; s < segments; ++s) values.push_back(controls.sample(rng));
    FeedbackPolicy p;
    p.bound = controls.bound();
    p.id = std::move(id);
    p.rule = [values, horizon](double t, const Vec&) {
        auto s = static_cast<std::size_t>(std::floor(t / horizon * static_cast<double>(values.size())));
        return values[std::min(s, values.size() - 1)];
    };
    return p;
}

/// Supplied policies, then random piecewise-constant ones, box corners and constant levels.
inline std::vector<FeedbackPolicy> adversary_class(const ControlProblem& problem, const AdversaryConfig& adv,
                                                   std::string* description = nullptr) {
    std::vector<FeedbackPolicy> out = adv.policies;
    for (std::size_t i = 0; i < adv.random_policies; ++i)
        out.push_back(random_piecewise_policy(problem.controls, problem.horizon, adv.segments,
                                              stream_seed(adv.seed, 99, i), "random-pc-" + std::to_string(i)));
    std::size_t n_corners = 0;
    if (adv.corners)
        for (const Vec& c : problem.controls.corners()) {
            std::ostringstream id;
            id << "corner(" << c.transpose() << ")";
            out.push_back(constant_policy(c, id.str()));
            ++n_corners;
        }
    std::size_t n_levels = 0;
    if (adv.constant_levels > 0)
        for (const Vec& u : problem.controls.grid(static_cast<int>(adv.constant_levels))) {
            std::ostringstream id;
            id << "constant(" << u.transpose() << ")";
            FeedbackPolicy p = constant_policy(u, id.str());
            p.bound = std::min(p.bound, problem.controls.bound());
            out.push_back(p);
            ++n_levels;
        }
    if (description) {
        std::ostringstream d;
        d << "supplied[";
        for (std::size_t i = 0; i < adv.policies.size(); ++i) d << (i ? "," : "") << adv.policies[i].id;
        d << "] + random piecewise-constant " << adv.random_policies << "x" << adv.segments << " + corners "
          << n_corners << " + constants " << n_levels;
        *description = d.str();
    }
    return out;
}

/// Monte-Carlo test of E[w(ρ, X_ρ)] <= w(τ, ξ) for every adversary in the class.
inline CertificationReport certify_supersolution(const CandidateFunction& w, const ControlProblem& problem,
                                                 const TestConfig& cfg, const AdversaryConfig& adv = {}) {
    if (w.kind != CandidateKind::super) throw ArgumentError("certify_supersolution: candidate is not a super-candidate");
    if (!w.eval) throw ArgumentError("certify_supersolution: candidate has no evaluator");
    cfg.validate(problem.state_dim);
    CertificationReport rep;
    rep.candidate = w.name;
    rep.kind = CandidateKind::super;
    rep.config = cfg;
    const auto adversaries = adversary_class(problem, adv, &rep.adversary_class);
    rep.checks = detail::static_checks(w, problem, cfg);
    bool failed = std::any_of(rep.checks.begin(), rep.checks.end(), [](const CheckRecord& c) { return !c.passed; });
    std::uint64_t stream = 1;
    for (const auto& pol : adversaries) {
        if (pol.bound > problem.controls.bound() + 1e-12)
            throw ArgumentError("certify_supersolution: adversary '" + pol.id + "' exceeds the control bound");
        for (const auto& b : detail::battery(cfg)) {
            const double tau = b.tau * problem.horizon;
            if (failed && cfg.stop_on_first_failure) {
                TestRecord skip;
                skip.tau = tau;
                skip.stop = b.stop;
                skip.skipped = true;
                skip.policy_id = pol.id;
                rep.tests.push_back(skip);
                ++stream;
                continue;
            }
            TestRecord rec = detail::run_test(
                w, problem, cfg, tau, b.stop, stream++, [&](const Vec&) -> const FeedbackPolicy& { return pol; }, pol.id);
            failed = failed || !rec.passed;
            rep.tests.push_back(rec);
        }
    }
    detail::finish(rep, "certified (statistical, adversary class A)");
    return rep;
}

/// max(w1, w2) with the switching companion: at a test start (τ, ξ) follow w1's
/// policy when w1(τ, ξ) >= w2(τ, ξ), otherwise w2's.
inline CandidateFunction lattice_max(const CandidateFunction& w1, const CandidateFunction& w2) {
    if (w1.kind != CandidateKind::sub || w2.kind != CandidateKind::sub)
        throw ArgumentError("lattice_max: both candidates must be sub-candidates");
    if (w1.policies.empty() || w2.policies.empty()) throw ArgumentError("lattice_max: missing companion policy");
    CandidateFunction out;
    out.name = "max(" + w1.name + "," + w2.name + ")";
    out.kind = CandidateKind::sub;
    out.growth_constant = detail::joint_growth(w1.growth_constant, w2.growth_constant);
    auto e1 = w1.eval, e2 = w2.eval;
    out.eval = [e1, e2](double t, const Vec& x) { return std::max(e1(t, x), e2(t, x)); };
    out.policies = w1.policies;
    out.policies.insert(out.policies.end(), w2.policies.begin(), w2.policies.end());
    auto s1 = w1.select, s2 = w2.select;
    const std::size_t n1 = w1.policies.size();
    out.select = [e1, e2, s1, s2, n1](double t, const Vec& x) -> std::size_t {
        if (e1(t, x) >= e2(t, x)) return s1 ? s1(t, x) : 0;
        return n1 + (s2 ? s2(t, x) : 0);
    };
    return out;
}

inline CandidateFunction lattice_min(const CandidateFunction& w1, const CandidateFunction& w2) {
    if (w1.kind != CandidateKind::super || w2.kind != CandidateKind::super)
        throw ArgumentError("lattice_min: both candidates must be super-candidates");
    CandidateFunction out;
    out.name = "min(" + w1.name + "," + w2.name + ")";
    out.kind = CandidateKind::super;
    out.growth_constant = detail::joint_growth(w1.growth_constant, w2.growth_constant);
    auto e1 = w1.eval, e2 = w2.eval;
    out.eval = [e1, e2](double t, const Vec& x) { return std::min(e1(t, x), e2(t, x)); };
    return out;
}

struct BracketConfig {
    std::size_t n_paths = 100000;
    std::size_t steps_per_horizon = 64;
    std::uint64_t seed = 11;
    int threads = 1;
    double tol = 1e-4;
    /// Extra policies tried for the Monte-Carlo value besides the sub companion.
    std::vector<FeedbackPolicy> policies;
};

struct BracketPoint {
    double t = 0.0;
    Vec x;
    double sub = 0.0;
    double super = 0.0;
    double mc = 0.0;
    /// Per-point 95% half-width.
    double half_width = 0.0;
    /// Half-width of the simultaneous 95% interval over all points of the report.
    double joint_half_width = 0.0;
    double exit_fraction = 0.0;
    std::string best_policy;
    double gap = 0.0;
    /// mc + joint CI - sub and super + joint CI - mc; both >= 0 for a consistent sandwich.
    double sub_margin = 0.0;
    double super_margin = 0.0;
    bool ordered = true;
};

struct BracketReport {
    std::string sub_name;
    std::string super_name;
    std::vector<BracketPoint> points;
    bool passed = true;
    double max_gap = 0.0;
};

/// Sandwich sub <= MC estimate <= super at each point, judged with simultaneous
/// 95% intervals over all points. The Monte-Carlo value is
/// the best estimate among the sub companion and the supplied policies, all
/// driven by common random numbers.
inline BracketReport bracket_report(const CandidateFunction& sub, const CertificationReport& sub_report,
                                    const CandidateFunction& sup, const CertificationReport& super_report,
                                    const ControlProblem& problem, const std::vector<std::pair<double, Vec>>& points,
                                    const BracketConfig& cfg) {
    if (sub.kind != CandidateKind::sub || sup.kind != CandidateKind::super)
        throw ArgumentError("bracket_report: expected a sub- and a super-candidate");
    if (sub_report.candidate != sub.name || sub_report.kind != CandidateKind::sub || !sub_report.passed)
        throw ArgumentError("bracket_report: sub-candidate lacks a passing certification report");
    if (super_report.candidate != sup.name || super_report.kind != CandidateKind::super || !super_report.passed)
        throw ArgumentError("bracket_report: super-candidate lacks a passing certification report");
    if (points.empty()) throw ArgumentError("bracket_report: no points");
    // Bonferroni over both sides of every point.
    const double z_joint = detail::normal_upper_quantile(0.05 / (2.0 * static_cast<double>(points.size())));
    BracketReport rep;
    rep.sub_name = sub.name;
    rep.super_name = sup.name;
    const double T = problem.horizon;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& [t, x] = points[i];
        if (!(t >= 0.0 && t < T) || !problem.in_domain(x)) throw DomainError("bracket_report: point outside [0,T) x O");
        PolicyFamily fam;
        if (!sub.policies.empty()) fam.members.push_back(sub.companion(t, x));
        for (const auto& p : cfg.policies) fam.members.push_back(p);
        if (fam.members.empty()) fam.members.push_back(constant_policy(problem.controls.grid(1).front()));
        SimulationConfig sc;
        sc.t0 = t;
        sc.x0 = x;
        sc.n_paths = cfg.n_paths;
        sc.n_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((T - t) / T * static_cast<double>(cfg.steps_per_horizon))));
        sc.seed = stream_seed(cfg.seed, 5, i);
        sc.threads = cfg.threads;
        OptimizationResult best = optimize_policy(problem, fam, sc, fam.members.size());
        BracketPoint bp;
        bp.t = t;
        bp.x = x;
        bp.sub = sub(t, x);
        bp.super = sup(t, x);
        bp.mc = best.estimate.mean;
        bp.half_width = best.estimate.half_width_95;
        bp.joint_half_width = z_joint * best.estimate.stderr_;
        bp.exit_fraction = best.estimate.exit_fraction;
        bp.best_policy = best.best.id;
        bp.gap = bp.super - bp.sub;
        bp.sub_margin = bp.mc + bp.joint_half_width - bp.sub;
        bp.super_margin = bp.super + bp.joint_half_width - bp.mc;
        bp.ordered = bp.sub_margin >= 0.0 && bp.super_margin >= 0.0 && bp.sub <= bp.super + cfg.tol;
        rep.passed = rep.passed && bp.ordered;
        rep.max_gap = std::max(rep.max_gap, bp.gap);
        rep.points.push_back(bp);
    }
    return rep;
}

}  // namespace hjbcert
