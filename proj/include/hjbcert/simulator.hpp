#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hjbcert/parallel.hpp"
#include "hjbcert/policy.hpp"
#include "hjbcert/problem.hpp"

namespace hjbcert {

/// One Euler–Maruyama step at a time. Dimensions whose domain is exactly
/// (0, ∞) are advanced in ln x, which keeps them positive.
class SdeStepper {
public:
    SdeStepper(const ControlProblem& problem, std::optional<Box> sim_box = std::nullopt)
        : pr_(&problem), box_(std::move(sim_box)) {
        problem.validate();
        if (problem.has_log_dims()) throw ArgumentError("simulator expects a problem in its original coordinates");
        for (int i = 0; i < problem.state_dim; ++i)
            log_.push_back(problem.domain.lower[static_cast<std::size_t>(i)] == 0.0 &&
                           problem.domain.upper[static_cast<std::size_t>(i)] == kInf);
    }

    const ControlProblem& problem() const { return *pr_; }
    bool log_dim(int i) const { return log_[static_cast<std::size_t>(i)]; }

    bool inside(const Vec& x) const {
        if (!pr_->in_domain(x)) return false;
        return !box_ || box_->contains_closed(x);
    }

    /// Advance x over [t, t + dt] with the control frozen at u. Returns false and
    /// leaves x unchanged if the proposed state is outside the domain or the box.
    template <class Rng>
    bool step(double t, Vec& x, const Vec& u, double dt, Rng& rng, std::normal_distribution<double>& normal) const {
        const int d = pr_->state_dim;
        const int nd = pr_->noise_dim;
        Vec dw(nd);
        const double sq = std::sqrt(dt);
        for (int j = 0; j < nd; ++j) dw[j] = sq * normal(rng);
        const Vec b = pr_->drift(t, x, u);
        const Mat s = pr_->diffusion(t, x, u);
        Vec y = x;
        for (int i = 0; i < d; ++i) {
            const double noise = s.row(i).dot(dw);
            if (log_[static_cast<std::size_t>(i)]) {
                const double xi = x[i];
                const double a = s.row(i).squaredNorm();
                y[i] = xi * std::exp((b[i] / xi - 0.5 * a / (xi * xi)) * dt + noise / xi);
            } else {
                y[i] = x[i] + b[i] * dt + noise;
            }
        }
        if (!inside(y)) return false;
        x = y;
        return true;
    }

private:
    const ControlProblem* pr_;
    std::optional<Box> box_;
    std::vector<bool> log_;
};

inline void check_control(const FeedbackPolicy& policy, const ControlProblem& problem, const Vec& u) {
    if (!policy.respects_bound(u) || !problem.controls.contains(u, 1e-9))
        throw ComputeError("policy '" + policy.id + "' returned a control outside its bound");
}

struct PathEnd {
    double t = 0.0;
    Vec x;
    std::size_t steps = 0;
    bool exited = false;
};

/// Simulate one path from (t0, x0) for at most max_steps steps of length dt,
/// stopping early when stop(t, x) becomes true or the path leaves the domain.
template <class Rng, class Stop>
PathEnd run_path(const SdeStepper& st, const FeedbackPolicy& policy, double t0, const Vec& x0, double dt,
                 std::size_t max_steps, Rng& rng, Stop&& stop) {
    std::normal_distribution<double> normal(0.0, 1.0);
    PathEnd end{t0, x0, 0, false};
    for (std::size_t k = 0; k < max_steps; ++k) {
        const double t = t0 + static_cast<double>(k) * dt;
        const Vec u = policy(t, end.x);
        check_control(policy, st.problem(), u);
        if (!st.step(t, end.x, u, dt, rng, normal)) {
            end.exited = true;
            end.t = t;
            end.steps = k;
            return end;
        }
        end.t = t0 + static_cast<double>(k + 1) * dt;
        end.steps = k + 1;
        if (stop(end.t, end.x)) return end;
    }
    return end;
}

struct SimulationOptions {
    /// Keep every intermediate state; otherwise only the terminal ones.
    bool store_paths = true;
    int threads = 1;
    /// Optional box whose exit also stops a path.
    std::optional<Box> sim_box;
};

struct PathEnsemble {
    std::size_t n_paths = 0;
    std::size_t n_steps = 0;
    int dim = 1;
    std::vector<double> times;
    /// Row-major [path][step][dim]; only the terminal step when paths are not stored.
    std::vector<double> states;
    /// Step at which the path left the domain (the last stored state is the pre-exit one), or -1.
    std::vector<std::int64_t> exit_step;
    std::uint64_t seed = 0;
    std::string policy_id;
    bool stored_paths = true;

    std::size_t stride() const { return (stored_paths ? n_steps + 1 : 1) * static_cast<std::size_t>(dim); }

    Vec state(std::size_t path, std::size_t step) const {
        if (!stored_paths) throw ArgumentError("ensemble holds terminal states only");
        Vec x(dim);
        for (int i = 0; i < dim; ++i) x[i] = states[path * stride() + step * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)];
        return x;
    }

    /// Terminal state, or the stopped pre-exit state for exited paths.
    Vec terminal(std::size_t path) const {
        if (!stored_paths) {
            Vec x(dim);
            for (int i = 0; i < dim; ++i) x[i] = states[path * stride() + static_cast<std::size_t>(i)];
            return x;
        }
        return state(path, n_steps);
    }

    double exit_fraction() const {
        std::size_t n = 0;
        for (auto e : exit_step) n += e >= 0;
        return n_paths ? static_cast<double>(n) / static_cast<double>(n_paths) : 0.0;
    }
};

/// Euler–Maruyama paths of the controlled SDE from (t0, x0) to T.
/// Path i draws its noise from its own stream seeded by (seed, i).
inline PathEnsemble simulate_paths(const ControlProblem& problem, const FeedbackPolicy& policy, double t0,
                                   const Vec& x0, std::size_t n_paths, std::size_t n_steps, std::uint64_t seed,
                                   const SimulationOptions& opt = {}) {
    if (!problem.in_domain(x0)) throw DomainError("simulate_paths: x0 outside the state domain");
    if (n_steps < 1) throw ArgumentError("simulate_paths: n_steps must be >= 1");
    if (n_paths < 1) throw ArgumentError("simulate_paths: n_paths must be >= 1");
    if (!(t0 >= 0.0 && t0 < problem.horizon)) throw ArgumentError("simulate_paths: t0 must lie in [0, T)");
    if (!policy.rule) throw ArgumentError("simulate_paths: empty policy");
    if (policy.bound > problem.controls.bound() + 1e-12)
        throw ArgumentError("simulate_paths: policy bound exceeds the control bound");
    SdeStepper st(problem, opt.sim_box);
    PathEnsemble ens;
    ens.n_paths = n_paths;
    ens.n_steps = n_steps;
    ens.dim = problem.state_dim;
    ens.seed = seed;
    ens.policy_id = policy.id;
    ens.stored_paths = opt.store_paths;
    const double dt = (problem.horizon - t0) / static_cast<double>(n_steps);
    for (std::size_t k = 0; k <= n_steps; ++k) ens.times.push_back(t0 + static_cast<double>(k) * dt);
    ens.times.back() = problem.horizon;
    ens.states.assign(n_paths * ens.stride(), 0.0);
    ens.exit_step.assign(n_paths, -1);
    const auto d = static_cast<std::size_t>(ens.dim);

    parallel_for(n_paths, opt.threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            std::mt19937_64 rng(stream_seed(seed, 0, p));
            double* row = ens.states.data() + p * ens.stride();
            std::size_t last = 0;
            auto store = [&](std::size_t k, const Vec& x) {
                if (!opt.store_paths) return;
                for (std::size_t i = 0; i < d; ++i) row[k * d + i] = x[static_cast<Eigen::Index>(i)];
            };
            store(0, x0);
            PathEnd e = run_path(st, policy, t0, x0, dt, n_steps, rng, [&](double, const Vec& x) {
                store(++last, x);
                return false;
            });
            if (e.exited) {
                ens.exit_step[p] = static_cast<std::int64_t>(e.steps + 1);
                for (std::size_t k = e.steps + 1; k <= n_steps; ++k) store(k, e.x);
            }
            if (!opt.store_paths)
                for (std::size_t i = 0; i < d; ++i) row[i] = e.x[static_cast<Eigen::Index>(i)];
        }
    });
    return ens;
}

struct ValueEstimate {
    double mean = 0.0;
    double half_width_95 = 0.0;
    double stderr_ = 0.0;
    double exit_fraction = 0.0;
    std::size_t n = 0;
};

/// Mean and standard error of a sample, summed in index order.
inline ValueEstimate summarize(const std::vector<double>& xs) {
    ValueEstimate e;
    e.n = xs.size();
    if (xs.empty()) return e;
    double s = 0.0;
    for (double x : xs) s += x;
    e.mean = s / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - e.mean) * (x - e.mean);
        e.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    e.half_width_95 = 1.959963984540054 * e.stderr_;
    return e;
}

/// Sample mean of g at the terminal (or stopped) states with a normal 95% half-width.
inline ValueEstimate estimate_value(const PathEnsemble& ens, const StateFn& payoff) {
    if (ens.n_paths == 0) throw ArgumentError("estimate_value: empty ensemble");
    std::vector<double> g(ens.n_paths);
    for (std::size_t p = 0; p < ens.n_paths; ++p) g[p] = payoff(ens.terminal(p));
    ValueEstimate e = summarize(g);
    e.exit_fraction = ens.exit_fraction();
    return e;
}

/// Members plus an optional parameter lattice searched coordinate-wise.
struct PolicyFamily {
    std::vector<FeedbackPolicy> members;
    std::vector<std::vector<double>> axes;
    std::function<FeedbackPolicy(const std::vector<double>&)> make;

    bool parametric() const { return !axes.empty() && static_cast<bool>(make); }
};

inline PolicyFamily constant_family(const std::vector<Vec>& controls) {
    PolicyFamily f;
    for (const Vec& u : controls) f.members.push_back(constant_policy(u));
    return f;
}

struct SimulationConfig {
    double t0 = 0.0;
    Vec x0;
    std::size_t n_paths = 10000;
    std::size_t n_steps = 64;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct OptimizationResult {
    FeedbackPolicy best;
    ValueEstimate estimate;
    std::size_t evaluations = 0;
    std::vector<ValueEstimate> member_estimates;
};

/// Best family member under common random numbers (every member sees the same
/// seed, hence the same noise per path). The estimate is a statistical lower
/// bound for V since every member is admissible.
inline OptimizationResult optimize_policy(const ControlProblem& problem, const PolicyFamily& family,
                                          const SimulationConfig& sim, std::size_t budget = 1000) {
    if (family.members.empty() && !family.parametric()) throw ArgumentError("optimize_policy: empty family");
    SimulationOptions so;
    so.store_paths = false;
    so.threads = sim.threads;
    auto evaluate = [&](const FeedbackPolicy& pol) {
        return estimate_value(simulate_paths(problem, pol, sim.t0, sim.x0, sim.n_paths, sim.n_steps, sim.seed, so),
                              problem.payoff);
    };
    OptimizationResult res;
    res.estimate.mean = -kInf;
    auto consider = [&](const FeedbackPolicy& pol) {
        if (res.evaluations >= budget) return false;
        ValueEstimate e = evaluate(pol);
        ++res.evaluations;
        res.member_estimates.push_back(e);
        if (e.mean > res.estimate.mean) {
            res.estimate = e;
            res.best = pol;
        }
        return true;
    };
    for (const auto& m : family.members)
        if (!consider(m)) break;
    if (family.parametric()) {
        std::vector<std::size_t> at(family.axes.size());
        for (std::size_t a = 0; a < at.size(); ++a) at[a] = family.axes[a].size() / 2;
        double at_value = -kInf;
        bool improved = true;
        while (improved) {
            improved = false;
            for (std::size_t a = 0; a < at.size(); ++a)
                for (std::size_t i = 0; i < family.axes[a].size(); ++i) {
                    if (i == at[a] && at_value > -kInf) continue;
                    auto ix = at;
                    ix[a] = i;
                    std::vector<double> par;
                    for (std::size_t c = 0; c < ix.size(); ++c) par.push_back(family.axes[c][ix[c]]);
                    if (!consider(family.make(par))) return res;
                    if (res.member_estimates.back().mean > at_value) {
                        at_value = res.member_estimates.back().mean;
                        at = ix;
                        improved = true;
                    }
                }
        }
    }
    return res;
}

struct GaugeReport {
    double mean_sup = 0.0;
    /// Share of the total carried by the largest 1% of path-wise sups.
    double tail_ratio = 0.0;
    bool heavy_tail = false;
};

/// Path-wise sup of ψ along stored paths.
inline GaugeReport gauge_check(const PathEnsemble& ens, const StateFn& gauge) {
    if (!ens.stored_paths) throw ArgumentError("gauge_check needs stored paths");
    std::vector<double> sups(ens.n_paths);
    for (std::size_t p = 0; p < ens.n_paths; ++p) {
        double m = -kInf;
        for (std::size_t k = 0; k <= ens.n_steps; ++k) m = std::max(m, gauge(ens.state(p, k)));
        sups[p] = m;
    }
    GaugeReport r;
    if (sups.empty()) return r;
    double total = 0.0;
    for (double s : sups) total += s;
    r.mean_sup = total / static_cast<double>(sups.size());
    std::vector<double> sorted = sups;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const std::size_t top = std::max<std::size_t>(1, sorted.size() / 100);
    double tail = 0.0;
    for (std::size_t i = 0; i < top; ++i) tail += sorted[i];
    r.tail_ratio = total > 0.0 ? tail / total : 0.0;
    r.heavy_tail = r.tail_ratio > 0.5;
    return r;
}

}  // namespace hjbcert
