#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <barrier>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "hjbcert/facelift.hpp"
#include "hjbcert/grid.hpp"
#include "hjbcert/policy.hpp"
#include "hjbcert/problem.hpp"

namespace hjbcert {

enum class ConstraintMode { project, penalize, none };
enum class BoundaryMode { dirichlet, gauge };
enum class TerminalKind { raw, facelift };

struct SchemeConfig {
    /// Output time nodes t_0 = 0 < ... < t_{N-1} = T, uniformly spaced.
    std::size_t time_nodes = 201;
    int control_resolution = 201;
    ConstraintMode constraint_mode = ConstraintMode::project;
    double penalty_weight = 1.0;
    bool upwind = true;
    /// Explicit steps per output interval; 0 picks the smallest count meeting the CFL bound.
    std::size_t substeps = 0;
    /// dirichlet: edges keep the terminal values. gauge: v_edge = v_inner ψ(x_edge)/ψ(x_inner).
    BoundaryMode boundary = BoundaryMode::dirichlet;
    int threads = 1;

    void validate() const {
        if (time_nodes < 2) throw ConfigError("scheme: need at least 2 time nodes");
        if (control_resolution < 1) throw ConfigError("scheme: control resolution must be >= 1");
        if (!(penalty_weight > 0.0)) throw ConfigError("scheme: penalty weight must be positive");
        if (threads < 1) throw ConfigError("scheme: threads must be >= 1");
    }
};

struct SolveMetadata {
    std::size_t substeps = 0;
    double dt = 0.0;
    double dt_cfl = 0.0;
    std::size_t control_points = 0;
    /// Edge nodes, updated by the boundary rule instead of the interior stencil.
    std::size_t boundary_nodes = 0;
    /// (node, control) pairs whose explicit weights are negative (non-monotone stencil).
    std::size_t non_monotone_pairs = 0;
    std::string terminal_label = "supplied";
};

/// v on the space-time lattice plus the argmax control table.
struct SpaceTimeSolution {
    std::vector<double> times;
    std::vector<GridFunction> slices;
    std::vector<Vec> controls;
    /// policy[n][k]: index into `controls` of the argmax at time node n, space node k.
    std::vector<std::vector<std::uint32_t>> policy;
    /// Raw payoff on the grid. V(T, ·) = g while slices.back() is the terminal data used.
    GridFunction payoff;
    double control_bound = 0.0;
    SchemeConfig config;
    SolveMetadata meta;

    const SpatialGrid& grid() const { return slices.front().grid; }

    /// Linear in time between slices, multilinear in space; x physical.
    double value_at(double t, const Vec& x) const {
        const std::size_t n = times.size();
        if (t <= times.front()) return slices.front().at(x);
        if (t >= times.back()) return slices.back().at(x);
        std::size_t i = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin()) - 1;
        i = std::min(i, n - 2);
        const double w = (t - times[i]) / (times[i + 1] - times[i]);
        return (1.0 - w) * slices[i].at(x) + w * slices[i + 1].at(x);
    }
};

namespace detail {

/// Neighbour offsets shared by all interior nodes: 1-D {+1, -1}; 2-D the eight
/// surrounding nodes.
inline std::vector<std::ptrdiff_t> stencil_offsets(const SpatialGrid& grid) {
    if (grid.dim() == 1) return {1, -1};
    const auto s0 = static_cast<std::ptrdiff_t>(grid.stride(0));
    return {s0, -s0, 1, -1, s0 + 1, -s0 - 1, s0 - 1, -s0 + 1};
}

/// Rates of the upwind generator at an interior node: L v = Σ_q rate_q (v_q - v).
/// Returns false if some rate is negative.
inline bool interior_rates(const SpatialGrid& grid, std::size_t node, const Vec& b, const Mat& a, bool upwind,
                           double* rate) {
    auto idx = grid.multi_index(node);
    const int d = grid.dim();
    std::array<double, kMaxDim> hp{}, hm{};
    for (int k = 0; k < d; ++k) {
        const auto& n = grid.axis(k).nodes;
        const std::size_t i = idx[static_cast<std::size_t>(k)];
        hp[static_cast<std::size_t>(k)] = n[i + 1] - n[i];
        hm[static_cast<std::size_t>(k)] = n[i] - n[i - 1];
    }
    const int slots = d == 1 ? 2 : 8;
    std::fill(rate, rate + slots, 0.0);
    const double cross = d == 2 ? std::abs(a(0, 1)) / (0.5 * (hp[0] + hm[0]) * (hp[1] + hm[1])) : 0.0;
    for (int k = 0; k < d; ++k) {
        const double p = hp[static_cast<std::size_t>(k)], m = hm[static_cast<std::size_t>(k)];
        double up = a(k, k) / (p * (p + m)) - cross;
        double dn = a(k, k) / (m * (p + m)) - cross;
        const double bk = b[k];
        if (upwind) {
            up += std::max(bk, 0.0) / p;
            dn += std::max(-bk, 0.0) / m;
        } else {
            up += bk / (p + m);
            dn -= bk / (p + m);
        }
        rate[2 * k] = up;
        rate[2 * k + 1] = dn;
    }
    if (d == 2) {
        const double c = cross;
        if (a(0, 1) >= 0.0) {
            rate[4] = c;
            rate[5] = c;
        } else {
            rate[6] = c;
            rate[7] = c;
        }
    }
    for (int q = 0; q < slots; ++q)
        if (rate[q] < 0.0) return false;
    return true;
}

struct RateTable {
    std::size_t controls = 0;
    std::vector<std::size_t> interior;
    std::vector<std::ptrdiff_t> offsets;
    std::vector<std::vector<double>> rate;  // [slot][pos * controls + j]
    std::vector<double> total;              // [pos * controls + j]
    double max_total = 0.0;
    std::size_t non_monotone = 0;
};

inline RateTable build_rates(const ControlProblem& pr, const SpatialGrid& grid, const std::vector<Vec>& controls,
                             double t, bool upwind) {
    RateTable tab;
    tab.controls = controls.size();
    for (std::size_t k = 0; k < grid.size(); ++k)
        if (!grid.is_edge(k)) tab.interior.push_back(k);
    tab.offsets = stencil_offsets(grid);
    const std::size_t slots = tab.offsets.size();
    const std::size_t total = tab.interior.size() * tab.controls;
    tab.rate.assign(slots, std::vector<double>(total, 0.0));
    tab.total.assign(total, 0.0);
    std::array<double, 8> r{};
    for (std::size_t pos = 0; pos < tab.interior.size(); ++pos) {
        const std::size_t node = tab.interior[pos];
        const Vec y = grid.computational_point(node);
        for (std::size_t j = 0; j < tab.controls; ++j) {
            const Vec b = pr.drift(t, y, controls[j]);
            const Mat s = pr.diffusion(t, y, controls[j]);
            const Mat a = s * s.transpose();
            if (!interior_rates(grid, node, b, a, upwind, r.data())) ++tab.non_monotone;
            double sum = 0.0;
            for (std::size_t q = 0; q < slots; ++q) {
                tab.rate[q][pos * tab.controls + j] = r[q];
                sum += r[q];
            }
            if (!std::isfinite(sum)) throw NumericalError("solver: non-finite coefficients", 0);
            tab.total[pos * tab.controls + j] = sum;
            tab.max_total = std::max(tab.max_total, sum);
        }
    }
    return tab;
}

/// Explicit weights for one step of length dt: v_new = w0 v + Σ_q w_q v_q.
struct WeightTable {
    std::vector<std::vector<double>> w;  // [slot]
    std::vector<double> w0;
};

inline WeightTable scale_rates(const RateTable& tab, double dt) {
    WeightTable out;
    out.w.resize(tab.rate.size());
    for (std::size_t q = 0; q < tab.rate.size(); ++q) {
        out.w[q].resize(tab.rate[q].size());
        for (std::size_t i = 0; i < tab.rate[q].size(); ++i) out.w[q][i] = dt * tab.rate[q][i];
    }
    out.w0.resize(tab.total.size());
    for (std::size_t i = 0; i < tab.total.size(); ++i) out.w0[i] = std::max(0.0, 1.0 - dt * tab.total[i]);
    return out;
}

/// Runs `steps` phases. In each phase work(step, begin, end) covers [0, items)
/// in parallel chunks, then after(step) runs alone. Chunking does not change
/// any arithmetic, so results are identical for every thread count.
template <class Work, class After>
void run_phases(std::size_t steps, std::size_t items, int threads, Work&& work, After&& after) {
    const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), std::max<std::size_t>(items, 1));
    if (nt <= 1) {
        for (std::size_t s = 0; s < steps; ++s) {
            work(s, std::size_t{0}, items);
            after(s);
        }
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::atomic<bool> abort{false};
    auto fail = [&](std::exception_ptr e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = e;
        abort = true;
    };
    std::size_t phase = 0;
    auto completion = [&]() noexcept {
        if (!abort.load()) {
            try {
                after(phase);
            } catch (...) {
                fail(std::current_exception());
            }
        }
        ++phase;
    };
    std::barrier sync(static_cast<std::ptrdiff_t>(nt), completion);
    auto worker = [&](std::size_t w) {
        const std::size_t begin = items * w / nt, end = items * (w + 1) / nt;
        for (std::size_t s = 0; s < steps; ++s) {
            if (!abort.load()) {
                try {
                    work(s, begin, end);
                } catch (...) {
                    fail(std::current_exception());
                }
            }
            sync.arrive_and_wait();
            if (abort.load()) break;
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < nt; ++w) pool.emplace_back(worker, w);
    worker(0);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

inline std::size_t nearest_interior(const SpatialGrid& grid, std::size_t node) {
    auto idx = grid.multi_index(node);
    for (int k = 0; k < grid.dim(); ++k) {
        auto& i = idx[static_cast<std::size_t>(k)];
        i = std::clamp<std::size_t>(i, 1, grid.axis(k).size() - 2);
    }
    return grid.flat_index(idx);
}

inline void apply_penalty(const ControlProblem& pr, const SpatialGrid& grid, std::vector<double>& v, double t,
                          double amount, double stable_step, std::vector<double>& scratch) {
    if (pr.constraint.kind == ConstraintKind::positive_constant) return;
    const std::size_t sweeps = static_cast<std::size_t>(std::ceil(amount / stable_step));
    if (sweeps == 0) return;
    const double step = amount / static_cast<double>(sweeps);
    for (std::size_t s = 0; s < sweeps; ++s) {
        scratch = v;
        for (std::size_t k = 0; k < grid.size(); ++k) {
            if (grid.is_edge(k)) continue;
            const double g = constraint_at(pr, grid, scratch, k, t);
            v[k] = scratch[k] + step * std::max(0.0, -g);
        }
    }
}

}  // namespace detail

/// Terminal data on the grid: the raw payoff or its face-lift.
inline GridFunction make_terminal(const ControlProblem& problem, const SpatialGrid& grid, TerminalKind kind,
                                  const FaceliftOptions& opt = {}) {
    GridFunction g = GridFunction::sample(grid, [&](const Vec& x) { return problem.payoff(x); });
    if (!g.all_finite()) throw DomainError("payoff is not finite on the grid");
    if (kind == TerminalKind::raw) return g;
    return facelift(g, problem, opt);
}

/// L^u v = b·D_h v + ½ Tr(σσᵀ D²_h v) for a fixed control, drift upwinded.
/// Edge nodes use one-sided gradients and the nearest interior second
/// differences; their count is written to `edge_nodes` when given.
inline GridFunction discrete_generator(const ControlProblem& problem, const Vec& u, const GridFunction& v, double t,
                                       std::size_t* edge_nodes = nullptr) {
    const SpatialGrid& grid = v.grid;
    const ControlProblem pr = problem_on_grid(problem, grid);
    if (!pr.controls.contains(u)) throw ArgumentError("discrete_generator: control outside the control box");
    std::vector<double> out(grid.size(), 0.0);
    const auto offsets = detail::stencil_offsets(grid);
    std::array<double, 8> r{};
    std::size_t edges = 0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const Vec y = grid.computational_point(k);
        const Vec b = pr.drift(t, y, u);
        const Mat s = pr.diffusion(t, y, u);
        const Mat a = s * s.transpose();
        if (grid.is_edge(k)) {
            NodeDerivatives nd = node_derivatives(grid, v.values, k);
            out[k] = b.dot(nd.p) + 0.5 * (a.cwiseProduct(nd.m)).sum();
            ++edges;
            continue;
        }
        detail::interior_rates(grid, k, b, a, true, r.data());
        double acc = 0.0;
        for (std::size_t q = 0; q < offsets.size(); ++q)
            if (r[q] != 0.0) acc += r[q] * (v[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(k) + offsets[q])] - v[k]);
        out[k] = acc;
    }
    if (edge_nodes) *edge_nodes = edges;
    return GridFunction(grid, std::move(out));
}

/// Backward explicit monotone scheme for min{-v_t - H, G} = 0 with v(T) = terminal.
///
/// Each step takes the pointwise maximum over the control grid of the explicit
/// update, then applies the boundary rule and the constraint step:
///   project   1-D G = -M: concave envelope after every step; positive constant G:
///             nothing; otherwise the obstacle relaxation once per output interval,
///   penalize  v += Δt ρ max(0, -G_h(v)), split into stable sweeps,
///   none      no constraint step.
inline SpaceTimeSolution solve_hjb(const ControlProblem& problem, const GridFunction& terminal,
                                   const SchemeConfig& cfg) {
    cfg.validate();
    problem.validate();
    const SpatialGrid& grid = terminal.grid;
    if (!problem.has_log_dims()) grid.check_inside(problem.domain);
    if (!terminal.all_finite()) throw NumericalError("solver: terminal data not finite", cfg.time_nodes - 1);
    const ControlProblem pr = problem_on_grid(problem, grid);

    SpaceTimeSolution sol;
    sol.config = cfg;
    sol.control_bound = pr.controls.bound();
    sol.controls = pr.controls.grid(cfg.control_resolution);
    sol.payoff = GridFunction::sample(grid, [&](const Vec& x) { return problem.payoff(x); });
    const std::size_t N = cfg.time_nodes;
    const double T = pr.horizon;
    sol.times.resize(N);
    for (std::size_t n = 0; n < N; ++n) sol.times[n] = T * static_cast<double>(n) / static_cast<double>(N - 1);
    sol.times.back() = T;
    const double dt_out = T / static_cast<double>(N - 1);

    detail::RateTable tab = detail::build_rates(pr, grid, sol.controls, T, cfg.upwind);
    double max_total = tab.max_total;
    if (!pr.time_homogeneous)
        for (std::size_t n = 0; n + 1 < N; ++n)
            max_total = std::max(max_total, detail::build_rates(pr, grid, sol.controls, sol.times[n], cfg.upwind).max_total);
    const double dt_cfl = max_total > 0.0 ? 1.0 / max_total : kInf;
    std::size_t m = cfg.substeps;
    if (m == 0) {
        m = std::isfinite(dt_cfl) ? static_cast<std::size_t>(std::ceil(dt_out / dt_cfl * (1.0 - 1e-12))) : 1;
        m = std::max<std::size_t>(m, 1);
    }
    const double dt = dt_out / static_cast<double>(m);
    if (dt > dt_cfl * (1.0 + 1e-12))
        throw ConfigError("solver: time step " + std::to_string(dt) + " violates the CFL bound " + std::to_string(dt_cfl));

    sol.meta.substeps = m;
    sol.meta.dt = dt;
    sol.meta.dt_cfl = dt_cfl;
    sol.meta.control_points = sol.controls.size();
    sol.meta.boundary_nodes = grid.size() - tab.interior.size();
    sol.meta.non_monotone_pairs = tab.non_monotone;

    detail::WeightTable wt = detail::scale_rates(tab, dt);
    const std::size_t K = tab.controls;
    const std::size_t slots = tab.offsets.size();

    sol.slices.assign(N, terminal);
    sol.policy.assign(N, std::vector<std::uint32_t>(grid.size(), 0));

    // boundary data
    std::vector<std::size_t> edges, edge_inner;
    std::vector<double> edge_ratio;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        if (!grid.is_edge(k)) continue;
        edges.push_back(k);
        const std::size_t in = detail::nearest_interior(grid, k);
        edge_inner.push_back(in);
        double ratio = -1.0;
        if (cfg.boundary == BoundaryMode::gauge) {
            const double pe = problem.gauge(grid.physical_point(k));
            const double pi = problem.gauge(grid.physical_point(in));
            if (std::isfinite(pe) && std::isfinite(pi) && pe > 0.0 && pi > 0.0) ratio = pe / pi;
        }
        edge_ratio.push_back(ratio);
    }

    const bool concave_projection = cfg.constraint_mode == ConstraintMode::project &&
                                    pr.constraint.kind == ConstraintKind::concavity && grid.dim() == 1;
    const bool relax_projection = cfg.constraint_mode == ConstraintMode::project &&
                                  pr.constraint.kind != ConstraintKind::positive_constant && !concave_projection;
    const double penalty_stable =
        cfg.constraint_mode == ConstraintMode::penalize ? detail::default_relaxation(pr, grid, T) : 0.0;

    std::vector<double> v = terminal.values;
    std::vector<double> next = v;
    std::vector<double> scratch;
    const std::size_t total_steps = (N - 1) * m;
    std::vector<std::uint32_t> argmax(tab.interior.size(), 0);

    auto step_time = [&](std::size_t s) {
        const std::size_t interval = N - 2 - s / m;
        return sol.times[interval + 1] - static_cast<double>(s % m) * dt;
    };
    auto recording = [&](std::size_t s) { return s % m == m - 1; };

    auto work = [&](std::size_t s, std::size_t begin, std::size_t end) {
        thread_local Eigen::ArrayXd buf;
        buf.resize(static_cast<Eigen::Index>(K));
        const bool rec = recording(s);
        for (std::size_t pos = begin; pos < end; ++pos) {
            const std::size_t node = tab.interior[pos];
            const std::size_t base = pos * K;
            buf = Eigen::Map<const Eigen::ArrayXd>(wt.w0.data() + base, static_cast<Eigen::Index>(K)) * v[node];
            for (std::size_t q = 0; q < slots; ++q) {
                const double vn = v[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(node) + tab.offsets[q])];
                buf += Eigen::Map<const Eigen::ArrayXd>(wt.w[q].data() + base, static_cast<Eigen::Index>(K)) * vn;
            }
            if (rec) {
                Eigen::Index j = 0;
                next[node] = buf.maxCoeff(&j);
                argmax[pos] = static_cast<std::uint32_t>(j);
            } else {
                next[node] = buf.maxCoeff();
            }
        }
    };

    auto after = [&](std::size_t s) {
        v.swap(next);
        const double t_new = step_time(s) - dt;
        for (std::size_t e = 0; e < edges.size(); ++e) {
            if (edge_ratio[e] > 0.0)
                v[edges[e]] = v[edge_inner[e]] * edge_ratio[e];
            else
                v[edges[e]] = terminal[edges[e]];
        }
        if (concave_projection) {
            GridFunction env = concave_envelope(GridFunction(grid, v));
            v.swap(env.values);
        } else if (cfg.constraint_mode == ConstraintMode::penalize) {
            detail::apply_penalty(pr, grid, v, t_new, dt * cfg.penalty_weight, penalty_stable, scratch);
        }
        if (recording(s)) {
            const std::size_t out = N - 2 - s / m;
            if (relax_projection) {
                FaceliftOptions fo;
                fo.time = sol.times[out];
                fo.edges = EdgeRule::clamp;
                GridFunction lifted = facelift_general(GridFunction(grid, v), pr, fo);
                v.swap(lifted.values);
            }
            for (double x : v)
                if (!std::isfinite(x)) throw NumericalError("solver: non-finite value", out);
            auto& pol = sol.policy[out];
            for (std::size_t pos = 0; pos < tab.interior.size(); ++pos) pol[tab.interior[pos]] = argmax[pos];
            for (std::size_t e = 0; e < edges.size(); ++e) pol[edges[e]] = pol[edge_inner[e]];
            sol.slices[out].values = v;
        }
        if (!pr.time_homogeneous && s + 1 < total_steps) {
            tab = detail::build_rates(pr, grid, sol.controls, step_time(s + 1), cfg.upwind);
            if (tab.max_total * dt > 1.0 + 1e-12) throw ConfigError("solver: CFL bound violated at t = " + std::to_string(step_time(s + 1)));
            wt = detail::scale_rates(tab, dt);
        }
    };

    if (!pr.time_homogeneous) {
        tab = detail::build_rates(pr, grid, sol.controls, step_time(0), cfg.upwind);
        wt = detail::scale_rates(tab, dt);
    }
    detail::run_phases(total_steps, tab.interior.size(), cfg.threads, work, after);
    sol.policy.back() = sol.policy[N - 2];
    return sol;
}

/// Grid argmax feedback: control at the nearest node, latest time node <= t.
inline FeedbackPolicy extract_policy(const SpaceTimeSolution& sol, std::string id = "hjb-argmax") {
    struct Table {
        std::vector<double> times;
        SpatialGrid grid;
        std::vector<Vec> controls;
        std::vector<std::vector<std::uint32_t>> policy;
    };
    auto tab = std::make_shared<const Table>(Table{sol.times, sol.grid(), sol.controls, sol.policy});
    FeedbackPolicy p;
    p.bound = sol.control_bound;
    p.representation = PolicyRepresentation::table;
    p.id = std::move(id);
    const double slack = 1e-12 * std::max(1.0, sol.times.back());
    p.rule = [tab, slack](double t, const Vec& x) -> Vec {
        const auto& ts = tab->times;
        auto it = std::upper_bound(ts.begin(), ts.end(), t + slack);
        std::size_t n = it == ts.begin() ? 0 : static_cast<std::size_t>(it - ts.begin()) - 1;
        n = std::min(n, ts.size() - 1);
        return tab->controls[tab->policy[n][tab->grid.nearest(x)]];
    };
    return p;
}

enum class RefineMode { space_time, space, time };

struct ConvergenceLevel {
    std::size_t space_nodes = 0;
    std::size_t time_nodes = 0;
    std::size_t substeps = 0;
    /// Sup-norm difference to the previous level on the coarsest common nodes.
    double diff_to_previous = std::numeric_limits<double>::quiet_NaN();
    double oracle_error = std::numeric_limits<double>::quiet_NaN();
};

struct ConvergenceReport {
    std::vector<ConvergenceLevel> levels;
    /// log2 of successive difference ratios.
    std::vector<double> orders;

    bool differences_shrink(double factor) const {
        for (std::size_t i = 2; i < levels.size(); ++i)
            if (!(levels[i].diff_to_previous * factor <= levels[i - 1].diff_to_previous)) return false;
        return true;
    }
};

namespace detail {

inline SpatialGrid refine_grid(const SpatialGrid& g) {
    std::vector<Axis> axes;
    for (const Axis& a : g.axes()) {
        const double lo = a.physical(0), hi = a.physical(a.size() - 1);
        axes.push_back(SpatialGrid::make_axis(lo, hi, 2 * (a.size() - 1) + 1, a.spacing));
    }
    return SpatialGrid(std::move(axes));
}

}  // namespace detail

/// Dyadic refinement study. Differences between successive levels are taken
/// at the coarsest level's time nodes and trust-region space nodes; the
/// optional oracle o(t, x) adds an absolute error per level on the same nodes.
inline ConvergenceReport convergence_study(const ControlProblem& problem, const SpatialGrid& base,
                                           TerminalKind terminal, SchemeConfig cfg, int refinements,
                                           RefineMode mode = RefineMode::space_time,
                                           const std::function<double(double, const Vec&)>& oracle = {}) {
    if (refinements < 2) throw ArgumentError("convergence_study: need at least 2 refinements");
    for (const Axis& a : base.axes())
        if (!a.uniform()) throw ArgumentError("convergence_study: base grid must be uniform per axis");
    const SpatialGrid coarse = base;
    std::vector<double> coarse_times;
    ConvergenceReport rep;
    SpatialGrid grid = base;
    std::vector<double> prev;
    for (int level = 0; level < refinements; ++level) {
        if (level > 0 && mode == RefineMode::time && cfg.substeps == 0)
            throw ArgumentError("convergence_study: time refinement needs explicit substeps");
        SpaceTimeSolution sol = solve_hjb(problem, make_terminal(problem, grid, terminal), cfg);
        if (level == 0) coarse_times = sol.times;
        std::vector<double> sample;
        double oerr = 0.0;
        for (double t : coarse_times)
            for (std::size_t k = 0; k < coarse.size(); ++k) {
                if (!coarse.in_trust_region(k)) continue;
                const Vec x = coarse.physical_point(k);
                const double val = sol.value_at(t, x);
                sample.push_back(val);
                if (oracle) oerr = std::max(oerr, std::abs(val - oracle(t, x)));
            }
        ConvergenceLevel lv;
        lv.space_nodes = grid.axis(0).size();
        lv.time_nodes = cfg.time_nodes;
        lv.substeps = sol.meta.substeps;
        if (oracle) lv.oracle_error = oerr;
        if (!prev.empty()) {
            double d = 0.0;
            for (std::size_t i = 0; i < sample.size(); ++i) d = std::max(d, std::abs(sample[i] - prev[i]));
            lv.diff_to_previous = d;
        }
        rep.levels.push_back(lv);
        prev = std::move(sample);
        if (mode != RefineMode::time) grid = detail::refine_grid(grid);
        if (mode != RefineMode::space) {
            if (mode == RefineMode::time)
                cfg.substeps = cfg.substeps * 2;
            else
                cfg.time_nodes = 2 * (cfg.time_nodes - 1) + 1;
        }
    }
    for (std::size_t i = 2; i < rep.levels.size(); ++i) {
        const double a = rep.levels[i - 1].diff_to_previous, b = rep.levels[i].diff_to_previous;
        rep.orders.push_back(a > 0.0 && b > 0.0 ? std::log2(a / b) : std::numeric_limits<double>::quiet_NaN());
    }
    return rep;
}

}  // namespace hjbcert
