#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "hjbcert/grid.hpp"
#include "hjbcert/problem.hpp"

namespace hjbcert {

/// Raised when the face-lift relaxation does not settle within its budget.
class ConvergenceError : public ComputeError {
public:
    ConvergenceError(const std::string& what, GridFunction last, double res, std::size_t iters)
        : ComputeError(what), last_iterate(std::move(last)), residual(res), iterations(iters) {}

    GridFunction last_iterate;
    double residual;
    std::size_t iterations;
};

/// Finite-difference gradient and Hessian at one node.
struct NodeDerivatives {
    Vec p;
    Mat m;
    bool one_sided = false;
};

/// Central differences (three-point, non-uniform aware) at interior nodes.
/// At edges the gradient is one-sided and the second differences are taken
/// from the nearest interior stencil; such nodes are flagged one_sided.
inline NodeDerivatives node_derivatives(const SpatialGrid& grid, const std::vector<double>& v, std::size_t flat) {
    const int d = grid.dim();
    NodeDerivatives out;
    out.p = Vec::Zero(d);
    out.m = Mat::Zero(d, d);
    auto idx = grid.multi_index(flat);
    std::array<std::size_t, kMaxDim> centre = idx;
    for (int k = 0; k < d; ++k) {
        const auto& nodes = grid.axis(k).nodes;
        const std::size_t n = nodes.size();
        const std::size_t i = idx[static_cast<std::size_t>(k)];
        const std::size_t s = grid.stride(k);
        if (i == 0) {
            out.p[k] = (v[flat + s] - v[flat]) / (nodes[1] - nodes[0]);
            out.one_sided = true;
        } else if (i + 1 == n) {
            out.p[k] = (v[flat] - v[flat - s]) / (nodes[n - 1] - nodes[n - 2]);
            out.one_sided = true;
        } else {
            out.p[k] = (v[flat + s] - v[flat - s]) / (nodes[i + 1] - nodes[i - 1]);
        }
        centre[static_cast<std::size_t>(k)] = std::clamp<std::size_t>(i, 1, n - 2);
    }
    const std::size_t c = grid.flat_index(centre);
    for (int k = 0; k < d; ++k) {
        const auto& nodes = grid.axis(k).nodes;
        const std::size_t i = centre[static_cast<std::size_t>(k)];
        const std::size_t s = grid.stride(k);
        const double hp = nodes[i + 1] - nodes[i];
        const double hm = nodes[i] - nodes[i - 1];
        out.m(k, k) = 2.0 * ((v[c + s] - v[c]) / hp - (v[c] - v[c - s]) / hm) / (hp + hm);
    }
    if (d == 2) {
        const auto& n0 = grid.axis(0).nodes;
        const auto& n1 = grid.axis(1).nodes;
        const std::size_t i = centre[0], j = centre[1];
        const std::size_t s0 = grid.stride(0), s1 = grid.stride(1);
        const double cross = (v[c + s0 + s1] - v[c + s0 - s1] - v[c - s0 + s1] + v[c - s0 - s1]) /
                             ((n0[i + 1] - n0[i - 1]) * (n1[j + 1] - n1[j - 1]));
        out.m(0, 1) = cross;
        out.m(1, 0) = cross;
    }
    return out;
}

/// The problem expressed in the grid's computational coordinates.
inline ControlProblem problem_on_grid(const ControlProblem& problem, const SpatialGrid& grid) {
    if (problem.state_dim != grid.dim()) throw ArgumentError("problem and grid dimensions differ");
    if (grid.has_log_axis() && !problem.has_log_dims()) return to_log_coordinates(problem, grid.log_mask());
    return problem;
}

/// Least concave majorant of the piecewise-linear interpolant of g (1-D),
/// sampled at the nodes. Edge values are kept (the majorant always passes
/// through the end points). Points within a few ulps of a chord are treated as
/// lying on it, which makes the operation exactly idempotent.
inline GridFunction concave_envelope(const GridFunction& g) {
    if (g.grid.dim() != 1) throw UnsupportedError("concave_envelope is 1-D only; use facelift_general");
    const std::size_t n = g.size();
    std::vector<double> xs(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = g.grid.axis(0).physical(i);
    const auto& ys = g.values;
    double scale = 0.0;
    for (double y : ys) scale = std::max(scale, std::abs(y));
    const double eps = 64.0 * std::numeric_limits<double>::epsilon() * scale;

    std::vector<std::size_t> hull;
    hull.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        while (hull.size() >= 2) {
            const std::size_t a = hull[hull.size() - 2];
            const std::size_t b = hull.back();
            const double chord = ys[a] + (ys[i] - ys[a]) * (xs[b] - xs[a]) / (xs[i] - xs[a]);
            if (ys[b] <= chord + eps)
                hull.pop_back();
            else
                break;
        }
        hull.push_back(i);
    }

    std::vector<double> out(n);
    for (std::size_t h = 0; h + 1 < hull.size(); ++h) {
        const std::size_t a = hull[h], b = hull[h + 1];
        out[a] = ys[a];
        for (std::size_t k = a + 1; k < b; ++k) {
            const double interp = ys[a] + (ys[b] - ys[a]) * (xs[k] - xs[a]) / (xs[b] - xs[a]);
            out[k] = std::max(interp, ys[k]);
        }
    }
    out[hull.back()] = ys[hull.back()];
    return GridFunction(g.grid, std::move(out));
}

enum class EdgeRule { clamp, free };

struct FaceliftOptions {
    /// Step of the explicit relaxation; 0 selects h²/(2 Σ_i |∂G/∂M_ii|).
    double relaxation = 0.0;
    std::size_t max_iters = 5'000'000;
    double tol = 1e-8;
    /// clamp: edge nodes stay at g. free: edges are relaxed with one-sided stencils.
    EdgeRule edges = EdgeRule::clamp;
    /// Time at which G is evaluated; NaN means the horizon.
    double time = std::numeric_limits<double>::quiet_NaN();
};

struct FaceliftStats {
    std::size_t iterations = 0;
    double last_update = 0.0;
    double contraction = 0.0;
    double relaxation = 0.0;
};

namespace detail {

inline double constraint_at(const ControlProblem& pr, const SpatialGrid& grid, const std::vector<double>& w,
                            std::size_t k, double t) {
    NodeDerivatives nd = node_derivatives(grid, w, k);
    return pr.constraint(t, grid.computational_point(k), nd.p, nd.m);
}

inline double default_relaxation(const ControlProblem& pr, const SpatialGrid& grid, double t) {
    const int d = grid.dim();
    double hmin = kInf;
    for (int k = 0; k < d; ++k) {
        const auto& nd = grid.axis(k).nodes;
        for (std::size_t i = 1; i < nd.size(); ++i) hmin = std::min(hmin, nd[i] - nd[i - 1]);
    }
    double cmax = 0.0;
    const Vec p0 = Vec::Zero(d);
    const Mat m0 = Mat::Zero(d, d);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        Vec y = grid.computational_point(k);
        const double g0 = pr.constraint(t, y, p0, m0);
        double c = 0.0;
        for (int i = 0; i < d; ++i) {
            Mat e = m0;
            e(i, i) = 1.0;
            c += std::abs(pr.constraint(t, y, p0, e) - g0);
        }
        cmax = std::max(cmax, c);
    }
    if (cmax == 0.0) return hmin * hmin;
    return hmin * hmin / (2.0 * cmax);
}

}  // namespace detail

/// Smallest grid function w >= g with G_h(w) >= 0, found by the monotone obstacle
/// relaxation w <- max(g, w + r·max(0, -G_h(w))) started from w = g (Jacobi sweeps).
///
/// The iterates increase towards the fixed point. Iteration stops once the
/// sup-norm update is below tol and the geometric tail estimate
/// update·ρ/(1-ρ), with ρ the observed contraction, is below tol as well.
inline GridFunction facelift_general(const GridFunction& g, const ControlProblem& problem,
                                     const FaceliftOptions& opt = {}, FaceliftStats* stats = nullptr) {
    const SpatialGrid& grid = g.grid;
    if (grid.dim() > 2) throw UnsupportedError("facelift_general supports 1-D and 2-D grids");
    const ControlProblem pr = problem_on_grid(problem, grid);
    const double t = std::isnan(opt.time) ? pr.horizon : opt.time;
    const double r = opt.relaxation > 0.0 ? opt.relaxation : detail::default_relaxation(pr, grid, t);

    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < grid.size(); ++k)
        if (opt.edges == EdgeRule::free || !grid.is_edge(k)) active.push_back(k);

    std::vector<double> w = g.values;
    std::vector<double> next = w;
    double prev_update = kInf;
    double rho = 0.0;
    double update = 0.0;
    for (std::size_t it = 1; it <= opt.max_iters; ++it) {
        update = 0.0;
        for (std::size_t k : active) {
            const double gk = detail::constraint_at(pr, grid, w, k, t);
            const double cand = w[k] + r * std::max(0.0, -gk);
            next[k] = std::max(g.values[k], cand);
            update = std::max(update, std::abs(next[k] - w[k]));
        }
        w.swap(next);
        for (std::size_t k : active) next[k] = w[k];
        if (!std::isfinite(update))
            throw ConvergenceError("facelift_general: non-finite iterate", GridFunction(grid, w), update, it);
        if (std::isfinite(prev_update) && prev_update > 0.0) rho = std::min(update / prev_update, 1.0);
        const bool settled = update == 0.0 || (update < opt.tol && rho < 1.0 && update * rho / (1.0 - rho) < opt.tol);
        if (settled) {
            if (stats) *stats = {it, update, rho, r};
            return GridFunction(grid, std::move(w));
        }
        prev_update = update;
    }
    throw ConvergenceError("facelift_general: no convergence within max_iters", GridFunction(grid, w), update,
                           opt.max_iters);
}

/// ĝ on the grid: g itself for a positive constant G, the concave envelope for
/// G = -M in 1-D, the obstacle relaxation otherwise.
inline GridFunction facelift(const GridFunction& g, const ControlProblem& problem, const FaceliftOptions& opt = {}) {
    switch (problem.constraint.kind) {
        case ConstraintKind::positive_constant:
            return g;
        case ConstraintKind::concavity:
            if (g.grid.dim() == 1) return concave_envelope(g);
            [[fallthrough]];
        default:
            return facelift_general(g, problem, opt);
    }
}

struct FaceliftReport {
    bool dominance_ok = true;
    bool complementarity_ok = true;
    bool minimal = true;
    double worst_dominance = 0.0;
    double worst_complementarity = 0.0;
    std::size_t probes = 0;
    std::vector<std::size_t> failing_nodes;
    std::vector<std::string> notes;

    bool passed() const { return dominance_ok && complementarity_ok && minimal; }
};

struct VerifyOptions {
    /// Largest downward perturbation used by the minimality probe.
    double probe_delta = 1e-6;
};

/// Check a candidate face-lift w of g: (a) w >= g - tol, (b) |min(w - g, G_h(w))| <= tol
/// at interior nodes, (c) minimality probe: lowering w on any single node, or on any
/// connected set of nodes where w > g + tol, must destroy (a) or the supersolution
/// property G_h >= -tol.
inline FaceliftReport verify_facelift(const GridFunction& w, const GridFunction& g, const ControlProblem& problem,
                                      double tol, const VerifyOptions& opt = {}) {
    if (!(w.grid == g.grid)) throw ArgumentError("verify_facelift: grids differ");
    const SpatialGrid& grid = w.grid;
    const ControlProblem pr = problem_on_grid(problem, grid);
    const double t = pr.horizon;
    FaceliftReport rep;

    for (std::size_t k = 0; k < grid.size(); ++k) {
        const double gap = w[k] - g[k];
        if (gap < -tol) {
            rep.dominance_ok = false;
            rep.failing_nodes.push_back(k);
        }
        rep.worst_dominance = std::min(rep.worst_dominance, gap);
    }
    std::vector<std::size_t> interior;
    for (std::size_t k = 0; k < grid.size(); ++k)
        if (!grid.is_edge(k)) interior.push_back(k);
    for (std::size_t k : interior) {
        const double c = std::min(w[k] - g[k], detail::constraint_at(pr, grid, w.values, k, t));
        if (std::abs(c) > std::abs(rep.worst_complementarity)) rep.worst_complementarity = c;
        if (std::abs(c) > tol) {
            rep.complementarity_ok = false;
            rep.failing_nodes.push_back(k);
        }
    }

    std::vector<char> lifted(grid.size(), 0);
    for (std::size_t k : interior) lifted[k] = w[k] > g[k] + tol;

    auto still_super = [&](const std::vector<double>& cand) {
        for (std::size_t k = 0; k < grid.size(); ++k)
            if (cand[k] < g[k] - tol) return false;
        for (std::size_t k : interior)
            if (detail::constraint_at(pr, grid, cand, k, t) < -tol) return false;
        return true;
    };
    auto probe = [&](const std::vector<std::size_t>& set) {
        double room = kInf;
        for (std::size_t k : set) room = std::min(room, w[k] - g[k] - tol);
        const double delta = std::min(opt.probe_delta, 0.5 * room);
        std::vector<double> cand = w.values;
        for (std::size_t k : set) cand[k] -= delta;
        ++rep.probes;
        if (still_super(cand)) {
            rep.minimal = false;
            rep.failing_nodes.push_back(set.front());
        }
    };

    for (std::size_t k : interior)
        if (lifted[k]) probe({k});

    // connected components of lifted nodes (axis neighbours)
    std::vector<char> visited(grid.size(), 0);
    for (std::size_t start : interior) {
        if (!lifted[start] || visited[start]) continue;
        std::vector<std::size_t> comp, stack{start};
        visited[start] = 1;
        while (!stack.empty()) {
            std::size_t k = stack.back();
            stack.pop_back();
            comp.push_back(k);
            auto idx = grid.multi_index(k);
            for (int d = 0; d < grid.dim(); ++d) {
                const std::size_t s = grid.stride(d);
                const std::size_t i = idx[static_cast<std::size_t>(d)];
                if (i > 0 && lifted[k - s] && !visited[k - s]) {
                    visited[k - s] = 1;
                    stack.push_back(k - s);
                }
                if (i + 1 < grid.axis(d).size() && lifted[k + s] && !visited[k + s]) {
                    visited[k + s] = 1;
                    stack.push_back(k + s);
                }
            }
        }
        if (comp.size() > 1) probe(comp);
    }
    if (!rep.minimal) rep.notes.emplace_back("non-minimal: a lowered candidate is still a supersolution above g");
    if (!rep.complementarity_ok) rep.notes.emplace_back("complementarity violated");
    if (!rep.dominance_ok) rep.notes.emplace_back("candidate falls below the payoff");
    return rep;
}

}  // namespace hjbcert
