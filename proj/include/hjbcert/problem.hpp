#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "hjbcert/errors.hpp"
#include "hjbcert/linalg.hpp"

namespace hjbcert {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Axis-aligned box, bounds may be infinite. Used both for the open state
/// domain and for the closed pieces of a control set.
struct Box {
    std::vector<double> lower;
    std::vector<double> upper;

    Box() = default;
    Box(std::vector<double> lo, std::vector<double> hi) : lower(std::move(lo)), upper(std::move(hi)) {
        if (lower.size() != upper.size()) throw ArgumentError("box bounds have different dimensions");
    }

    static Box whole(int dim) {
        return Box(std::vector<double>(static_cast<std::size_t>(dim), -kInf),
                   std::vector<double>(static_cast<std::size_t>(dim), kInf));
    }
    static Box interval(double lo, double hi) { return Box({lo}, {hi}); }

    int dim() const { return static_cast<int>(lower.size()); }

    bool empty() const {
        for (std::size_t i = 0; i < lower.size(); ++i)
            if (!(lower[i] < upper[i])) return true;
        return false;
    }

    bool bounded() const {
        for (std::size_t i = 0; i < lower.size(); ++i)
            if (!std::isfinite(lower[i]) || !std::isfinite(upper[i])) return false;
        return true;
    }

    bool contains_open(const Vec& x) const {
        if (x.size() != dim()) return false;
        for (int i = 0; i < dim(); ++i)
            if (!(x[i] > lower[i] && x[i] < upper[i])) return false;
        return true;
    }

    bool contains_closed(const Vec& x, double slack = 0.0) const {
        if (x.size() != dim()) return false;
        for (int i = 0; i < dim(); ++i)
            if (!(x[i] >= lower[i] - slack && x[i] <= upper[i] + slack)) return false;
        return true;
    }

    Vec center() const {
        Vec c(dim());
        for (int i = 0; i < dim(); ++i) c[i] = 0.5 * (lower[i] + upper[i]);
        return c;
    }

    double width(int i) const { return upper[i] - lower[i]; }

    /// Clip to [-bound, bound] in every coordinate.
    Box clipped(double bound) const {
        Box b = *this;
        for (int i = 0; i < dim(); ++i) {
            b.lower[i] = std::max(b.lower[i], -bound);
            b.upper[i] = std::min(b.upper[i], bound);
        }
        return b;
    }
};

/// Control set U ∩ [-B, B]^k where U is a finite union of closed boxes.
/// An empty piece list means U = R^k.
class ControlSet {
public:
    ControlSet() = default;
    ControlSet(int dim, double bound, std::vector<Box> pieces = {})
        : dim_(dim), bound_(bound), pieces_(std::move(pieces)) {
        if (dim_ < 1 || dim_ > kMaxDim) throw ArgumentError("control dimension must be 1 or 2");
        if (!(bound_ >= 0.0) || !std::isfinite(bound_)) throw ArgumentError("control bound must be finite and >= 0");
        for (const auto& p : pieces_)
            if (p.dim() != dim_) throw ArgumentError("control piece dimension mismatch");
    }

    int dim() const { return dim_; }
    double bound() const { return bound_; }
    const std::vector<Box>& pieces() const { return pieces_; }

    ControlSet with_bound(double b) const { return ControlSet(dim_, b, pieces_); }

    /// True when U itself (before intersecting with the bound box) is unbounded.
    bool intrinsically_unbounded() const {
        if (pieces_.empty()) return true;
        return std::any_of(pieces_.begin(), pieces_.end(), [](const Box& b) { return !b.bounded(); });
    }

    bool in_set(const Vec& u) const {
        if (u.size() != dim_) return false;
        if (pieces_.empty()) return true;
        return std::any_of(pieces_.begin(), pieces_.end(), [&](const Box& b) { return b.contains_closed(u); });
    }

    bool contains(const Vec& u, double slack = 1e-12) const {
        if (u.size() != dim_) return false;
        for (int i = 0; i < dim_; ++i)
            if (std::abs(u[i]) > bound_ + slack) return false;
        if (pieces_.empty()) return true;
        return std::any_of(pieces_.begin(), pieces_.end(), [&](const Box& b) { return b.contains_closed(u, slack); });
    }

    std::vector<Vec> grid(int resolution) const { return grid_for_bound(bound_, resolution); }

    /// Uniform lattice with `resolution` points per axis over [-b, b]^k, filtered
    /// to U, plus the clipped corners of every piece of U.
    std::vector<Vec> grid_for_bound(double b, int resolution) const {
        if (resolution < 1) throw ArgumentError("control grid resolution must be >= 1");
        std::vector<Vec> out;
        auto push_unique = [&](const Vec& u) {
            for (const auto& v : out)
                if (v == u) return;
            out.push_back(u);
        };
        const int per_axis = (b == 0.0) ? 1 : resolution;
        std::vector<double> axis(static_cast<std::size_t>(per_axis));
        for (int i = 0; i < per_axis; ++i)
            axis[static_cast<std::size_t>(i)] = per_axis == 1 ? 0.0 : -b + 2.0 * b * i / (per_axis - 1);
        if (dim_ == 1) {
            for (double a : axis) {
                Vec u = vec1(a);
                if (in_set(u)) out.push_back(u);
            }
        } else {
            for (double a0 : axis)
                for (double a1 : axis) {
                    Vec u = vec2(a0, a1);
                    if (in_set(u)) out.push_back(u);
                }
        }
        for (const Box& piece : pieces_) {
            Box c = piece.clipped(b);
            if (!corner_degenerate_ok(c)) continue;
            for (const Vec& corner : box_corners(c)) push_unique(corner);
        }
        if (out.empty()) throw ArgumentError("control set is empty within the bound");
        return out;
    }

    /// Corners of [-B, B]^k that lie in U, falling back to the clipped piece corners.
    std::vector<Vec> corners() const {
        std::vector<Vec> out;
        Box full(std::vector<double>(static_cast<std::size_t>(dim_), -bound_),
                 std::vector<double>(static_cast<std::size_t>(dim_), bound_));
        for (const Vec& c : box_corners(full))
            if (in_set(c)) out.push_back(c);
        if (out.empty())
            for (const Box& piece : pieces_)
                for (const Vec& c : box_corners(piece.clipped(bound_))) out.push_back(c);
        return out;
    }

    /// Uniform draw from U ∩ [-B, B]^k by rejection from the bound box.
    template <class Rng>
    Vec sample(Rng& rng) const {
        std::uniform_real_distribution<double> unif(-bound_, bound_);
        for (int attempt = 0; attempt < 10000; ++attempt) {
            Vec u(dim_);
            for (int i = 0; i < dim_; ++i) u[i] = bound_ == 0.0 ? 0.0 : unif(rng);
            if (in_set(u)) return u;
        }
        return grid(3).front();
    }

private:
    static bool corner_degenerate_ok(const Box& c) {
        for (int i = 0; i < c.dim(); ++i)
            if (c.lower[i] > c.upper[i]) return false;
        return true;
    }

    static std::vector<Vec> box_corners(const Box& b) {
        std::vector<Vec> out;
        if (b.dim() == 1) {
            out.push_back(vec1(b.lower[0]));
            if (b.upper[0] != b.lower[0]) out.push_back(vec1(b.upper[0]));
        } else {
            for (double a0 : {b.lower[0], b.upper[0]})
                for (double a1 : {b.lower[1], b.upper[1]}) {
                    Vec u = vec2(a0, a1);
                    bool dup = false;
                    for (const auto& v : out) dup = dup || v == u;
                    if (!dup) out.push_back(u);
                }
        }
        for (const auto& u : out)
            for (int i = 0; i < u.size(); ++i)
                if (!std::isfinite(u[i])) return {};
        return out;
    }

    int dim_ = 1;
    double bound_ = 1.0;
    std::vector<Box> pieces_;
};

using DriftFn = std::function<Vec(double t, const Vec& x, const Vec& u)>;
using DiffusionFn = std::function<Mat(double t, const Vec& x, const Vec& u)>;
using StateFn = std::function<double(const Vec& x)>;
using ConstraintFn = std::function<double(double t, const Vec& x, const Vec& p, const Mat& m)>;

enum class ConstraintKind { concavity, positive_constant, general };

/// The function G whose non-negativity marks where the Hamiltonian is finite.
struct Constraint {
    ConstraintKind kind = ConstraintKind::positive_constant;
    ConstraintFn eval;
    /// Largest |dG/dM_ii|; sets the default relaxation step of the face-lift iteration.
    double second_order_scale = 0.0;

    double operator()(double t, const Vec& x, const Vec& p, const Mat& m) const { return eval(t, x, p, m); }

    /// G = -M in 1-D, G = -λ_max(M) in 2-D.
    static Constraint concavity() {
        Constraint c;
        c.kind = ConstraintKind::concavity;
        c.second_order_scale = 1.0;
        c.eval = [](double, const Vec&, const Vec&, const Mat& m) {
            if (m.rows() == 1) return -m(0, 0);
            Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
            return -es.eigenvalues().maxCoeff();
        };
        return c;
    }

    static Constraint positive(double value) {
        if (!(value > 0.0)) throw ArgumentError("positive constant constraint needs value > 0");
        Constraint c;
        c.kind = ConstraintKind::positive_constant;
        c.second_order_scale = 0.0;
        c.eval = [value](double, const Vec&, const Vec&, const Mat&) { return value; };
        return c;
    }

    static Constraint general(ConstraintFn fn, double second_order_scale) {
        Constraint c;
        c.kind = ConstraintKind::general;
        c.eval = std::move(fn);
        c.second_order_scale = second_order_scale;
        return c;
    }
};

/// One instance of the terminal-payoff maximisation problem
///   sup_u E[g(X_T)],  dX = b(t,X,u) dt + σ(t,X,u) dW,  X ∈ O.
struct ControlProblem {
    std::string name = "problem";
    int state_dim = 1;
    int noise_dim = 1;
    ControlSet controls{1, 1.0};
    Box domain = Box::whole(1);
    double horizon = 1.0;
    DriftFn drift;
    DiffusionFn diffusion;
    StateFn payoff;
    StateFn gauge;
    double growth_constant = 1.0;
    Constraint constraint = Constraint::positive(1.0);
    bool time_homogeneous = true;
    /// Per-dimension flag: this dimension is ln of the original state variable.
    std::vector<bool> log_dims;

    void validate() const {
        if (state_dim < 1 || state_dim > kMaxDim) throw ArgumentError("state dimension must be 1 or 2");
        if (noise_dim < 1 || noise_dim > kMaxDim) throw ArgumentError("noise dimension must be 1 or 2");
        if (domain.dim() != state_dim) throw ArgumentError("domain dimension does not match state dimension");
        if (domain.empty()) throw ArgumentError("state domain is empty");
        if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ArgumentError("horizon must be finite and positive");
        if (!drift || !diffusion || !payoff || !gauge || !constraint.eval)
            throw ArgumentError("problem is missing a coefficient, payoff, gauge or constraint");
        if (!(growth_constant >= 0.0)) throw ArgumentError("growth constant must be >= 0");
    }

    bool in_domain(const Vec& x) const { return domain.contains_open(x); }

    bool has_log_dims() const { return std::find(log_dims.begin(), log_dims.end(), true) != log_dims.end(); }

    /// Map a point of this problem's coordinates back to the original state variable.
    Vec to_physical(const Vec& y) const {
        Vec x = y;
        for (int i = 0; i < y.size(); ++i)
            if (static_cast<std::size_t>(i) < log_dims.size() && log_dims[static_cast<std::size_t>(i)]) x[i] = std::exp(y[i]);
        return x;
    }

    Vec from_physical(const Vec& x) const {
        Vec y = x;
        for (int i = 0; i < x.size(); ++i)
            if (static_cast<std::size_t>(i) < log_dims.size() && log_dims[static_cast<std::size_t>(i)]) y[i] = std::log(x[i]);
        return y;
    }
};

/// Rewrite the problem in Y_i = ln X_i for every flagged dimension (Itô's formula).
/// Flagged dimensions must have a non-negative lower domain bound.
inline ControlProblem to_log_coordinates(const ControlProblem& src, const std::vector<bool>& mask) {
    src.validate();
    if (static_cast<int>(mask.size()) != src.state_dim) throw ArgumentError("log mask has wrong dimension");
    if (src.has_log_dims()) throw ArgumentError("problem is already in log coordinates");
    ControlProblem out = src;
    out.log_dims = mask;
    for (int i = 0; i < src.state_dim; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        if (src.domain.lower[static_cast<std::size_t>(i)] < 0.0)
            throw ArgumentError("log coordinates need a domain inside the positive half-line");
        auto lo = src.domain.lower[static_cast<std::size_t>(i)];
        auto hi = src.domain.upper[static_cast<std::size_t>(i)];
        out.domain.lower[static_cast<std::size_t>(i)] = lo == 0.0 ? -kInf : std::log(lo);
        out.domain.upper[static_cast<std::size_t>(i)] = std::isfinite(hi) ? std::log(hi) : kInf;
    }
    auto to_x = [mask](const Vec& y) {
        Vec x = y;
        for (int i = 0; i < y.size(); ++i)
            if (mask[static_cast<std::size_t>(i)]) x[i] = std::exp(y[i]);
        return x;
    };
    auto drift = src.drift;
    auto diffusion = src.diffusion;
    out.drift = [drift, diffusion, mask, to_x](double t, const Vec& y, const Vec& u) {
        Vec x = to_x(y);
        Vec b = drift(t, x, u);
        Mat s = diffusion(t, x, u);
        for (int i = 0; i < b.size(); ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            double a = s.row(i).squaredNorm();
            b[i] = b[i] / x[i] - 0.5 * a / (x[i] * x[i]);
        }
        return b;
    };
    out.diffusion = [diffusion, mask, to_x](double t, const Vec& y, const Vec& u) {
        Vec x = to_x(y);
        Mat s = diffusion(t, x, u);
        for (int i = 0; i < s.rows(); ++i)
            if (mask[static_cast<std::size_t>(i)]) s.row(i) /= x[i];
        return s;
    };
    auto payoff = src.payoff;
    auto gauge = src.gauge;
    out.payoff = [payoff, to_x](const Vec& y) { return payoff(to_x(y)); };
    out.gauge = [gauge, to_x](const Vec& y) { return gauge(to_x(y)); };
    auto g = src.constraint.eval;
    out.constraint.eval = [g, mask, to_x](double t, const Vec& y, const Vec& p, const Mat& m) {
        Vec x = to_x(y);
        Vec scale = Vec::Ones(y.size());
        for (int i = 0; i < y.size(); ++i)
            if (mask[static_cast<std::size_t>(i)]) scale[i] = x[i];
        Vec px(p.size());
        Mat mx(m.rows(), m.cols());
        for (int i = 0; i < p.size(); ++i) px[i] = p[i] / scale[i];
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j) {
                double mij = m(i, j);
                if (i == j && mask[static_cast<std::size_t>(i)]) mij -= p[i];
                mx(i, j) = mij / (scale[i] * scale[j]);
            }
        return g(t, x, px, mx);
    };
    return out;
}

/// Worst ratio |g(x)| / (C ψ(x)) over the supplied points; <= 1 means the growth bound holds.
inline double growth_ratio(const ControlProblem& problem, const std::vector<Vec>& points) {
    double worst = 0.0;
    for (const Vec& x : points) {
        double bound = problem.growth_constant * problem.gauge(x);
        double g = std::abs(problem.payoff(x));
        if (bound <= 0.0) {
            if (g > 0.0) return kInf;
            continue;
        }
        worst = std::max(worst, g / bound);
    }
    return worst;
}

}  // namespace hjbcert
