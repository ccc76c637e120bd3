#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <string>

#include "hjbcert/grid.hpp"
#include "hjbcert/hjb_solver.hpp"
#include "hjbcert/models.hpp"

namespace hjbcert {

/// Maximiser u and value of p u μ - ½ p (1-p) u² σ² over |u| <= B.
struct MertonExponent {
    double u_star = 0.0;
    double lambda = 0.0;
};

inline MertonExponent merton_lambda(const MertonParams& m) {
    m.validate();
    const double interior = m.mu / ((1.0 - m.p) * m.sigma * m.sigma);
    const double u = std::clamp(interior, -m.bound, m.bound);
    return {u, m.p * u * m.mu - 0.5 * m.p * (1.0 - m.p) * u * u * m.sigma * m.sigma};
}

inline double merton_value(double t, double x, const MertonParams& m) {
    if (!(x > 0.0)) throw DomainError("merton_value: wealth must be positive");
    if (!(t >= 0.0 && t <= m.horizon)) throw ArgumentError("merton_value: t outside [0, T]");
    return std::pow(x, m.p) * std::exp(merton_lambda(m).lambda * (m.horizon - t));
}

inline double merton_optimal_control(const MertonParams& m) { return merton_lambda(m).u_star; }

enum class HeatPayoff { square, affine };

/// E[g(x + s W_{T-t})] for g(x) = x² or g(x) = a + b x.
inline double heat_value(double t, double x, double sigma, double horizon, HeatPayoff payoff, double a = 0.0,
                         double b = 1.0) {
    if (!(t <= horizon)) throw ArgumentError("heat_value: t after the horizon");
    switch (payoff) {
        case HeatPayoff::square: return x * x + sigma * sigma * (horizon - t);
        case HeatPayoff::affine: return a + b * x;
    }
    throw UnsupportedError("heat_value: unsupported payoff");
}

/// Named closed-form oracle.
struct OracleSpec {
    std::string family;  // merton | heat | constant
    std::map<std::string, double> params;

    double param(const std::string& k, double fallback) const {
        auto it = params.find(k);
        return it == params.end() ? fallback : it->second;
    }

    MertonParams merton() const {
        MertonParams m;
        m.mu = param("mu", m.mu);
        m.sigma = param("sigma", m.sigma);
        m.p = param("p", m.p);
        m.horizon = param("T", m.horizon);
        m.bound = param("B", m.bound);
        m.validate();
        return m;
    }

    void validate() const {
        if (family == "merton") {
            merton();
        } else if (family == "heat") {
            if (!(param("sigma", 1.0) >= 0.0) || !(param("T", 1.0) > 0.0)) throw ArgumentError("heat oracle: bad parameters");
        } else if (family != "constant") {
            throw UnsupportedError("unknown oracle family '" + family + "'");
        }
    }

    double operator()(double t, const Vec& x) const {
        if (family == "merton") return merton_value(t, x[0], merton());
        if (family == "heat") {
            const bool affine = param("affine", 0.0) != 0.0;
            return heat_value(t, x[0], param("sigma", 1.0), param("T", 1.0), affine ? HeatPayoff::affine : HeatPayoff::square,
                              param("a", 0.0), param("b", 1.0));
        }
        if (family == "constant") return param("c", 0.0);
        throw UnsupportedError("unknown oracle family '" + family + "'");
    }
};

/// Single-writer cache of reference solutions keyed by a content hash.
class ReferenceCache {
public:
    GridFunction get_or_compute(const std::string& key, const std::function<GridFunction()>& compute) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = store_.find(key);
            if (it != store_.end()) return it->second;
        }
        GridFunction g = compute();
        std::lock_guard<std::mutex> lock(mu_);
        return store_.emplace(key, std::move(g)).first->second;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mu_);
        return store_.size();
    }

private:
    mutable std::mutex mu_;
    std::map<std::string, GridFunction> store_;
};

/// t = 0 slice of a solve on a grid refined fine_factor times per axis (and in
/// output time nodes), read back at the coarse nodes.
inline GridFunction dense_reference(const ControlProblem& problem, const SpatialGrid& coarse, SchemeConfig cfg,
                                    int fine_factor, TerminalKind terminal = TerminalKind::facelift,
                                    ReferenceCache* cache = nullptr, const std::string& key = {}) {
    if (fine_factor < 1) throw ArgumentError("dense_reference: fine_factor must be >= 1");
    auto compute = [&] {
        std::vector<Axis> axes;
        for (const Axis& a : coarse.axes())
            axes.push_back(SpatialGrid::make_axis(a.physical(0), a.physical(a.size() - 1),
                                                  static_cast<std::size_t>(fine_factor) * (a.size() - 1) + 1, a.spacing));
        SpatialGrid fine(std::move(axes));
        cfg.time_nodes = static_cast<std::size_t>(fine_factor) * (cfg.time_nodes - 1) + 1;
        cfg.substeps = 0;
        SpaceTimeSolution sol = solve_hjb(problem, make_terminal(problem, fine, terminal), cfg);
        std::vector<double> v(coarse.size());
        for (std::size_t k = 0; k < coarse.size(); ++k) v[k] = sol.slices.front().at(coarse.physical_point(k));
        return GridFunction(coarse, std::move(v));
    };
    if (cache && !key.empty()) return cache->get_or_compute(key + "#" + std::to_string(fine_factor), compute);
    return compute();
}

}  // namespace hjbcert
