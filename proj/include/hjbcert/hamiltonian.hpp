#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hjbcert/problem.hpp"

namespace hjbcert {

struct HamiltonianValue {
    double value = 0.0;
    bool infinite = false;
    std::optional<Vec> argmax;

    bool finite() const { return !infinite; }
};

struct HamiltonianOptions {
    /// Relative increase per doubling of the control bound that counts as growth.
    double tol_rel = 1e-3;
    int doublings = 6;
    double symmetry_tol = 1e-12;
};

/// b·p + ½ Tr(σσᵀ M) for one control value.
inline double generator_integrand(const ControlProblem& problem, double t, const Vec& x, const Vec& u, const Vec& p,
                                  const Mat& m) {
    Vec b = problem.drift(t, x, u);
    Mat s = problem.diffusion(t, x, u);
    Mat a = s * s.transpose();
    return b.dot(p) + 0.5 * (a.cwiseProduct(m)).sum();
}

namespace detail {

inline HamiltonianValue grid_max(const ControlProblem& problem, double t, const Vec& x, const Vec& p, const Mat& m,
                                 const std::vector<Vec>& controls) {
    HamiltonianValue h;
    h.value = -kInf;
    for (const Vec& u : controls) {
        double v = generator_integrand(problem, t, x, u, p, m);
        if (v > h.value) {
            h.value = v;
            h.argmax = u;
        }
    }
    return h;
}

}  // namespace detail

/// Grid maximisation of the controlled generator over U ∩ [-B, B]^k.
///
/// When U is intrinsically unbounded the value is also probed on the nested
/// bounds B·2^j, j = 1..doublings, at the same control spacing; if every doubling
/// still increases the maximum by more than tol_rel (relative), the Hamiltonian
/// is reported as +∞.
inline HamiltonianValue hamiltonian(const ControlProblem& problem, double t, const Vec& x, const Vec& p, const Mat& m,
                                    int control_grid_resolution, const HamiltonianOptions& opt = {}) {
    if (x.size() != problem.state_dim || !problem.in_domain(x)) throw DomainError("hamiltonian: x outside the state domain");
    if (p.size() != problem.state_dim || m.rows() != problem.state_dim || m.cols() != problem.state_dim)
        throw ArgumentError("hamiltonian: gradient/Hessian dimension mismatch");
    double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > opt.symmetry_tol * scale)
        throw ArgumentError("hamiltonian: M is not symmetric");

    const ControlSet& cs = problem.controls;
    HamiltonianValue base = detail::grid_max(problem, t, x, p, m, cs.grid(control_grid_resolution));
    if (!cs.intrinsically_unbounded() || cs.bound() == 0.0) return base;

    double prev = base.value;
    bool grew_every_time = true;
    for (int j = 1; j <= opt.doublings; ++j) {
        const double factor = std::ldexp(1.0, j);
        const int res = cs.dim() == 1 ? (control_grid_resolution - 1) * (1 << j) + 1 : control_grid_resolution;
        double cur = detail::grid_max(problem, t, x, p, m, cs.grid_for_bound(cs.bound() * factor, std::max(res, 2))).value;
        if (!(cur - prev > opt.tol_rel * std::max(1.0, std::abs(prev)))) {
            grew_every_time = false;
            break;
        }
        prev = cur;
    }
    if (grew_every_time) {
        HamiltonianValue inf;
        inf.value = kInf;
        inf.infinite = true;
        return inf;
    }
    return base;
}

struct CompatibilitySample {
    double t;
    Vec x;
    Vec p;
    Mat m;
};

struct CompatibilityViolation {
    std::size_t sample_index;
    std::string rule;  // "H finite => G >= 0" or "G > 0 => H finite"
    double hamiltonian;
    double constraint;
};

struct CompatibilityReport {
    std::size_t checked = 0;
    std::vector<CompatibilityViolation> violations;

    bool passed() const { return violations.empty(); }
};

/// Check both directions of the H/G compatibility on sampled points.
inline CompatibilityReport check_compatibility(const ControlProblem& problem,
                                               const std::vector<CompatibilitySample>& samples,
                                               int control_grid_resolution = 201, double tol = 1e-9,
                                               const HamiltonianOptions& opt = {}) {
    if (samples.empty()) throw ArgumentError("check_compatibility: no samples");
    CompatibilityReport rep;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        HamiltonianValue h = hamiltonian(problem, s.t, s.x, s.p, s.m, control_grid_resolution, opt);
        double g = problem.constraint(s.t, s.x, s.p, s.m);
        if (h.finite() && g < -tol) rep.violations.push_back({i, "H finite => G >= 0", h.value, g});
        if (g > tol && !h.finite()) rep.violations.push_back({i, "G > 0 => H finite", h.value, g});
        ++rep.checked;
    }
    return rep;
}

struct CoefficientProbeOptions {
    Box sub_box;
    double lipschitz_threshold = kInf;
    double growth_threshold = kInf;
};

struct CoefficientProbeReport {
    std::size_t pairs = 0;
    double max_drift_lipschitz = 0.0;
    double max_diffusion_lipschitz = 0.0;
    double max_drift_growth = 0.0;
    double max_diffusion_growth = 0.0;
    std::vector<std::string> flags;

    bool flagged() const { return !flags.empty(); }
};

/// Empirical Lipschitz and linear-growth ratios of b and σ on a bounded sub-box.
/// Growth ratios are measured at the origin, or at the box centre when the
/// origin is outside the domain.
inline CoefficientProbeReport probe_coefficients(const ControlProblem& problem, int n_pairs, std::uint64_t seed,
                                                 const CoefficientProbeOptions& opt) {
    if (n_pairs < 1) throw ArgumentError("probe_coefficients: n_pairs must be >= 1");
    const Box& box = opt.sub_box;
    if (box.dim() != problem.state_dim || box.empty() || !box.bounded())
        throw ArgumentError("probe_coefficients: degenerate sub-box");
    if (!problem.in_domain(box.center()))
        throw ArgumentError("probe_coefficients: sub-box outside the domain");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw_point = [&] {
        Vec x(problem.state_dim);
        for (int i = 0; i < problem.state_dim; ++i) x[i] = box.lower[i] + box.width(i) * unit(rng);
        return x;
    };
    Vec anchor = Vec::Zero(problem.state_dim);
    if (!problem.in_domain(anchor)) anchor = box.center();

    CoefficientProbeReport rep;
    for (int k = 0; k < n_pairs; ++k) {
        double t = problem.horizon * unit(rng);
        Vec u = problem.controls.sample(rng);
        Vec x = draw_point();
        Vec y = draw_point();
        double dist = (x - y).norm();
        if (dist > 0.0) {
            double lb = (problem.drift(t, x, u) - problem.drift(t, y, u)).norm() / dist;
            double ls = (problem.diffusion(t, x, u) - problem.diffusion(t, y, u)).norm() / dist;
            rep.max_drift_lipschitz = std::max(rep.max_drift_lipschitz, lb);
            rep.max_diffusion_lipschitz = std::max(rep.max_diffusion_lipschitz, ls);
        }
        double un = u.norm();
        rep.max_drift_growth = std::max(rep.max_drift_growth, problem.drift(t, anchor, u).norm() / (1.0 + un));
        rep.max_diffusion_growth =
            std::max(rep.max_diffusion_growth, problem.diffusion(t, anchor, u).norm() / (1.0 + un));
        ++rep.pairs;
    }
    if (rep.max_drift_lipschitz > opt.lipschitz_threshold) rep.flags.emplace_back("drift Lipschitz ratio above threshold");
    if (rep.max_diffusion_lipschitz > opt.lipschitz_threshold)
        rep.flags.emplace_back("diffusion Lipschitz ratio above threshold");
    if (rep.max_drift_growth > opt.growth_threshold) rep.flags.emplace_back("drift growth ratio above threshold");
    if (rep.max_diffusion_growth > opt.growth_threshold)
        rep.flags.emplace_back("diffusion growth ratio above threshold");
    return rep;
}

}  // namespace hjbcert
