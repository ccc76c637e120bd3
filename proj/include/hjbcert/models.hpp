#pragma once

#include <cmath>
#include <string>

#include "hjbcert/problem.hpp"

namespace hjbcert {

/// Power-utility portfolio problem with the control as the proportion of wealth
/// in the risky asset: dX = u μ X dt + u σ X dW on (0, ∞), g(x) = x^p.
struct MertonParams {
    double mu = 0.1;
    double sigma = 0.2;
    double p = 0.5;
    double horizon = 1.0;
    double bound = 10.0;

    void validate() const {
        if (!(sigma > 0.0)) throw ArgumentError("merton: sigma must be positive");
        if (!(p > 0.0 && p < 1.0)) throw ArgumentError("merton: p must lie in (0, 1)");
        if (!(horizon > 0.0)) throw ArgumentError("merton: horizon must be positive");
        if (!(bound >= 0.0)) throw ArgumentError("merton: bound must be >= 0");
    }
};

inline ControlProblem merton_problem(const MertonParams& m) {
    m.validate();
    ControlProblem pr;
    pr.name = "merton";
    pr.state_dim = 1;
    pr.noise_dim = 1;
    pr.controls = ControlSet(1, m.bound);
    pr.domain = Box::interval(0.0, kInf);
    pr.horizon = m.horizon;
    pr.drift = [mu = m.mu](double, const Vec& x, const Vec& u) { return vec1(u[0] * mu * x[0]); };
    pr.diffusion = [s = m.sigma](double, const Vec& x, const Vec& u) { return mat1(u[0] * s * x[0]); };
    pr.payoff = [p = m.p](const Vec& x) { return std::pow(x[0], p); };
    pr.gauge = [p = m.p](const Vec& x) { return std::pow(x[0], p); };
    pr.growth_constant = 1.0;
    pr.constraint = Constraint::concavity();
    return pr;
}

/// Uncontrolled diffusion dX = s dW (singleton control {0}), g(x) = x².
inline ControlProblem heat_problem(double sigma, double horizon) {
    ControlProblem pr;
    pr.name = "heat";
    pr.controls = ControlSet(1, 0.0);
    pr.domain = Box::whole(1);
    pr.horizon = horizon;
    pr.drift = [](double, const Vec&, const Vec&) { return vec1(0.0); };
    pr.diffusion = [sigma](double, const Vec&, const Vec&) { return mat1(sigma); };
    pr.payoff = [](const Vec& x) { return x[0] * x[0]; };
    pr.gauge = [](const Vec& x) { return 1.0 + x[0] * x[0]; };
    pr.growth_constant = 1.0;
    pr.constraint = Constraint::positive(1.0);
    return pr;
}

/// State-independent model b = u, σ = u with U = R; its Hamiltonian is
/// sup_u [u p + u² M / 2], finite exactly when M < 0 (or p = M = 0).
inline ControlProblem utility_model(double bound) {
    ControlProblem pr;
    pr.name = "utility";
    pr.controls = ControlSet(1, bound);
    pr.domain = Box::interval(0.0, kInf);
    pr.horizon = 1.0;
    pr.drift = [](double, const Vec&, const Vec& u) { return vec1(u[0]); };
    pr.diffusion = [](double, const Vec&, const Vec& u) { return mat1(u[0]); };
    pr.payoff = [](const Vec& x) { return std::sqrt(x[0]); };
    pr.gauge = [](const Vec& x) { return 1.0 + std::sqrt(x[0]); };
    pr.growth_constant = 1.0;
    pr.constraint = Constraint::concavity();
    return pr;
}

/// b = u, σ = 1 with the compact control set [-B, B]; G ≡ 1.
inline ControlProblem bounded_control_problem(double bound) {
    ControlProblem pr;
    pr.name = "bounded_control";
    pr.controls = ControlSet(1, bound, {Box::interval(-bound, bound)});
    pr.domain = Box::whole(1);
    pr.horizon = 1.0;
    pr.drift = [](double, const Vec&, const Vec& u) { return vec1(u[0]); };
    pr.diffusion = [](double, const Vec&, const Vec&) { return mat1(1.0); };
    pr.payoff = [](const Vec& x) { return -x[0] * x[0]; };
    pr.gauge = [](const Vec& x) { return 1.0 + x[0] * x[0]; };
    pr.growth_constant = 1.0;
    pr.constraint = Constraint::positive(1.0);
    return pr;
}

/// Pure volatility control dX = u dW with U = R, so the value function of a
/// payoff is its concave envelope as soon as t < T.
inline ControlProblem volatility_control_problem(double bound, double horizon, StateFn payoff, StateFn gauge,
                                                 double growth_constant) {
    ControlProblem pr;
    pr.name = "volatility_control";
    pr.controls = ControlSet(1, bound);
    pr.domain = Box::whole(1);
    pr.horizon = horizon;
    pr.drift = [](double, const Vec&, const Vec&) { return vec1(0.0); };
    pr.diffusion = [](double, const Vec&, const Vec& u) { return mat1(u[0]); };
    pr.payoff = std::move(payoff);
    pr.gauge = std::move(gauge);
    pr.growth_constant = growth_constant;
    pr.constraint = Constraint::concavity();
    return pr;
}

}  // namespace hjbcert
