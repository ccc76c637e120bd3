#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "hjbcert/problem.hpp"

namespace hjbcert {

enum class PolicyRepresentation { analytic, table };

/// Bounded Markov control rule u(t, x), x in the problem's physical coordinates.
struct FeedbackPolicy {
    std::function<Vec(double t, const Vec& x)> rule;
    double bound = 0.0;
    PolicyRepresentation representation = PolicyRepresentation::analytic;
    std::string id = "policy";

    Vec operator()(double t, const Vec& x) const { return rule(t, x); }

    bool respects_bound(const Vec& u, double slack = 1e-12) const {
        for (int i = 0; i < u.size(); ++i)
            if (!(std::abs(u[i]) <= bound + slack)) return false;
        return true;
    }
};

inline FeedbackPolicy constant_policy(const Vec& u, std::string id = {}) {
    FeedbackPolicy p;
    p.rule = [u](double, const Vec&) { return u; };
    p.bound = u.size() ? u.cwiseAbs().maxCoeff() : 0.0;
    p.id = id.empty() ? "constant" : std::move(id);
    return p;
}

}  // namespace hjbcert
