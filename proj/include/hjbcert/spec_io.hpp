#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hjbcert/certifier.hpp"
#include "hjbcert/facelift.hpp"
#include "hjbcert/hjb_solver.hpp"
#include "hjbcert/models.hpp"
#include "hjbcert/oracles.hpp"
#include "hjbcert/simulator.hpp"

namespace hjbcert {

using json = nlohmann::json;

namespace io {

// ---------------------------------------------------------------------------
// Small JSON readers with library error types.

inline const json& require(const json& j, const char* key, const std::string& ctx) {
    if (!j.is_object() || !j.contains(key)) throw ArgumentError(ctx + ": missing field '" + key + "'");
    return j.at(key);
}

inline double number(const json& j, const std::string& ctx) {
    if (j.is_null()) return kInf;
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "+inf") return kInf;
        if (s == "-inf") return -kInf;
    }
    if (!j.is_number()) throw ArgumentError(ctx + ": expected a number");
    return j.get<double>();
}

inline double number_or(const json& j, const char* key, double fallback, const std::string& ctx) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    return number(j.at(key), ctx + "." + key);
}

inline std::vector<double> numbers(const json& j, const std::string& ctx) {
    if (j.is_number()) return {j.get<double>()};
    if (!j.is_array()) throw ArgumentError(ctx + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : j) out.push_back(number(e, ctx));
    return out;
}

inline Vec vector_of(const json& j, int dim, const std::string& ctx) {
    auto v = numbers(j, ctx);
    if (static_cast<int>(v.size()) != dim) throw ArgumentError(ctx + ": expected " + std::to_string(dim) + " entries");
    Vec out(dim);
    for (int i = 0; i < dim; ++i) out[i] = v[static_cast<std::size_t>(i)];
    return out;
}

inline Mat matrix_of(const json& j, int rows, int cols, const std::string& ctx) {
    Mat m = Mat::Zero(rows, cols);
    if (j.is_number() && rows == 1 && cols == 1) {
        m(0, 0) = j.get<double>();
        return m;
    }
    if (!j.is_array() || static_cast<int>(j.size()) != rows) throw ArgumentError(ctx + ": expected " + std::to_string(rows) + " rows");
    for (int r = 0; r < rows; ++r) {
        auto row = numbers(j[static_cast<std::size_t>(r)], ctx);
        if (static_cast<int>(row.size()) != cols) throw ArgumentError(ctx + ": expected " + std::to_string(cols) + " columns");
        for (int c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
    }
    return m;
}

inline json vec_json(const Vec& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json bound_json(double x) {
    if (std::isfinite(x)) return x;
    return nullptr;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ArgumentError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

/// Relative references inside a spec are resolved against the spec's directory.
inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& ref) {
    std::filesystem::path p(ref);
    if (p.is_absolute() || base.empty()) return p;
    return base / p;
}

// ---------------------------------------------------------------------------
// Scalar state functions: {"type": ..., "offset": a, "scale": s} -> a + s·base(x).

inline StateFn state_function(const json& j, int dim, const std::string& ctx) {
    const std::string type = require(j, "type", ctx).get<std::string>();
    const double offset = number_or(j, "offset", 0.0, ctx);
    const double scale = number_or(j, "scale", 1.0, ctx);
    auto center = [&](double fallback) {
        Vec c = Vec::Constant(dim, fallback);
        if (j.contains("center")) {
            auto v = numbers(j.at("center"), ctx + ".center");
            if (v.size() == 1) c.setConstant(v[0]);
            else c = vector_of(j.at("center"), dim, ctx + ".center");
        }
        return c;
    };
    StateFn base;
    if (type == "power") {
        const double e = number(require(j, "exponent", ctx), ctx + ".exponent");
        base = [e](const Vec& x) { return std::pow(x[0], e); };
    } else if (type == "abs") {
        const Vec c = center(0.0);
        base = [c](const Vec& x) { return (x - c).cwiseAbs().sum(); };
    } else if (type == "quadratic") {
        const Vec c = center(0.0);
        Vec coef = Vec::Ones(dim);
        if (j.contains("coef")) {
            auto v = numbers(j.at("coef"), ctx + ".coef");
            coef = v.size() == 1 ? Vec::Constant(dim, v[0]) : vector_of(j.at("coef"), dim, ctx + ".coef");
        }
        base = [c, coef](const Vec& x) { return (coef.array() * (x - c).array().square()).sum(); };
    } else if (type == "constant") {
        const double v = number(require(j, "value", ctx), ctx + ".value");
        base = [v](const Vec&) { return v; };
    } else if (type == "affine") {
        const double a = number_or(j, "a", 0.0, ctx);
        const Vec b = j.contains("b") ? vector_of(j.at("b"), dim, ctx + ".b") : Vec::Zero(dim);
        base = [a, b](const Vec& x) { return a + b.dot(x); };
    } else if (type == "piecewise_linear") {
        if (dim != 1) throw UnsupportedError(ctx + ": piecewise_linear is 1-D only");
        auto xs = numbers(require(j, "x", ctx), ctx + ".x");
        auto ys = numbers(require(j, "y", ctx), ctx + ".y");
        if (xs.size() < 2 || xs.size() != ys.size()) throw ArgumentError(ctx + ": piecewise_linear needs matching x, y with >= 2 knots");
        for (std::size_t i = 1; i < xs.size(); ++i)
            if (!(xs[i] > xs[i - 1])) throw ArgumentError(ctx + ": piecewise_linear knots must increase");
        base = [xs, ys](const Vec& x) {
            const double t = x[0];
            auto it = std::upper_bound(xs.begin(), xs.end(), t);
            std::size_t i = it == xs.begin() ? 0 : static_cast<std::size_t>(it - xs.begin()) - 1;
            i = std::min(i, xs.size() - 2);
            return ys[i] + (ys[i + 1] - ys[i]) * (t - xs[i]) / (xs[i + 1] - xs[i]);
        };
    } else if (type == "call") {
        const double k = number(require(j, "strike", ctx), ctx + ".strike");
        base = [k](const Vec& x) { return std::max(x[0] - k, 0.0); };
    } else {
        throw UnsupportedError(ctx + ": unknown function type '" + type + "'");
    }
    if (offset == 0.0 && scale == 1.0) return base;
    return [base, offset, scale](const Vec& x) { return offset + scale * base(x); };
}

inline Constraint constraint_from(const json& j, int dim, const std::string& ctx) {
    const std::string type = require(j, "type", ctx).get<std::string>();
    if (type == "concavity") return Constraint::concavity();
    if (type == "positive") return Constraint::positive(number_or(j, "value", 1.0, ctx));
    if (type == "linear") {
        const double c = number_or(j, "c", 0.0, ctx);
        const Vec p = j.contains("p") ? vector_of(j.at("p"), dim, ctx + ".p") : Vec::Zero(dim);
        const Mat m = j.contains("m") ? matrix_of(j.at("m"), dim, dim, ctx + ".m") : Mat::Zero(dim, dim);
        double scale = 0.0;
        for (int i = 0; i < dim; ++i) scale = std::max(scale, std::abs(m(i, i)));
        return Constraint::general(
            [c, p, m](double, const Vec&, const Vec& pp, const Mat& mm) { return c + p.dot(pp) + (m.array() * mm.array()).sum(); },
            scale);
    }
    throw UnsupportedError(ctx + ": unknown constraint type '" + type + "'");
}

inline ControlSet controls_from(const json& j, const std::string& ctx) {
    const int dim = j.value("dim", 1);
    const double bound = number(require(j, "bound", ctx), ctx + ".bound");
    std::vector<Box> pieces;
    if (j.contains("pieces"))
        for (const auto& pc : j.at("pieces")) {
            auto lo = numbers(require(pc, "lower", ctx + ".pieces"), ctx + ".pieces.lower");
            auto hi = numbers(require(pc, "upper", ctx + ".pieces"), ctx + ".pieces.upper");
            pieces.emplace_back(std::move(lo), std::move(hi));
        }
    return ControlSet(dim, bound, std::move(pieces));
}

/// Bilinear lookup in a 1-D (x, u) coefficient table, clamped at the table edges.
struct CoefficientTable {
    std::vector<double> xs, us;
    std::vector<std::vector<double>> b, s;

    static void locate(const std::vector<double>& n, double y, std::size_t& i, double& w) {
        if (n.size() == 1) {
            i = 0;
            w = 0.0;
            return;
        }
        y = std::clamp(y, n.front(), n.back());
        auto it = std::upper_bound(n.begin(), n.end(), y);
        i = it == n.begin() ? 0 : static_cast<std::size_t>(it - n.begin()) - 1;
        i = std::min(i, n.size() - 2);
        w = (y - n[i]) / (n[i + 1] - n[i]);
    }

    double lookup(const std::vector<std::vector<double>>& tab, double x, double u) const {
        std::size_t i, k;
        double wx, wu;
        locate(xs, x, i, wx);
        locate(us, u, k, wu);
        auto at = [&](std::size_t a, std::size_t c) {
            return tab[std::min(a, xs.size() - 1)][std::min(c, us.size() - 1)];
        };
        return (1 - wx) * ((1 - wu) * at(i, k) + wu * at(i, k + 1)) + wx * ((1 - wu) * at(i + 1, k) + wu * at(i + 1, k + 1));
    }
};

inline std::vector<std::vector<double>> table_2d(const json& j, std::size_t rows, std::size_t cols, const std::string& ctx) {
    if (!j.is_array() || j.size() != rows) throw ArgumentError(ctx + ": expected " + std::to_string(rows) + " rows");
    std::vector<std::vector<double>> out;
    for (const auto& r : j) {
        auto row = numbers(r, ctx);
        if (row.size() != cols) throw ArgumentError(ctx + ": expected " + std::to_string(cols) + " columns");
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Problem specification.

/// Build a ControlProblem from its JSON description. Family defaults are
/// overridden by any explicitly given common field.
inline ControlProblem problem_from_json(const json& j) {
    const std::string ctx = "problem";
    const std::string family = io::require(j, "family", ctx).get<std::string>();
    const json params = j.value("params", json::object());
    const std::string pctx = ctx + ".params";
    ControlProblem pr;
    const double horizon = io::number_or(j, "horizon", io::number_or(params, "T", 1.0, pctx), ctx);

    if (family == "merton") {
        MertonParams m;
        m.mu = io::number_or(params, "mu", m.mu, pctx);
        m.sigma = io::number_or(params, "sigma", m.sigma, pctx);
        m.p = io::number_or(params, "p", m.p, pctx);
        m.bound = io::number_or(params, "B", m.bound, pctx);
        m.horizon = horizon;
        pr = merton_problem(m);
    } else if (family == "heat") {
        pr = heat_problem(io::number_or(params, "sigma", 1.0, pctx), horizon);
    } else if (family == "volatility_control") {
        pr = volatility_control_problem(io::number_or(params, "B", 1.0, pctx), horizon,
                                        [](const Vec& x) { return std::abs(x[0]); },
                                        [](const Vec& x) { return 1.0 + std::abs(x[0]); }, 1.0);
    } else {
        const int d = j.value("state_dim", 1);
        const int m = j.value("noise_dim", d);
        pr.state_dim = d;
        pr.noise_dim = m;
        pr.domain = Box::whole(d);
        pr.payoff = [](const Vec&) { return 0.0; };
        pr.gauge = [](const Vec&) { return 1.0; };
        if (d < 1 || d > kMaxDim || m < 1 || m > kMaxDim) throw ArgumentError("problem: dimensions must be 1 or 2");
        if (family == "constant") {
            const Vec b = params.contains("b") ? io::vector_of(params.at("b"), d, pctx + ".b") : Vec::Zero(d);
            const Mat s = params.contains("s") ? io::matrix_of(params.at("s"), d, m, pctx + ".s") : Mat::Zero(d, m);
            pr.controls = ControlSet(1, 0.0);
            pr.drift = [b](double, const Vec&, const Vec&) { return b; };
            pr.diffusion = [s](double, const Vec&, const Vec&) { return s; };
        } else if (family == "linear_drift" || family == "proportional_control") {
            if (!j.contains("controls")) throw ArgumentError("problem: family '" + family + "' needs a controls block");
            const int k = j.at("controls").value("dim", 1);
            std::vector<Mat> su;
            if (params.contains(family == "linear_drift" ? "su" : "sigma")) {
                const json& list = params.at(family == "linear_drift" ? "su" : "sigma");
                if (!list.is_array() || static_cast<int>(list.size()) != k)
                    throw ArgumentError(pctx + ": expected one diffusion matrix per control component");
                for (const auto& e : list) su.push_back(io::matrix_of(e, d, m, pctx));
            } else {
                su.assign(static_cast<std::size_t>(k), Mat::Zero(d, m));
            }
            if (family == "linear_drift") {
                const Vec b0 = params.contains("b0") ? io::vector_of(params.at("b0"), d, pctx + ".b0") : Vec::Zero(d);
                const Mat bx = params.contains("bx") ? io::matrix_of(params.at("bx"), d, d, pctx + ".bx") : Mat::Zero(d, d);
                const Mat bu = params.contains("bu") ? io::matrix_of(params.at("bu"), d, k, pctx + ".bu") : Mat::Zero(d, k);
                const Mat s0 = params.contains("s0") ? io::matrix_of(params.at("s0"), d, m, pctx + ".s0") : Mat::Zero(d, m);
                pr.drift = [b0, bx, bu](double, const Vec& x, const Vec& u) -> Vec { return b0 + bx * x + bu * u; };
                pr.diffusion = [s0, su](double, const Vec&, const Vec& u) -> Mat {
                    Mat s = s0;
                    for (int i = 0; i < u.size(); ++i) s += u[i] * su[static_cast<std::size_t>(i)];
                    return s;
                };
            } else {
                const Mat mu = io::matrix_of(io::require(params, "mu", pctx), d, k, pctx + ".mu");
                pr.domain = Box(std::vector<double>(static_cast<std::size_t>(d), 0.0),
                                std::vector<double>(static_cast<std::size_t>(d), kInf));
                pr.drift = [mu](double, const Vec& x, const Vec& u) -> Vec { return (x.array() * (mu * u).array()).matrix(); };
                pr.diffusion = [su](double, const Vec& x, const Vec& u) -> Mat {
                    Mat s = Mat::Zero(x.size(), su.front().cols());
                    for (int i = 0; i < u.size(); ++i) s += u[i] * su[static_cast<std::size_t>(i)];
                    for (int r = 0; r < s.rows(); ++r) s.row(r) *= x[r];
                    return s;
                };
            }
        } else if (family == "table") {
            if (d != 1 || m != 1) throw UnsupportedError("problem: table coefficients are 1-D only");
            auto tab = std::make_shared<io::CoefficientTable>();
            tab->xs = io::numbers(io::require(params, "x", pctx), pctx + ".x");
            tab->us = io::numbers(io::require(params, "u", pctx), pctx + ".u");
            if (tab->xs.empty() || tab->us.empty()) throw ArgumentError(pctx + ": empty table axes");
            for (auto* ax : {&tab->xs, &tab->us})
                for (std::size_t i = 1; i < ax->size(); ++i)
                    if (!((*ax)[i] > (*ax)[i - 1])) throw ArgumentError(pctx + ": table axes must increase");
            tab->b = io::table_2d(io::require(params, "b", pctx), tab->xs.size(), tab->us.size(), pctx + ".b");
            tab->s = io::table_2d(io::require(params, "sigma", pctx), tab->xs.size(), tab->us.size(), pctx + ".sigma");
            pr.drift = [tab](double, const Vec& x, const Vec& u) { return vec1(tab->lookup(tab->b, x[0], u[0])); };
            pr.diffusion = [tab](double, const Vec& x, const Vec& u) { return mat1(tab->lookup(tab->s, x[0], u[0])); };
        } else {
            throw UnsupportedError("problem: unknown family '" + family + "'");
        }
    }

    pr.name = j.value("name", family);
    pr.horizon = horizon;
    if (j.contains("controls")) pr.controls = io::controls_from(j.at("controls"), ctx + ".controls");
    if (j.contains("domain")) {
        const json& dj = j.at("domain");
        auto lo = io::numbers(io::require(dj, "lower", ctx + ".domain"), ctx + ".domain.lower");
        auto hi = io::numbers(io::require(dj, "upper", ctx + ".domain"), ctx + ".domain.upper");
        for (std::size_t i = 0; i < lo.size(); ++i)
            if (dj.at("lower").is_array() && dj.at("lower")[i].is_null()) lo[i] = -kInf;
        pr.domain = Box(std::move(lo), std::move(hi));
    }
    if (j.contains("payoff")) pr.payoff = io::state_function(j.at("payoff"), pr.state_dim, ctx + ".payoff");
    if (j.contains("gauge")) pr.gauge = io::state_function(j.at("gauge"), pr.state_dim, ctx + ".gauge");
    pr.growth_constant = io::number_or(j, "growth_constant", pr.growth_constant, ctx);
    if (j.contains("constraint")) {
        pr.constraint = io::constraint_from(j.at("constraint"), pr.state_dim, ctx + ".constraint");
    } else if (family != "merton" && family != "heat" && family != "volatility_control") {
        pr.constraint = pr.controls.intrinsically_unbounded() && pr.controls.bound() > 0.0 ? Constraint::concavity()
                                                                                          : Constraint::positive(1.0);
    }
    if (pr.controls.dim() < 1) throw ArgumentError("problem: bad control dimension");
    pr.validate();
    return pr;
}

// ---------------------------------------------------------------------------
// Grid and scheme specification.

struct GridSpec {
    SpatialGrid grid;
    SchemeConfig scheme;
    FaceliftOptions facelift;
};

inline ConstraintMode constraint_mode_from(const std::string& s) {
    if (s == "project") return ConstraintMode::project;
    if (s == "penalize") return ConstraintMode::penalize;
    if (s == "none") return ConstraintMode::none;
    throw ConfigError("scheme: unknown constraint_mode '" + s + "'");
}

inline const char* to_string(ConstraintMode m) {
    switch (m) {
        case ConstraintMode::project: return "project";
        case ConstraintMode::penalize: return "penalize";
        default: return "none";
    }
}

inline BoundaryMode boundary_mode_from(const std::string& s) {
    if (s == "dirichlet") return BoundaryMode::dirichlet;
    if (s == "gauge") return BoundaryMode::gauge;
    throw ConfigError("scheme: unknown boundary '" + s + "'");
}

inline const char* to_string(BoundaryMode m) { return m == BoundaryMode::gauge ? "gauge" : "dirichlet"; }

inline TerminalKind terminal_kind_from(const std::string& s) {
    if (s == "raw") return TerminalKind::raw;
    if (s == "facelift") return TerminalKind::facelift;
    throw ConfigError("unknown terminal kind '" + s + "' (expected raw or facelift)");
}

inline const char* to_string(TerminalKind k) { return k == TerminalKind::facelift ? "facelift" : "raw"; }

inline SchemeConfig scheme_from_json(const json& j, SchemeConfig s = {}) {
    const std::string ctx = "scheme";
    if (j.contains("time_nodes")) s.time_nodes = j.at("time_nodes").get<std::size_t>();
    if (j.contains("control_resolution")) s.control_resolution = j.at("control_resolution").get<int>();
    if (j.contains("constraint_mode")) s.constraint_mode = constraint_mode_from(j.at("constraint_mode").get<std::string>());
    s.penalty_weight = io::number_or(j, "penalty_weight", s.penalty_weight, ctx);
    if (j.contains("upwind")) s.upwind = j.at("upwind").get<bool>();
    if (j.contains("substeps")) s.substeps = j.at("substeps").get<std::size_t>();
    if (j.contains("boundary")) s.boundary = boundary_mode_from(j.at("boundary").get<std::string>());
    if (j.contains("threads")) s.threads = j.at("threads").get<int>();
    s.validate();
    return s;
}

inline json to_json(const SchemeConfig& s) {
    return {{"time_nodes", s.time_nodes},
            {"control_resolution", s.control_resolution},
            {"constraint_mode", to_string(s.constraint_mode)},
            {"penalty_weight", s.penalty_weight},
            {"upwind", s.upwind},
            {"substeps", s.substeps},
            {"boundary", to_string(s.boundary)},
            {"threads", s.threads}};
}

inline FaceliftOptions facelift_options_from_json(const json& j, FaceliftOptions o = {}) {
    const std::string ctx = "facelift";
    o.relaxation = io::number_or(j, "relaxation", o.relaxation, ctx);
    if (j.contains("max_iters")) o.max_iters = j.at("max_iters").get<std::size_t>();
    o.tol = io::number_or(j, "tol", o.tol, ctx);
    if (j.contains("edges")) {
        const auto e = j.at("edges").get<std::string>();
        if (e == "clamp") o.edges = EdgeRule::clamp;
        else if (e == "free") o.edges = EdgeRule::free;
        else throw ConfigError("facelift: unknown edge rule '" + e + "'");
    }
    return o;
}

inline json to_json(const FaceliftOptions& o) {
    return {{"relaxation", o.relaxation},
            {"max_iters", o.max_iters},
            {"tol", o.tol},
            {"edges", o.edges == EdgeRule::clamp ? "clamp" : "free"}};
}

inline GridSpec grid_spec_from_json(const json& j) {
    const std::string ctx = "grid";
    const json& axes = io::require(j, "axes", ctx);
    if (!axes.is_array() || axes.empty() || axes.size() > static_cast<std::size_t>(kMaxDim))
        throw ArgumentError("grid: axes must list 1 or 2 axes");
    std::vector<Axis> out;
    for (const auto& a : axes) {
        const std::string sp = a.value("spacing", "linear");
        if (sp != "linear" && sp != "log") throw ConfigError("grid: unknown spacing '" + sp + "'");
        out.push_back(SpatialGrid::make_axis(io::number(io::require(a, "lower", ctx), ctx + ".lower"),
                                             io::number(io::require(a, "upper", ctx), ctx + ".upper"),
                                             io::require(a, "nodes", ctx).get<std::size_t>(),
                                             sp == "log" ? Spacing::log : Spacing::linear));
    }
    GridSpec g;
    g.grid = SpatialGrid(std::move(out));
    if (j.contains("scheme")) g.scheme = scheme_from_json(j.at("scheme"));
    if (j.contains("facelift")) g.facelift = facelift_options_from_json(j.at("facelift"));
    return g;
}

inline json to_json(const SpatialGrid& grid) {
    json axes = json::array();
    for (const Axis& a : grid.axes())
        axes.push_back({{"lower", a.physical(0)},
                        {"upper", a.physical(a.size() - 1)},
                        {"nodes", a.size()},
                        {"spacing", a.spacing == Spacing::log ? "log" : "linear"}});
    return {{"axes", axes}};
}

// ---------------------------------------------------------------------------
// Space-time tables: solver output, grid tables and policy tables share one CSV
// layout  [t,] x0[, x1][, value][, u0[, u1]]  with one row per (time, node).

struct SolutionTable {
    std::vector<double> times;
    SpatialGrid grid;
    /// values[n][k]; empty when the table carries controls only.
    std::vector<std::vector<double>> values;
    /// controls[n][k]; empty when the table carries values only.
    std::vector<std::vector<Vec>> controls;

    bool has_values() const { return !values.empty(); }
    bool has_controls() const { return !controls.empty(); }

    /// Linear in time between rows, multilinear in space; constant in time for a single time.
    double value_at(double t, const Vec& x) const {
        if (!has_values()) throw ArgumentError("table has no value column");
        if (times.size() == 1 || t <= times.front()) return grid.interpolate(values.front(), x);
        if (t >= times.back()) return grid.interpolate(values.back(), x);
        std::size_t i = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin()) - 1;
        i = std::min(i, times.size() - 2);
        const double w = (t - times[i]) / (times[i + 1] - times[i]);
        return (1.0 - w) * grid.interpolate(values[i], x) + w * grid.interpolate(values[i + 1], x);
    }

    GridFunction slice(std::size_t n) const { return GridFunction(grid, values.at(n)); }

    /// Control at the nearest node and latest time row <= t, as in extract_policy.
    FeedbackPolicy policy(std::string id) const {
        if (!has_controls()) throw ArgumentError("table has no control columns");
        auto tab = std::make_shared<const SolutionTable>(*this);
        FeedbackPolicy p;
        p.representation = PolicyRepresentation::table;
        p.id = std::move(id);
        for (const auto& row : controls)
            for (const Vec& u : row) p.bound = std::max(p.bound, u.cwiseAbs().maxCoeff());
        const double slack = 1e-12 * std::max(1.0, times.back());
        p.rule = [tab, slack](double t, const Vec& x) -> Vec {
            const auto& ts = tab->times;
            auto it = std::upper_bound(ts.begin(), ts.end(), t + slack);
            std::size_t n = it == ts.begin() ? 0 : static_cast<std::size_t>(it - ts.begin()) - 1;
            n = std::min(n, ts.size() - 1);
            return tab->controls[n][tab->grid.nearest(x)];
        };
        return p;
    }
};

inline SolutionTable tabulate(const SpaceTimeSolution& sol) {
    SolutionTable t;
    t.times = sol.times;
    t.grid = sol.grid();
    for (const auto& s : sol.slices) t.values.push_back(s.values);
    for (const auto& row : sol.policy) {
        std::vector<Vec> us;
        us.reserve(row.size());
        for (auto idx : row) us.push_back(sol.controls[idx]);
        t.controls.push_back(std::move(us));
    }
    return t;
}

inline void write_table_csv(std::ostream& os, const SolutionTable& t) {
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    const int d = t.grid.dim();
    const int k = t.has_controls() ? static_cast<int>(t.controls.front().front().size()) : 0;
    os << 't';
    for (int i = 0; i < d; ++i) os << ",x" << i;
    if (t.has_values()) os << ",value";
    for (int i = 0; i < k; ++i) os << ",u" << i;
    os << '\n';
    for (std::size_t n = 0; n < t.times.size(); ++n)
        for (std::size_t node = 0; node < t.grid.size(); ++node) {
            os << t.times[n];
            const Vec x = t.grid.physical_point(node);
            for (int i = 0; i < d; ++i) os << ',' << x[i];
            if (t.has_values()) os << ',' << t.values[n][node];
            for (int i = 0; i < k; ++i) os << ',' << t.controls[n][node][i];
            os << '\n';
        }
}

inline void write_solution_csv(std::ostream& os, const SpaceTimeSolution& sol) { write_table_csv(os, tabulate(sol)); }

inline SolutionTable read_table_csv(std::istream& is) {
    CsvTable csv = read_csv_table(is);
    const int tcol = csv.column("t");
    std::vector<int> xcols, ucols;
    for (int i = 0; i < kMaxDim; ++i) {
        if (int c = csv.column("x" + std::to_string(i)); c >= 0) xcols.push_back(c);
        if (int c = csv.column("u" + std::to_string(i)); c >= 0) ucols.push_back(c);
    }
    const int vcol = csv.column("value");
    if (xcols.empty() || xcols.front() != (tcol >= 0 ? tcol + 1 : 0))
        throw ArgumentError("csv: expected coordinate columns x0[,x1] after the optional t column");
    if (vcol < 0 && ucols.empty()) throw ArgumentError("csv: need a value column or control columns");
    if (csv.rows.empty()) throw ArgumentError("csv: no rows");
    const int d = static_cast<int>(xcols.size());

    SolutionTable t;
    t.grid = grid_from_columns(csv, xcols.front(), d);
    std::map<double, std::size_t> slot;
    for (const auto& r : csv.rows) slot.emplace(tcol >= 0 ? r[static_cast<std::size_t>(tcol)] : 0.0, 0);
    for (auto& [time, idx] : slot) {
        idx = t.times.size();
        t.times.push_back(time);
    }
    const std::size_t nn = t.grid.size();
    if (csv.rows.size() != nn * t.times.size()) throw ArgumentError("csv: rows do not form a full time x grid table");
    if (vcol >= 0) t.values.assign(t.times.size(), std::vector<double>(nn, std::numeric_limits<double>::quiet_NaN()));
    if (!ucols.empty()) t.controls.assign(t.times.size(), std::vector<Vec>(nn));
    std::vector<char> seen(nn * t.times.size(), 0);
    for (const auto& r : csv.rows) {
        const std::size_t n = slot.at(tcol >= 0 ? r[static_cast<std::size_t>(tcol)] : 0.0);
        Vec x(d);
        for (int i = 0; i < d; ++i) x[i] = r[static_cast<std::size_t>(xcols[static_cast<std::size_t>(i)])];
        const std::size_t k = t.grid.nearest(x);
        if (seen[n * nn + k]++) throw ArgumentError("csv: duplicate (t, x) row");
        if (vcol >= 0) t.values[n][k] = r[static_cast<std::size_t>(vcol)];
        if (!ucols.empty()) {
            Vec u(static_cast<int>(ucols.size()));
            for (std::size_t i = 0; i < ucols.size(); ++i) u[static_cast<int>(i)] = r[static_cast<std::size_t>(ucols[i])];
            t.controls[n][k] = u;
        }
    }
    return t;
}

inline SolutionTable read_table_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    return read_table_csv(in);
}

inline GridFunction read_grid_function_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
    return read_csv(in);
}

/// Points file: header t,x0[,x1].
inline std::vector<std::pair<double, Vec>> read_points_csv(std::istream& is) {
    CsvTable csv = read_csv_table(is);
    const int tcol = csv.column("t");
    if (tcol != 0 || csv.header.size() < 2 || csv.header.size() > 1 + kMaxDim)
        throw ArgumentError("points csv: expected columns t,x0[,x1]");
    std::vector<std::pair<double, Vec>> out;
    const int d = static_cast<int>(csv.header.size()) - 1;
    for (const auto& r : csv.rows) {
        Vec x(d);
        for (int i = 0; i < d; ++i) x[i] = r[static_cast<std::size_t>(i + 1)];
        out.emplace_back(r[0], x);
    }
    if (out.empty()) throw ArgumentError("points csv: no points");
    return out;
}

// ---------------------------------------------------------------------------
// Policies.

inline FeedbackPolicy policy_from_json(const json& j, const ControlProblem& problem,
                                       const std::filesystem::path& base = {}) {
    const std::string type = io::require(j, "type", "policy").get<std::string>();
    FeedbackPolicy p;
    if (type == "constant") {
        p = constant_policy(io::vector_of(io::require(j, "u", "policy"), problem.controls.dim(), "policy.u"));
    } else if (type == "table" || type == "from-solution") {
        const auto path = io::resolve(base, io::require(j, "csv", "policy").get<std::string>());
        SolutionTable t = read_table_file(path);
        if (!t.has_controls()) throw ArgumentError("policy: '" + path.string() + "' has no control columns");
        p = t.policy(type == "table" ? "table" : "hjb-argmax");
    } else if (type == "merton-optimal") {
        MertonParams m;
        const json params = j.value("params", json::object());
        m.mu = io::number_or(params, "mu", m.mu, "policy.params");
        m.sigma = io::number_or(params, "sigma", m.sigma, "policy.params");
        m.p = io::number_or(params, "p", m.p, "policy.params");
        m.bound = io::number_or(params, "B", problem.controls.bound(), "policy.params");
        m.horizon = problem.horizon;
        p = constant_policy(vec1(merton_optimal_control(m)), "merton-optimal");
    } else {
        throw UnsupportedError("policy: unknown type '" + type + "'");
    }
    if (j.contains("id")) p.id = j.at("id").get<std::string>();
    if (p.bound > problem.controls.bound() + 1e-12) throw ArgumentError("policy: bound exceeds the problem's control bound");
    return p;
}

// ---------------------------------------------------------------------------
// Candidates.

/// Sub-candidate from a solver table: the table value before T and the raw
/// payoff at T. Super-candidate: the table value everywhere (its last row is
/// the terminal data the solver used). Growth constant: sup |w|/ψ over nodes
/// with 5% headroom for interpolation.
inline CandidateFunction table_candidate(const SolutionTable& table, const ControlProblem& problem, CandidateKind kind,
                                         std::string name) {
    if (!table.has_values()) throw ArgumentError("candidate table has no value column");
    auto tab = std::make_shared<const SolutionTable>(table);
    CandidateFunction w;
    w.name = std::move(name);
    w.kind = kind;
    const double T = problem.horizon;
    auto payoff = problem.payoff;
    if (kind == CandidateKind::sub)
        w.eval = [tab, payoff, T](double t, const Vec& x) { return t >= T ? payoff(x) : tab->value_at(t, x); };
    else
        w.eval = [tab](double t, const Vec& x) { return tab->value_at(t, x); };
    double c = 0.0;
    for (const auto& row : tab->values)
        for (std::size_t k = 0; k < tab->grid.size(); ++k) {
            const double psi = problem.gauge(tab->grid.physical_point(k));
            if (psi > 0.0) c = std::max(c, std::abs(row[k]) / psi);
        }
    w.growth_constant = 1.05 * c;
    if (tab->has_controls()) w.policies.push_back(tab->policy("hjb-argmax"));
    return w;
}

/// x^p exp((Λ_B + δ)(T - t)) with the constant maximiser as companion.
inline CandidateFunction merton_candidate(const MertonParams& m, double delta, CandidateKind kind, std::string name = {}) {
    const MertonExponent e = merton_lambda(m);
    CandidateFunction w;
    if (name.empty()) {
        std::ostringstream os;
        os << "merton(delta=" << delta << ")";
        name = os.str();
    }
    w.name = std::move(name);
    w.kind = kind;
    const double rate = e.lambda + delta, p = m.p, T = m.horizon;
    w.eval = [rate, p, T](double t, const Vec& x) { return std::pow(x[0], p) * std::exp(rate * (T - t)); };
    w.growth_constant = std::exp(std::max(rate, 0.0) * T) * (1.0 + 1e-9);
    w.policies.push_back(constant_policy(vec1(e.u_star), "merton-optimal"));
    return w;
}

inline CandidateFunction constant_candidate(double c, CandidateKind kind, const ControlProblem& problem, std::string name = {}) {
    CandidateFunction w;
    if (name.empty()) {
        std::ostringstream os;
        os << "constant(" << c << ")";
        name = os.str();
    }
    w.name = std::move(name);
    w.kind = kind;
    w.eval = [c](double, const Vec&) { return c; };
    w.growth_constant = std::numeric_limits<double>::quiet_NaN();
    w.policies.push_back(constant_policy(problem.controls.grid(1).front(), "constant-control"));
    return w;
}

/// Parse a candidate; the growth constant is inferred on the test box when
/// absent and a "policy" entry replaces the default companion.
inline CandidateFunction candidate_from_json(const json& j, const ControlProblem& problem,
                                             const std::filesystem::path& base = {}) {
    const std::string ctx = "candidate";
    const std::string ks = io::require(j, "kind", ctx).get<std::string>();
    if (ks != "sub" && ks != "super") throw ArgumentError("candidate: kind must be sub or super");
    const CandidateKind kind = ks == "sub" ? CandidateKind::sub : CandidateKind::super;
    const std::string type = io::require(j, "type", ctx).get<std::string>();
    const std::string name = j.value("name", "");
    CandidateFunction w;
    if (type == "closed-form") {
        const std::string fam = io::require(j, "family", ctx).get<std::string>();
        const json params = j.value("params", json::object());
        const std::string pctx = ctx + ".params";
        if (fam == "merton") {
            MertonParams m;
            m.mu = io::number_or(params, "mu", m.mu, pctx);
            m.sigma = io::number_or(params, "sigma", m.sigma, pctx);
            m.p = io::number_or(params, "p", m.p, pctx);
            m.bound = io::number_or(params, "B", problem.controls.bound(), pctx);
            m.horizon = io::number_or(params, "T", problem.horizon, pctx);
            w = merton_candidate(m, io::number_or(params, "delta", 0.0, pctx), kind, name);
        } else if (fam == "constant") {
            w = constant_candidate(io::number(io::require(params, "c", pctx), pctx + ".c"), kind, problem, name);
        } else if (fam == "heat") {
            OracleSpec o{"heat", {}};
            for (auto it = params.begin(); it != params.end(); ++it) o.params[it.key()] = io::number(it.value(), pctx);
            if (!o.params.count("T")) o.params["T"] = problem.horizon;
            o.validate();
            w.name = name.empty() ? "heat-closed-form" : name;
            w.kind = kind;
            w.eval = [o](double t, const Vec& x) { return o(t, x); };
            w.policies.push_back(constant_policy(problem.controls.grid(1).front(), "constant-control"));
        } else {
            throw UnsupportedError("candidate: unknown closed-form family '" + fam + "'");
        }
    } else if (type == "constant") {
        w = constant_candidate(io::number(io::require(j, "value", ctx), ctx + ".value"), kind, problem, name);
    } else if (type == "grid-table" || type == "from-solution") {
        const auto path = io::resolve(base, io::require(j, "csv", ctx).get<std::string>());
        SolutionTable t = read_table_file(path);
        w = table_candidate(t, problem, kind, name.empty() ? type + ":" + path.filename().string() : name);
        if (type == "grid-table" && w.policies.empty())
            w.policies.push_back(constant_policy(problem.controls.grid(1).front(), "constant-control"));
    } else {
        throw UnsupportedError("candidate: unknown type '" + type + "'");
    }
    if (j.contains("growth_constant")) w.growth_constant = io::number(j.at("growth_constant"), ctx + ".growth_constant");
    if (j.contains("policy")) w.policies = {policy_from_json(j.at("policy"), problem, base)};
    return w;
}

/// Copy of a spec whose file references are made absolute, so that it can be
/// embedded in a report and reloaded from anywhere.
inline json absolutize(json j, const std::filesystem::path& base) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "csv" && it.value().is_string())
                it.value() = std::filesystem::absolute(io::resolve(base, it.value().get<std::string>())).lexically_normal().string();
            else
                it.value() = absolutize(it.value(), base);
        }
    } else if (j.is_array()) {
        for (auto& e : j) e = absolutize(e, base);
    }
    return j;
}

// ---------------------------------------------------------------------------
// Report serialisation.

inline json to_json(const Box& b) {
    json lo = json::array(), hi = json::array();
    for (int i = 0; i < b.dim(); ++i) {
        lo.push_back(io::bound_json(b.lower[static_cast<std::size_t>(i)]));
        hi.push_back(io::bound_json(b.upper[static_cast<std::size_t>(i)]));
    }
    return {{"lower", lo}, {"upper", hi}};
}

inline json to_json(const TestConfig& c) {
    return {{"test_box", to_json(c.test_box)},
            {"z", c.z},
            {"tol", c.tol},
            {"steps_per_horizon", c.steps_per_horizon},
            {"paths_per_test", c.paths_per_test},
            {"seed", c.seed},
            {"threads", c.threads},
            {"stop_on_first_failure", c.stop_on_first_failure},
            {"start_fractions", c.start_fractions},
            {"ball_fraction", c.ball_fraction},
            {"probe_nodes", c.probe_nodes},
            {"probe_times", c.probe_times}};
}

inline json to_json(const CertificationReport& r) {
    json tests = json::array();
    for (const auto& t : r.tests)
        tests.push_back({{"label", t.label()},
                         {"tau", t.tau},
                         {"stop", to_string(t.stop)},
                         {"rho", t.rho},
                         {"radius", t.radius},
                         {"policy", t.policy_id},
                         {"paths", t.paths},
                         {"margin", t.margin},
                         {"stderr", t.stderr_},
                         {"threshold", t.threshold},
                         {"exit_fraction", t.exit_fraction},
                         {"passed", t.passed},
                         {"skipped", t.skipped}});
    json checks = json::array();
    for (const auto& c : r.checks)
        checks.push_back({{"name", c.name}, {"points", c.points}, {"worst", c.worst}, {"passed", c.passed}});
    json failing = json::array();
    for (const auto* t : r.failing()) failing.push_back(t->label());
    json out{{"candidate", r.candidate},
             {"kind", to_string(r.kind)},
             {"passed", r.passed},
             {"verdict", r.verdict},
             {"failing", failing},
             {"checks", checks},
             {"tests", tests},
             {"config", to_json(r.config)}};
    if (!r.adversary_class.empty()) out["adversary_class"] = r.adversary_class;
    return out;
}

/// Summary fields needed to accept a stored report as evidence.
inline CertificationReport report_summary_from_json(const json& j) {
    CertificationReport r;
    r.candidate = io::require(j, "candidate", "report").get<std::string>();
    const std::string k = io::require(j, "kind", "report").get<std::string>();
    if (k != "sub" && k != "super") throw ArgumentError("report: bad kind '" + k + "'");
    r.kind = k == "sub" ? CandidateKind::sub : CandidateKind::super;
    r.passed = io::require(j, "passed", "report").get<bool>();
    r.verdict = j.value("verdict", "");
    return r;
}

inline json to_json(const BracketReport& r) {
    json pts = json::array();
    for (const auto& p : r.points)
        pts.push_back({{"t", p.t},
                       {"x", io::vec_json(p.x)},
                       {"sub", p.sub},
                       {"super", p.super},
                       {"mc", p.mc},
                       {"half_width", p.half_width},
                       {"joint_half_width", p.joint_half_width},
                       {"exit_fraction", p.exit_fraction},
                       {"best_policy", p.best_policy},
                       {"gap", p.gap},
                       {"relative_gap", p.mc != 0.0 ? p.gap / std::abs(p.mc) : kInf},
                       {"sub_margin", p.sub_margin},
                       {"super_margin", p.super_margin},
                       {"ordered", p.ordered}});
    return {{"sub", r.sub_name}, {"super", r.super_name}, {"passed", r.passed}, {"max_gap", r.max_gap}, {"points", pts}};
}

inline json to_json(const ValueEstimate& e) {
    return {{"mean", e.mean}, {"half_width_95", e.half_width_95}, {"stderr", e.stderr_}, {"exit_fraction", e.exit_fraction}, {"n", e.n}};
}

inline json to_json(const SolveMetadata& m) {
    return {{"substeps", m.substeps},
            {"dt", m.dt},
            {"dt_cfl", m.dt_cfl},
            {"control_points", m.control_points},
            {"boundary_nodes", m.boundary_nodes},
            {"non_monotone_pairs", m.non_monotone_pairs},
            {"terminal", m.terminal_label}};
}

inline json to_json(const ConvergenceReport& r) {
    json levels = json::array();
    for (const auto& l : r.levels)
        levels.push_back({{"space_nodes", l.space_nodes},
                          {"time_nodes", l.time_nodes},
                          {"substeps", l.substeps},
                          {"diff_to_previous", l.diff_to_previous},
                          {"oracle_error", l.oracle_error}});
    return {{"levels", levels}, {"orders", r.orders}};
}

inline json to_json(const FaceliftReport& r) {
    return {{"passed", r.passed()},
            {"dominance_ok", r.dominance_ok},
            {"complementarity_ok", r.complementarity_ok},
            {"minimal", r.minimal},
            {"worst_dominance", r.worst_dominance},
            {"worst_complementarity", r.worst_complementarity},
            {"probes", r.probes},
            {"failing_nodes", r.failing_nodes},
            {"notes", r.notes}};
}

}  // namespace hjbcert
