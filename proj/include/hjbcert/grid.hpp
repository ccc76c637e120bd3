#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hjbcert/problem.hpp"

namespace hjbcert {

enum class Spacing { linear, log };

/// One grid axis. Nodes are stored in computational coordinates: the state
/// variable itself for linear axes, its logarithm for log axes.
struct Axis {
    std::vector<double> nodes;
    Spacing spacing = Spacing::linear;
    /// Physical positions of log-axis nodes, kept so that they survive I/O exactly.
    std::vector<double> physical_nodes;

    std::size_t size() const { return nodes.size(); }
    double physical(std::size_t i) const {
        if (spacing == Spacing::linear) return nodes[i];
        return physical_nodes.empty() ? std::exp(nodes[i]) : physical_nodes[i];
    }
    double to_computational(double x) const { return spacing == Spacing::log ? std::log(x) : x; }

    bool uniform(double rel_tol = 1e-9) const {
        if (nodes.size() < 2) return true;
        const double h = (nodes.back() - nodes.front()) / static_cast<double>(nodes.size() - 1);
        for (std::size_t i = 1; i < nodes.size(); ++i)
            if (std::abs(nodes[i] - nodes[i - 1] - h) > rel_tol * std::abs(h)) return false;
        return true;
    }
};

/// Rectangular lattice (d ≤ 2), flat index with the last dimension fastest.
class SpatialGrid {
public:
    SpatialGrid() = default;
    explicit SpatialGrid(std::vector<Axis> axes) : axes_(std::move(axes)) { init(); }

    static SpatialGrid uniform(double lo, double hi, std::size_t n) { return SpatialGrid({make_axis(lo, hi, n, Spacing::linear)}); }
    static SpatialGrid log_uniform(double lo, double hi, std::size_t n) { return SpatialGrid({make_axis(lo, hi, n, Spacing::log)}); }
    static SpatialGrid uniform2(double lo0, double hi0, std::size_t n0, double lo1, double hi1, std::size_t n1) {
        return SpatialGrid({make_axis(lo0, hi0, n0, Spacing::linear), make_axis(lo1, hi1, n1, Spacing::linear)});
    }

    /// Axis whose physical range is [lo, hi]; log axes are uniform in ln x.
    static Axis make_axis(double lo, double hi, std::size_t n, Spacing sp) {
        if (n < 3) throw ArgumentError("grid axes need at least 3 nodes");
        if (!(lo < hi)) throw ArgumentError("grid axis bounds must satisfy lo < hi");
        if (sp == Spacing::log && !(lo > 0.0)) throw ArgumentError("log axis needs a positive lower bound");
        Axis a;
        a.spacing = sp;
        double clo = sp == Spacing::log ? std::log(lo) : lo;
        double chi = sp == Spacing::log ? std::log(hi) : hi;
        a.nodes.resize(n);
        for (std::size_t i = 0; i < n; ++i) a.nodes[i] = clo + (chi - clo) * static_cast<double>(i) / static_cast<double>(n - 1);
        a.nodes.front() = clo;
        a.nodes.back() = chi;
        if (sp == Spacing::log) {
            for (double y : a.nodes) a.physical_nodes.push_back(std::exp(y));
            a.physical_nodes.front() = lo;
            a.physical_nodes.back() = hi;
        }
        return a;
    }

    int dim() const { return static_cast<int>(axes_.size()); }
    const std::vector<Axis>& axes() const { return axes_; }
    const Axis& axis(int i) const { return axes_[static_cast<std::size_t>(i)]; }

    std::size_t size() const {
        std::size_t n = 1;
        for (const auto& a : axes_) n *= a.size();
        return n;
    }

    std::array<std::size_t, kMaxDim> multi_index(std::size_t flat) const {
        std::array<std::size_t, kMaxDim> idx{0, 0};
        for (int d = dim() - 1; d >= 0; --d) {
            idx[static_cast<std::size_t>(d)] = flat % axes_[static_cast<std::size_t>(d)].size();
            flat /= axes_[static_cast<std::size_t>(d)].size();
        }
        return idx;
    }

    std::size_t flat_index(const std::array<std::size_t, kMaxDim>& idx) const {
        std::size_t flat = 0;
        for (int d = 0; d < dim(); ++d) flat = flat * axes_[static_cast<std::size_t>(d)].size() + idx[static_cast<std::size_t>(d)];
        return flat;
    }

    /// Stride of the flat index along dimension d.
    std::size_t stride(int d) const {
        std::size_t s = 1;
        for (int k = dim() - 1; k > d; --k) s *= axes_[static_cast<std::size_t>(k)].size();
        return s;
    }

    Vec computational_point(std::size_t flat) const {
        auto idx = multi_index(flat);
        Vec y(dim());
        for (int d = 0; d < dim(); ++d) y[d] = axes_[static_cast<std::size_t>(d)].nodes[idx[static_cast<std::size_t>(d)]];
        return y;
    }

    Vec physical_point(std::size_t flat) const {
        auto idx = multi_index(flat);
        Vec x(dim());
        for (int d = 0; d < dim(); ++d) x[d] = axes_[static_cast<std::size_t>(d)].physical(idx[static_cast<std::size_t>(d)]);
        return x;
    }

    Vec to_computational(const Vec& x) const {
        Vec y(dim());
        for (int d = 0; d < dim(); ++d) y[d] = axes_[static_cast<std::size_t>(d)].to_computational(x[d]);
        return y;
    }

    bool is_edge(std::size_t flat) const {
        auto idx = multi_index(flat);
        for (int d = 0; d < dim(); ++d) {
            auto i = idx[static_cast<std::size_t>(d)];
            if (i == 0 || i + 1 == axes_[static_cast<std::size_t>(d)].size()) return true;
        }
        return false;
    }

    bool has_log_axis() const {
        return std::any_of(axes_.begin(), axes_.end(), [](const Axis& a) { return a.spacing == Spacing::log; });
    }

    std::vector<bool> log_mask() const {
        std::vector<bool> m;
        for (const auto& a : axes_) m.push_back(a.spacing == Spacing::log);
        return m;
    }

    /// Physical truncation box.
    Box truncation_box() const {
        Box b;
        for (std::size_t i = 0; i < axes_.size(); ++i) {
            b.lower.push_back(axes_[i].physical(0));
            b.upper.push_back(axes_[i].physical(axes_[i].size() - 1));
        }
        return b;
    }

    /// Central fraction of the box (in computational coordinates) used for comparisons.
    bool in_trust_region(std::size_t flat, double fraction = 0.6) const {
        Vec y = computational_point(flat);
        for (int d = 0; d < dim(); ++d) {
            const auto& n = axes_[static_cast<std::size_t>(d)].nodes;
            double mid = 0.5 * (n.front() + n.back());
            double half = 0.5 * fraction * (n.back() - n.front());
            if (std::abs(y[d] - mid) > half * (1.0 + 1e-12)) return false;
        }
        return true;
    }

    /// Throws unless the truncation box lies inside the open domain of `problem`
    /// (domain given in physical coordinates).
    void check_inside(const Box& physical_domain) const {
        if (physical_domain.dim() != dim()) throw ArgumentError("grid and domain dimensions differ");
        Box tb = truncation_box();
        for (int d = 0; d < dim(); ++d) {
            bool lo_ok = tb.lower[static_cast<std::size_t>(d)] > physical_domain.lower[static_cast<std::size_t>(d)];
            bool hi_ok = tb.upper[static_cast<std::size_t>(d)] < physical_domain.upper[static_cast<std::size_t>(d)];
            if (!lo_ok || !hi_ok) throw ArgumentError("grid truncation box is not strictly inside the state domain");
        }
    }

    /// Multilinear interpolation in computational coordinates, clamped to the box.
    double interpolate(const std::vector<double>& values, const Vec& x_physical) const {
        Vec y = to_computational(x_physical);
        std::array<std::size_t, kMaxDim> lo{0, 0};
        std::array<double, kMaxDim> w{0.0, 0.0};
        for (int d = 0; d < dim(); ++d) {
            locate(d, y[d], lo[static_cast<std::size_t>(d)], w[static_cast<std::size_t>(d)]);
        }
        if (dim() == 1) {
            std::size_t i = lo[0];
            return (1.0 - w[0]) * values[i] + w[0] * values[i + 1];
        }
        const std::size_t s0 = stride(0);
        std::size_t base = flat_index(lo);
        double v00 = values[base], v01 = values[base + 1], v10 = values[base + s0], v11 = values[base + s0 + 1];
        return (1.0 - w[0]) * ((1.0 - w[1]) * v00 + w[1] * v01) + w[0] * ((1.0 - w[1]) * v10 + w[1] * v11);
    }

    /// Index of the nearest node (computational distance), clamped to the box.
    std::size_t nearest(const Vec& x_physical) const {
        Vec y = to_computational(x_physical);
        std::array<std::size_t, kMaxDim> idx{0, 0};
        for (int d = 0; d < dim(); ++d) {
            std::size_t lo;
            double w;
            locate(d, y[d], lo, w);
            idx[static_cast<std::size_t>(d)] = w > 0.5 ? lo + 1 : lo;
        }
        return flat_index(idx);
    }

    bool operator==(const SpatialGrid& o) const {
        if (dim() != o.dim()) return false;
        for (int d = 0; d < dim(); ++d) {
            const auto& a = axes_[static_cast<std::size_t>(d)];
            const auto& b = o.axes_[static_cast<std::size_t>(d)];
            if (a.spacing != b.spacing || a.nodes != b.nodes) return false;
        }
        return true;
    }

private:
    void init() {
        if (axes_.empty() || static_cast<int>(axes_.size()) > kMaxDim) throw ArgumentError("grid must be 1-D or 2-D");
        for (const auto& a : axes_) {
            if (a.size() < 3) throw ArgumentError("grid axes need at least 3 nodes");
            for (std::size_t i = 1; i < a.size(); ++i)
                if (!(a.nodes[i] > a.nodes[i - 1])) throw ArgumentError("grid nodes must be strictly increasing");
            if (!a.physical_nodes.empty() && a.physical_nodes.size() != a.size())
                throw ArgumentError("grid axis physical nodes have the wrong length");
            uniform_step_.push_back(a.uniform() ? (a.nodes.back() - a.nodes.front()) / static_cast<double>(a.size() - 1) : 0.0);
        }
    }

    void locate(int d, double y, std::size_t& lo, double& w) const {
        const auto& n = axes_[static_cast<std::size_t>(d)].nodes;
        if (y <= n.front()) {
            lo = 0;
            w = 0.0;
            return;
        }
        if (y >= n.back()) {
            lo = n.size() - 2;
            w = 1.0;
            return;
        }
        std::size_t i;
        if (const double h = uniform_step_[static_cast<std::size_t>(d)]; h > 0.0) {
            i = std::min(static_cast<std::size_t>((y - n.front()) / h), n.size() - 2);
            while (i > 0 && n[i] > y) --i;
            while (i + 2 < n.size() && n[i + 1] <= y) ++i;
        } else {
            i = static_cast<std::size_t>(std::upper_bound(n.begin(), n.end(), y) - n.begin()) - 1;
            i = std::min(i, n.size() - 2);
        }
        lo = i;
        w = (y - n[i]) / (n[i + 1] - n[i]);
    }

    std::vector<Axis> axes_;
    std::vector<double> uniform_step_;
};

/// Values of a scalar function at every node of a grid.
struct GridFunction {
    SpatialGrid grid;
    std::vector<double> values;

    GridFunction() = default;
    GridFunction(SpatialGrid g, std::vector<double> v) : grid(std::move(g)), values(std::move(v)) {
        if (values.size() != grid.size()) throw ArgumentError("grid function size does not match grid");
    }

    /// Sample f at the physical node positions.
    static GridFunction sample(const SpatialGrid& grid, const std::function<double(const Vec&)>& f) {
        std::vector<double> v(grid.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(grid.physical_point(i));
        return GridFunction(grid, std::move(v));
    }

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    double at(const Vec& x_physical) const { return grid.interpolate(values, x_physical); }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }
};

inline double sup_distance(const GridFunction& a, const GridFunction& b) {
    if (!(a.grid == b.grid)) throw ArgumentError("sup_distance: grids differ");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// CSV: one row per node, physical coordinates then value. Full precision so
// that a write/read round trip is exact.

inline void write_csv(std::ostream& os, const GridFunction& f) {
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (int d = 0; d < f.grid.dim(); ++d) os << 'x' << d << ',';
    os << "value\n";
    for (std::size_t i = 0; i < f.size(); ++i) {
        Vec x = f.grid.physical_point(i);
        for (int d = 0; d < x.size(); ++d) os << x[d] << ',';
        os << f[i] << '\n';
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        return v;
    } catch (const std::exception&) {
        throw ArgumentError("csv: cannot parse number '" + s + "'");
    }
}

/// Rebuild an axis from distinct physical coordinates, recognising log-uniform spacing.
inline Axis axis_from_coordinates(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    Axis lin;
    lin.nodes = xs;
    lin.spacing = Spacing::linear;
    if (xs.size() < 3 || lin.uniform(1e-9) || xs.front() <= 0.0) return lin;
    Axis lg;
    lg.spacing = Spacing::log;
    for (double x : xs) lg.nodes.push_back(std::log(x));
    lg.physical_nodes = xs;
    if (lg.uniform(1e-9)) return lg;
    return lin;
}

}  // namespace detail

/// Parsed numeric CSV with a header row.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline CsvTable read_csv_table(std::istream& is) {
    CsvTable t;
    std::string line;
    if (!std::getline(is, line)) throw ArgumentError("csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    t.header = detail::split_csv_line(line);
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != t.header.size()) throw ArgumentError("csv: row width does not match header");
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) row.push_back(detail::parse_double(c));
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Build a grid from coordinate columns [first, first + dim) of a table.
inline SpatialGrid grid_from_columns(const CsvTable& t, int first, int dim) {
    std::vector<Axis> axes;
    for (int d = 0; d < dim; ++d) {
        std::vector<double> xs;
        for (const auto& r : t.rows) xs.push_back(r[static_cast<std::size_t>(first + d)]);
        axes.push_back(detail::axis_from_coordinates(std::move(xs)));
    }
    return SpatialGrid(std::move(axes));
}

inline GridFunction read_csv(std::istream& is) {
    CsvTable t = read_csv_table(is);
    const int dim = static_cast<int>(t.header.size()) - 1;
    if (dim < 1 || dim > kMaxDim || t.header.back() != "value") throw ArgumentError("csv: expected columns x0[,x1],value");
    SpatialGrid grid = grid_from_columns(t, 0, dim);
    if (t.rows.size() != grid.size()) throw ArgumentError("csv: rows do not form a full rectangular grid");
    std::vector<double> values(grid.size());
    std::vector<bool> seen(grid.size(), false);
    for (const auto& r : t.rows) {
        Vec x(dim);
        for (int d = 0; d < dim; ++d) x[d] = r[static_cast<std::size_t>(d)];
        std::size_t k = grid.nearest(x);
        values[k] = r.back();
        seen[k] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) throw ArgumentError("csv: missing grid nodes");
    return GridFunction(std::move(grid), std::move(values));
}

}  // namespace hjbcert
