#pragma once

#include <Eigen/Core>

namespace hjbcert {

/// State, control and noise dimensions are capped at two.
inline constexpr int kMaxDim = 2;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDim, kMaxDim>;

inline Vec vec1(double a) {
    Vec v(1);
    v << a;
    return v;
}

inline Vec vec2(double a, double b) {
    Vec v(2);
    v << a, b;
    return v;
}

inline Mat mat1(double a) {
    Mat m(1, 1);
    m << a;
    return m;
}

}  // namespace hjbcert
