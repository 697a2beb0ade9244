#ifndef GIMVI_TEST_SUPPORT_HPP
#define GIMVI_TEST_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing {

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-5) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

struct Moments {
    double mean = 0;
    double var = 0;
    double mean_se = 0;
    double var_se = 0;
};

// Sample mean and variance with standard errors from the fourth central moment.
inline Moments moments(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    Moments m;
    for (double x : xs) {
        m.mean += x;
    }
    m.mean /= n;
    double m2 = 0, m4 = 0;
    for (double x : xs) {
        const double d = x - m.mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    m.var = m2 * n / (n - 1);
    m.mean_se = std::sqrt(m2 / n);
    m.var_se = std::sqrt(std::max(m4 - m2 * m2, 0.0) / n);
    return m;
}

}

#endif
