#pragma once

// Shared helpers for the unit tests: seeded random vectors and a central
// finite-difference Jacobian used as the independent differentiation oracle.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "sublim/model.hpp"

namespace sublim::testing {

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                         double hi = 1.0) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(gen);
    return v;
}

inline std::vector<double> random_normal(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = g(gen);
    return v;
}

/// Central difference of all logits along direction `dir`.
inline std::vector<double> fd_directional(const Model& model, std::span<const double> input,
                                          std::span<const double> params,
                                          std::span<const double> dir, double h) {
    std::vector<double> plus(params.begin(), params.end()), minus = plus;
    for (std::size_t k = 0; k < plus.size(); ++k) {
        plus[k] += h * dir[k];
        minus[k] -= h * dir[k];
    }
    const auto zp = model.logits(input, plus);
    const auto zm = model.logits(input, minus);
    std::vector<double> d(zp.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (zp[i] - zm[i]) / (2 * h);
    return d;
}

/// Central-difference gradient of logits[i] with respect to every parameter.
inline std::vector<double> fd_logit_gradient(const Model& model, std::span<const double> input,
                                             std::span<const double> params, std::size_t i,
                                             double h) {
    std::vector<double> g(params.size());
    std::vector<double> q(params.begin(), params.end());
    for (std::size_t k = 0; k < q.size(); ++k) {
        const double keep = q[k];
        q[k] = keep + h;
        const double zp = model.logits(input, q)[i];
        q[k] = keep - h;
        const double zm = model.logits(input, q)[i];
        q[k] = keep;
        g[k] = (zp - zm) / (2 * h);
    }
    return g;
}

inline double rel_error(std::span<const double> got, std::span<const double> want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num += (got[i] - want[i]) * (got[i] - want[i]);
        den += want[i] * want[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace sublim::testing
