#pragma once

#include "codesign/ising.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace codesign::test {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline IsingModel random_model(std::mt19937_64& rng, std::size_t n, double field = 0.5, double coupling = 0.5) {
    std::normal_distribution<double> g(0.0, 1.0);
    IsingModel m(n);
    for (std::size_t j = 0; j < n; ++j) {
        m.set(j, j, field * g(rng));
        for (std::size_t k = j + 1; k < n; ++k) m.set(j, k, coupling * g(rng));
    }
    return m;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
    return 0.5 * tv;
}

}  // namespace codesign::test
