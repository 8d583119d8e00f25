#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace sae {

/// Type-7 quantile (linear interpolation between order statistics) of
/// already sorted values.
inline double quantile_sorted(const std::vector<double>& x, double p) {
    if (x.empty()) throw std::invalid_argument("quantile of empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
    const double h = (double(x.size()) - 1.0) * p;
    const auto lo = std::size_t(std::floor(h));
    if (lo + 1 >= x.size()) return x.back();
    return x[lo] + (h - double(lo)) * (x[lo + 1] - x[lo]);
}

inline double quantile(std::vector<double> x, double p) {
    std::sort(x.begin(), x.end());
    return quantile_sorted(x, p);
}

/// Posterior summary of one scalar from its draws.
struct Summary {
    double mean = 0.0;
    double median = 0.0;
    double lower = 0.0; // alpha/2 quantile
    double upper = 0.0; // 1 - alpha/2 quantile
    double sd = 0.0;
};

inline Summary summarize(std::vector<double> x, double alpha = 0.10) {
    if (x.empty()) throw std::invalid_argument("summary of empty sample");
    Summary s;
    const double n = double(x.size());
    s.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - s.mean) * (v - s.mean);
    s.sd = x.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    std::sort(x.begin(), x.end());
    s.median = quantile_sorted(x, 0.5);
    s.lower = quantile_sorted(x, alpha / 2.0);
    s.upper = quantile_sorted(x, 1.0 - alpha / 2.0);
    return s;
}

} // namespace sae
