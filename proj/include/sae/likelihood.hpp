#pragma once

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sae/link.hpp"
#include "sae/model.hpp"

namespace sae {

/// Log-likelihood of one observation and its first two derivatives with
/// respect to the observation predictor.
struct LikTerms {
    double value = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

namespace detail {

inline bool small_integer(double y) { return y >= 0.0 && y <= 1e4 && y == std::floor(y); }

/// lgamma(a + y) - lgamma(a), exact summation for small integer y.
inline double lgamma_diff(double a, double y) {
    if (small_integer(y)) {
        double s = 0.0;
        for (int k = 0; k < int(y); ++k) s += std::log(a + k);
        return s;
    }
    return std::lgamma(a + y) - std::lgamma(a);
}

/// digamma(a + y) - digamma(a).
inline double digamma_diff(double a, double y) {
    if (small_integer(y)) {
        double s = 0.0;
        for (int k = 0; k < int(y); ++k) s += 1.0 / (a + k);
        return s;
    }
    return boost::math::digamma(a + y) - boost::math::digamma(a);
}

/// trigamma(a + y) - trigamma(a).
inline double trigamma_diff(double a, double y) {
    if (small_integer(y)) {
        double s = 0.0;
        for (int k = 0; k < int(y); ++k) s -= 1.0 / ((a + k) * (a + k));
        return s;
    }
    return boost::math::trigamma(a + y) - boost::math::trigamma(a);
}

inline double log_choose(double n, double k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

/// log(expit(x)) without overflow.
inline double log_expit(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

} // namespace detail

/// phi is the overdispersion parameter: negative binomial variance
/// m(1 + m/phi); beta-binomial intra-class correlation 1/(1 + phi).
inline LikTerms log_likelihood(Family fam, const Observation& o, double eta, double phi) {
    LikTerms t;
    const double y = o.y;
    switch (fam) {
    case Family::gaussian: {
        const double r = y - eta;
        t.value = -0.5 * std::log(2.0 * std::numbers::pi * o.variance) - 0.5 * r * r / o.variance;
        t.d1 = r / o.variance;
        t.d2 = -1.0 / o.variance;
        break;
    }
    case Family::poisson: {
        const double m = o.exposure * std::exp(eta);
        t.value = y * (std::log(o.exposure) + eta) - m - std::lgamma(y + 1.0);
        t.d1 = y - m;
        t.d2 = -m;
        break;
    }
    case Family::binomial: {
        const double n = o.exposure;
        const double p = expit(eta);
        t.value = detail::log_choose(n, y) + y * detail::log_expit(eta) + (n - y) * detail::log_expit(-eta);
        t.d1 = y - n * p;
        t.d2 = -n * p * (1.0 - p);
        break;
    }
    case Family::negative_binomial: {
        const double m = o.exposure * std::exp(eta);
        const double lm = std::log(o.exposure) + eta;
        t.value = detail::lgamma_diff(phi, y) - std::lgamma(y + 1.0) - phi * std::log1p(m / phi) +
                  y * (lm - std::log(m + phi));
        t.d1 = phi * (y - m) / (m + phi);
        t.d2 = -(y + phi) * m * phi / ((m + phi) * (m + phi));
        break;
    }
    case Family::beta_binomial: {
        const double n = o.exposure;
        const double mu = std::clamp(expit(eta), kLogitClamp, 1.0 - kLogitClamp);
        const double a = mu * phi, b = (1.0 - mu) * phi;
        t.value = detail::log_choose(n, y) + detail::lgamma_diff(a, y) + detail::lgamma_diff(b, n - y) -
                  detail::lgamma_diff(phi, n);
        const double l1 = phi * (detail::digamma_diff(a, y) - detail::digamma_diff(b, n - y));
        const double l2 = phi * phi * (detail::trigamma_diff(a, y) + detail::trigamma_diff(b, n - y));
        const double m1 = mu * (1.0 - mu);
        const double m2 = m1 * (1.0 - 2.0 * mu);
        t.d1 = l1 * m1;
        t.d2 = l2 * m1 * m1 + l1 * m2;
        break;
    }
    }
    return t;
}

/// Natural-scale mean of the observation implied by predictor eta (before
/// exposure), used for simulation checks and initial values.
inline double observation_mean(Family fam, const Observation& o, double eta, Link link) {
    switch (fam) {
    case Family::gaussian: return eta;
    case Family::poisson:
    case Family::negative_binomial: return o.exposure * inverse_link(link, eta);
    case Family::binomial:
    case Family::beta_binomial: return o.exposure * inverse_link(link, eta);
    }
    return eta;
}

} // namespace sae
