#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace sae {

enum class Link { log, logit, identity };

inline std::string to_string(Link l) {
    switch (l) {
    case Link::log: return "log";
    case Link::logit: return "logit";
    case Link::identity: return "identity";
    }
    return "?";
}

inline Link parse_link(const std::string& s) {
    if (s == "log") return Link::log;
    if (s == "logit") return Link::logit;
    if (s == "identity") return Link::identity;
    throw std::invalid_argument("unknown link '" + s + "'");
}

inline double expit(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// g: natural scale to predictor scale.
inline double link_fn(Link l, double mu) {
    switch (l) {
    case Link::log: return std::log(mu);
    case Link::logit: return logit(mu);
    case Link::identity: return mu;
    }
    return mu;
}

/// g^{-1}: predictor scale to natural scale.
inline double inverse_link(Link l, double eta) {
    switch (l) {
    case Link::log: return std::exp(eta);
    case Link::logit: return expit(eta);
    case Link::identity: return eta;
    }
    return eta;
}

/// dg/dmu at mu.
inline double link_derivative(Link l, double mu) {
    switch (l) {
    case Link::log: return 1.0 / mu;
    case Link::logit: return 1.0 / (mu * (1.0 - mu));
    case Link::identity: return 1.0;
    }
    return 1.0;
}

} // namespace sae
