#pragma once

#include <Eigen/Dense>

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace sae::pc {

/// Log density of the PC prior on a standard deviation, Pr(sigma > u) = alpha,
/// expressed on log(sigma).
inline double log_density_log_sd(double log_sigma, double u, double alpha) {
    const double lambda = -std::log(alpha) / u;
    return std::log(lambda) - lambda * std::exp(log_sigma) + log_sigma;
}

/// Exponential prior on 1/phi with Pr(1/phi > u) = alpha, expressed on log(phi).
inline double log_density_log_phi(double log_phi, double u, double alpha) {
    const double lambda = -std::log(alpha) / u;
    const double tau = std::exp(-log_phi);
    return std::log(lambda) - lambda * tau + std::log(tau);
}

/// PC prior on the BYM2 mixing proportion. The distance from the
/// unstructured base model is d(k) = sqrt(2 KLD(k)), computed from the
/// non-zero eigenvalues of the scaled ICAR generalized inverse. d(1) is
/// finite, so the exponential on d is truncated at d(1) and renormalized.
class MixingPrior {
public:
    MixingPrior() = default;
    /// Pr(kappa > u) = alpha under the truncated prior.
    MixingPrior(Eigen::VectorXd inverse_eigenvalues, double u, double alpha)
        : gm1_(inverse_eigenvalues.array() - 1.0) {
        if (!(u > 0.0 && u < 1.0) || !(alpha > 0.0 && alpha < 1.0))
            throw std::invalid_argument("mixing prior needs u, alpha in (0, 1)");
        du_max_ = distance(1.0);
        const double du = distance(u);
        if (!(du_max_ > 0.0)) return;
        // The tail mass decreases from (d1 - du) / d1 at lambda -> 0 to 0.
        if (alpha >= (du_max_ - du) / du_max_) {
            lambda_ = 1e-8;
            return;
        }
        auto tail = [&](double l) {
            return std::expm1(-l * du_max_) == 0.0
                       ? 0.0
                       : (std::exp(-l * du) - std::exp(-l * du_max_)) / -std::expm1(-l * du_max_) - alpha;
        };
        double hi = -std::log(alpha) / du;
        while (tail(hi) > 0.0) hi *= 2.0;
        std::uintmax_t it = 200;
        auto r = boost::math::tools::toms748_solve(tail, 1e-12, hi, boost::math::tools::eps_tolerance<double>(50), it);
        lambda_ = 0.5 * (r.first + r.second);
    }

    double distance(double kappa) const {
        const double kld2 = kappa * gm1_.sum() - (1.0 + kappa * gm1_.array()).log().sum();
        return std::sqrt(std::max(kld2, 0.0));
    }

    double lambda() const { return lambda_; }

    /// Log density on logit(kappa).
    double log_density_logit(double logit_kappa) const {
        const double kappa = 1.0 / (1.0 + std::exp(-logit_kappa));
        const double jac = std::log(kappa * (1.0 - kappa));
        if (gm1_.size() == 0 || !(du_max_ > 0.0)) return jac; // uniform when no structure
        const double log_norm = std::log(-std::expm1(-lambda_ * du_max_));
        const double d = distance(kappa);
        const double s = (kappa * gm1_.array().square() / (1.0 + kappa * gm1_.array())).sum();
        if (!(d > 0.0) || !(s > 0.0)) return std::log(lambda_) + jac - log_norm;
        const double dprime = s / (2.0 * d);
        return std::log(lambda_) - lambda_ * d + std::log(dprime) + jac - log_norm;
    }

    /// Pr(kappa <= k) under the prior.
    double cdf(double kappa) const {
        if (gm1_.size() == 0 || !(du_max_ > 0.0)) return kappa;
        return std::expm1(-lambda_ * distance(kappa)) / std::expm1(-lambda_ * du_max_);
    }

private:
    Eigen::ArrayXd gm1_;
    double lambda_ = 1.0;
    double du_max_ = 0.0;
};

} // namespace sae::pc
