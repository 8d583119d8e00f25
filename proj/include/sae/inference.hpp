#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/likelihood.hpp"
#include "sae/link.hpp"
#include "sae/model.hpp"
#include "sae/nelder_mead.hpp"
#include "sae/priors.hpp"
#include "sae/quantile.hpp"
#include "sae/rng.hpp"

namespace sae {

/// First-order expansion of the observation predictors around cell
/// predictors eta0: eta-bar = eta-tilde(eta0) + D (A(theta) u - eta0).
/// Holding eta0 (not u0) fixed lets theta vary without re-linearizing.
struct Linearization {
    Eigen::VectorXd cell_eta0;
    Eigen::VectorXd eta_tilde0;
    SpMat jac; // D: observations x cells
};

inline Linearization linearize(const ModelSpec& spec, const Eigen::VectorXd& cell_eta0) {
    Linearization lin;
    lin.cell_eta0 = cell_eta0;
    lin.eta_tilde0 = predictor_eval(spec, cell_eta0);
    lin.jac = aggregation_jacobian(spec, cell_eta0);
    return lin;
}

/// Constrained Gaussian approximation to p(u | y, theta).
struct GaussianApprox {
    Eigen::VectorXd mode;
    SpMat precision;   // Q + B'WB (without the constraint penalty)
    SpMat constraints; // C
    Eigen::VectorXd u0;
    Eigen::VectorXd offset; // eta-tilde(u0) - B u0
    SpMat B;
    HyperParams hyper;
    double log_lik = 0.0;
    double log_prior = 0.0; // -0.5 m'Qm
    double log_det = 0.0;   // log det of the precision restricted to {Cu = 0}
    double ridge = 0.0;
    int iterations = 0;
    double grad_norm = 0.0;

    std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> factor; // of Q + B'WB + C'C + ridge I
    Eigen::MatrixXd kriging_v;                           // factor^{-1} C'
    Eigen::LLT<Eigen::MatrixXd> kriging_s;               // C factor^{-1} C'

    /// Laplace approximation of log p(y | theta) up to theta-free constants.
    double laplace() const { return log_lik + log_prior - 0.5 * log_det; }

    /// x - V S^{-1} C x: conditions a vector on the sum-to-zero constraints.
    Eigen::VectorXd krige(const Eigen::VectorXd& x) const {
        if (constraints.rows() == 0) return x;
        Eigen::VectorXd cx = constraints * x;
        return x - kriging_v * kriging_s.solve(cx);
    }

    /// Dense constrained posterior covariance; small problems only.
    Eigen::MatrixXd covariance() const {
        const Eigen::Index n = mode.size();
        Eigen::MatrixXd inv = factor->solve(Eigen::MatrixXd::Identity(n, n));
        if (constraints.rows() > 0) inv -= kriging_v * kriging_s.solve(kriging_v.transpose());
        return inv;
    }
};

struct NewtonOptions {
    double grad_tol = 1e-8;
    int max_iterations = 100;
};

namespace detail {

inline SpMat constraint_gram(const SpMat& c) {
    SpMat g = SpMat(c.transpose()) * c;
    return g;
}

/// Projects u onto {Cu = 0}; CC' is diagonal because components are disjoint.
inline Eigen::VectorXd project_feasible(const SpMat& c, const Eigen::VectorXd& u) {
    if (c.rows() == 0) return u;
    Eigen::MatrixXd cct = Eigen::MatrixXd(c * SpMat(c.transpose()));
    Eigen::VectorXd lam = cct.ldlt().solve(c * u);
    return u - SpMat(c.transpose()) * lam;
}

struct LikEval {
    double value = 0.0;
    Eigen::VectorXd d1, w;
};

inline LikEval likelihood_terms(const ModelSpec& spec, const Eigen::VectorXd& eta, double phi, bool derivs) {
    LikEval out;
    const Eigen::Index n = eta.size();
    if (derivs) {
        out.d1.resize(n);
        out.w.resize(n);
    }
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto t = log_likelihood(spec.family, spec.observations[std::size_t(r)], eta(r), phi);
        out.value += t.value;
        if (derivs) {
            out.d1(r) = t.d1;
            out.w(r) = std::max(-t.d2, 0.0);
        }
    }
    return out;
}

/// Sum of log pivots of an LDLT; throws when any pivot is not positive.
inline double ldlt_logdet(const Eigen::SimplicialLDLT<SpMat>& f) {
    const Eigen::VectorXd& d = f.vectorD();
    double s = 0.0;
    for (Eigen::Index k = 0; k < d.size(); ++k) {
        if (!(d(k) > 0.0) || !std::isfinite(d(k))) throw NumericError("precision matrix is not positive definite");
        s += std::log(d(k));
    }
    return s;
}

/// Factorizes H + ridge I, escalating the ridge 0 -> 1e-8 -> 1e-6.
inline std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> factor_with_ridge(const SpMat& h, double& ridge,
                                                                       double& log_det) {
    static constexpr double ridges[] = {0.0, 1e-8, 1e-6};
    for (double r : ridges) {
        auto f = std::make_shared<Eigen::SimplicialLDLT<SpMat>>();
        if (r > 0.0) {
            SpMat eye(h.rows(), h.cols());
            eye.setIdentity();
            f->compute(h + r * eye);
        } else {
            f->compute(h);
        }
        if (f->info() != Eigen::Success) continue;
        try {
            log_det = ldlt_logdet(*f);
        } catch (const NumericError&) {
            continue;
        }
        ridge = r;
        return f;
    }
    throw NumericError("precision matrix not positive definite after ridge escalation");
}

} // namespace detail

/// Conditional mode of the latent field under the linearized predictor, by
/// constrained Newton iterations with backtracking, and the Gaussian
/// approximation at the mode.
inline GaussianApprox latent_mode(const ModelSpec& spec, const Design& design, const HyperParams& th,
                                  const Linearization& lin, const Eigen::VectorXd& start,
                                  const NewtonOptions& opt = {}) {
    const SpMat a = design_matrix(design, th);
    SpMat b = lin.jac * a;
    b.makeCompressed();
    const SpMat bt = b.transpose();
    const SpMat& q = design.prior_precision;
    const SpMat& c = design.constraints;
    const SpMat ctc = detail::constraint_gram(c);
    const Eigen::VectorXd base = lin.eta_tilde0 - lin.jac * lin.cell_eta0;
    const double phi = th.phi;

    auto objective = [&](const Eigen::VectorXd& u, bool derivs, detail::LikEval& le) {
        le = detail::likelihood_terms(spec, base + b * u, phi, derivs);
        return le.value - 0.5 * u.dot(q * u);
    };
    auto hessian = [&](const Eigen::VectorXd& w) {
        SpMat h = q + bt * (w.asDiagonal() * b) + ctc;
        return h;
    };

    GaussianApprox g;
    g.hyper = th;
    g.constraints = c;
    Eigen::VectorXd u = detail::project_feasible(c, start);
    detail::LikEval le;
    double f = objective(u, true, le);
    if (!std::isfinite(f)) {
        u = detail::project_feasible(c, Eigen::VectorXd::Zero(start.size()));
        f = objective(u, true, le);
        if (!std::isfinite(f)) throw NumericError("non-finite log posterior at the starting point");
    }
    bool converged = false;
    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        Eigen::VectorXd grad = bt * le.d1 - q * u;
        const Eigen::VectorXd gproj = detail::project_feasible(c, grad);
        g.grad_norm = gproj.norm();
        if (g.grad_norm < opt.grad_tol) {
            converged = true;
            break;
        }
        double ridge = 0.0, ld = 0.0;
        auto fac = detail::factor_with_ridge(hessian(le.w), ridge, ld);
        Eigen::VectorXd step = fac->solve(grad);
        if (c.rows() > 0) {
            Eigen::MatrixXd v = fac->solve(Eigen::MatrixXd(SpMat(c.transpose())));
            Eigen::MatrixXd s = c * v;
            step -= v * s.llt().solve(c * step);
        }
        double t = 1.0;
        Eigen::VectorXd un;
        detail::LikEval len;
        double fn = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < 40; ++k, t *= 0.5) {
            un = u + t * step;
            fn = objective(un, true, len);
            if (std::isfinite(fn) && fn >= f - 1e-12 * std::abs(f)) break;
        }
        if (!std::isfinite(fn) || fn < f - 1e-12 * std::abs(f)) {
            // no ascent along the Newton direction: accept as stationary when close
            converged = g.grad_norm < 1e-4 * std::max(1.0, std::abs(f));
            break;
        }
        const double move = (t * step).cwiseAbs().maxCoeff();
        const double gain = fn - f;
        u = un;
        f = fn;
        le = std::move(len);
        if (move < 1e-12 * (1.0 + u.cwiseAbs().maxCoeff()) || (gain <= 1e-14 * std::max(1.0, std::abs(f)) && move < 1e-9)) {
            converged = true;
            ++it;
            break;
        }
    }
    if (!converged) throw ConvergenceError("latent mode search did not converge in " + std::to_string(it) + " iterations");

    g.mode = u;
    g.iterations = it;
    g.u0 = Eigen::VectorXd();
    g.B = b;
    g.offset = base;
    g.log_lik = le.value;
    g.log_prior = -0.5 * u.dot(q * u);
    g.precision = q + bt * (le.w.asDiagonal() * b);
    double ld = 0.0;
    g.factor = detail::factor_with_ridge(hessian(le.w), g.ridge, ld);
    g.log_det = ld;
    if (c.rows() > 0) {
        g.kriging_v = g.factor->solve(Eigen::MatrixXd(SpMat(c.transpose())));
        Eigen::MatrixXd s = c * g.kriging_v;
        g.kriging_s.compute(s);
        const Eigen::MatrixXd cct = Eigen::MatrixXd(c * SpMat(c.transpose()));
        g.log_det += 2.0 * Eigen::MatrixXd(g.kriging_s.matrixL()).diagonal().array().log().sum() -
                     std::log(cct.determinant());
    }
    return g;
}

/// Mode and approximation linearized at u0.
inline GaussianApprox latent_mode(const ModelSpec& spec, const Design& design, const HyperParams& th,
                                  const Eigen::VectorXd& u0, const NewtonOptions& opt = {}) {
    auto lin = linearize(spec, cell_predictors(design, th, u0));
    auto g = latent_mode(spec, design, th, lin, u0, opt);
    g.u0 = u0;
    g.offset = lin.eta_tilde0 - g.B * u0;
    return g;
}

struct FixedPointOptions {
    double tol = 1e-6;
    int max_iterations = 50;
    int max_halvings = 5;
};

struct FixedPointResult {
    GaussianApprox approx;
    int iterations = 0;
    int halvings = 0;
    std::vector<double> trajectory; // max |mode - u0| per outer iteration
};

/// Alternates linearization at u0 and latent-mode search until the
/// linearization point stops moving. Linear predictors finish in one pass.
inline FixedPointResult fixed_point_iterate(const ModelSpec& spec, const Design& design, const HyperParams& th,
                                            const Eigen::VectorXd& u_init, const FixedPointOptions& opt = {}) {
    FixedPointResult res;
    const bool nonlinear = has_nonlinear_rows(spec);
    Eigen::VectorXd u0 = detail::project_feasible(design.constraints, u_init);
    std::optional<Eigen::VectorXd> prev;
    double damping = 1.0;
    for (int t = 1; t <= opt.max_iterations; ++t) {
        res.approx = latent_mode(spec, design, th, u0);
        res.iterations = t;
        const double diff = (res.approx.mode - u0).cwiseAbs().maxCoeff();
        res.trajectory.push_back(diff);
        if (!nonlinear || diff < opt.tol) return res;
        // period-2 cycle: the new mode lands back near the previous point
        if (prev && (res.approx.mode - *prev).cwiseAbs().maxCoeff() < 0.5 * diff && res.halvings < opt.max_halvings) {
            damping *= 0.5;
            ++res.halvings;
        }
        prev = u0;
        u0 = u0 + damping * (res.approx.mode - u0);
    }
    throw ConvergenceError("fixed-point iteration did not converge in " + std::to_string(opt.max_iterations) +
                           " outer iterations (last change " + std::to_string(res.trajectory.back()) + ")");
}

/// Free hyperparameters in unconstrained coordinates.
enum class HyperCoord { log_sigma_b, logit_kappa, log_phi, log_group_sd };

struct HyperSpace {
    std::vector<std::pair<HyperCoord, std::size_t>> coords;
    pc::MixingPrior kappa_prior;

    std::size_t size() const { return coords.size(); }

    Eigen::VectorXd to_vector(const HyperParams& th) const {
        Eigen::VectorXd x(Eigen::Index(coords.size()));
        for (std::size_t k = 0; k < coords.size(); ++k) {
            const auto [c, i] = coords[k];
            switch (c) {
            case HyperCoord::log_sigma_b: x(Eigen::Index(k)) = std::log(th.sigma_b); break;
            case HyperCoord::logit_kappa: x(Eigen::Index(k)) = logit(th.kappa); break;
            case HyperCoord::log_phi: x(Eigen::Index(k)) = std::log(th.phi); break;
            case HyperCoord::log_group_sd: x(Eigen::Index(k)) = std::log(th.group_sd[i]); break;
            }
        }
        return x;
    }

    HyperParams from_vector(const Eigen::VectorXd& x, HyperParams th) const {
        for (std::size_t k = 0; k < coords.size(); ++k) {
            const auto [c, i] = coords[k];
            const double v = x(Eigen::Index(k));
            switch (c) {
            case HyperCoord::log_sigma_b: th.sigma_b = std::exp(v); break;
            case HyperCoord::logit_kappa: th.kappa = std::clamp(expit(v), 1e-9, 1.0 - 1e-9); break;
            case HyperCoord::log_phi: th.phi = std::exp(v); break;
            case HyperCoord::log_group_sd: th.group_sd[i] = std::exp(v); break;
            }
        }
        return th;
    }
};

inline HyperSpace hyper_space(const ModelSpec& spec, const Design& design) {
    HyperSpace hs;
    if (spec.treatment == HyperTreatment::fixed) return hs;
    const auto& pr = spec.priors;
    if (design.layout.bym2) {
        if (!spec.fixed.sigma_b) hs.coords.emplace_back(HyperCoord::log_sigma_b, 0);
        if (!spec.fixed.kappa) {
            hs.coords.emplace_back(HyperCoord::logit_kappa, 0);
            hs.kappa_prior = pc::MixingPrior(spec.latent.structure->inverse_eigenvalues, pr.pc_kappa_u, pr.pc_kappa_alpha);
        }
    }
    if (has_overdispersion(spec.family) && !spec.fixed.phi) hs.coords.emplace_back(HyperCoord::log_phi, 0);
    if (!spec.fixed.group)
        for (std::size_t f = 0; f < design.layout.n_random_factors; ++f)
            hs.coords.emplace_back(HyperCoord::log_group_sd, f);
    return hs;
}

/// Log prior density of the free hyperparameters on their unconstrained coordinates.
inline double log_hyper_prior(const ModelSpec& spec, const HyperSpace& hs, const Eigen::VectorXd& x) {
    const auto& pr = spec.priors;
    double s = 0.0;
    for (std::size_t k = 0; k < hs.coords.size(); ++k) {
        const double v = x(Eigen::Index(k));
        switch (hs.coords[k].first) {
        case HyperCoord::log_sigma_b: s += pc::log_density_log_sd(v, pr.pc_sigma_u, pr.pc_sigma_alpha); break;
        case HyperCoord::logit_kappa: s += hs.kappa_prior.log_density_logit(v); break;
        case HyperCoord::log_phi: s += pc::log_density_log_phi(v, pr.pc_phi_u, pr.pc_phi_alpha); break;
        case HyperCoord::log_group_sd: s += pc::log_density_log_sd(v, pr.pc_group_u, pr.pc_group_alpha); break;
        }
    }
    return s;
}

/// Fills defaults for hyperparameters the spec left unset.
inline HyperParams complete_hyper(const ModelSpec& spec, const Design& design) {
    HyperParams th = spec.hyper;
    if (th.group_sd.size() < design.layout.n_random_factors) th.group_sd.resize(design.layout.n_random_factors, 0.5);
    return th;
}

struct HyperOptResult {
    HyperParams hyper;
    double log_posterior = 0.0;
    int evaluations = 0;
    bool converged = true;
    std::vector<double> trace;
};

/// Maximizes the Laplace approximation of log p(theta | y) for a fixed
/// linearization by simplex search on the unconstrained coordinates.
inline HyperOptResult hyper_optimize(const ModelSpec& spec, const Design& design, const Linearization& lin,
                                     const HyperParams& start_hyper, const Eigen::VectorXd& start_u,
                                     double initial_step = 0.5) {
    const HyperSpace hs = hyper_space(spec, design);
    HyperOptResult res;
    auto logpost = [&](const Eigen::VectorXd& x) {
        const HyperParams th = hs.from_vector(x, start_hyper);
        try {
            auto g = latent_mode(spec, design, th, lin, start_u);
            return g.laplace() + log_hyper_prior(spec, hs, x);
        } catch (const ConvergenceError&) {
        } catch (const NumericError&) {
        }
        return -std::numeric_limits<double>::infinity();
    };
    const Eigen::VectorXd x0 = hs.to_vector(start_hyper);
    if (hs.size() == 0) {
        res.hyper = start_hyper;
        res.log_posterior = logpost(x0);
        res.evaluations = 1;
        return res;
    }
    SimplexOptions so;
    so.initial_step = initial_step;
    auto sr = nelder_mead([&](const Eigen::VectorXd& x) { return -logpost(x); }, x0, so);
    if (!std::isfinite(sr.value)) throw NumericError("hyperparameter search found no finite posterior value");
    res.hyper = hs.from_vector(sr.x, start_hyper);
    res.log_posterior = -sr.value;
    res.evaluations = sr.evaluations;
    res.converged = sr.converged;
    res.trace.reserve(sr.trace.size());
    for (double v : sr.trace) res.trace.push_back(-v);
    return res;
}

/// Draws from the constrained Gaussian approximation: x = m + L^{-T} D^{-1/2} z,
/// then conditioned on the sum-to-zero constraints by kriging.
inline Eigen::MatrixXd sample_gaussian(const GaussianApprox& g, std::size_t n_draws, Rng& rng) {
    const Eigen::Index n = g.mode.size();
    Eigen::MatrixXd out(Eigen::Index(n_draws), n);
    std::normal_distribution<double> norm(0.0, 1.0);
    const Eigen::VectorXd dinv_sqrt = g.factor->vectorD().cwiseSqrt().cwiseInverse();
    Eigen::VectorXd z(n);
    for (std::size_t d = 0; d < n_draws; ++d) {
        for (Eigen::Index k = 0; k < n; ++k) z(k) = norm(rng);
        Eigen::VectorXd y = g.factor->matrixU().solve(Eigen::VectorXd(dinv_sqrt.cwiseProduct(z)));
        Eigen::VectorXd x = g.factor->permutationPinv() * y;
        out.row(Eigen::Index(d)) = (g.mode + g.krige(x)).transpose();
    }
    return out;
}

struct PosteriorDraws {
    Eigen::MatrixXd latent;                // n_draws x latent dim
    std::vector<std::size_t> hyper_index;  // which hyperparameter setting produced each draw
    std::vector<HyperParams> hypers;
    std::uint64_t seed = 0;
};

inline PosteriorDraws sample_posterior(const GaussianApprox& g, std::size_t n_draws, std::uint64_t seed) {
    if (n_draws == 0) throw std::invalid_argument("n_draws must be at least 1");
    PosteriorDraws pd;
    auto rng = make_rng(seed, Stream::draws, 0);
    pd.latent = sample_gaussian(g, n_draws, rng);
    pd.hyper_index.assign(n_draws, 0);
    pd.hypers = {g.hyper};
    pd.seed = seed;
    return pd;
}

/// Mixture draws over weighted approximations (hyperparameter grid).
inline PosteriorDraws sample_posterior(const std::vector<GaussianApprox>& gs, const std::vector<double>& weights,
                                       std::size_t n_draws, std::uint64_t seed) {
    if (n_draws == 0) throw std::invalid_argument("n_draws must be at least 1");
    if (gs.empty() || gs.size() != weights.size()) throw std::invalid_argument("grid mixture needs one weight per point");
    auto rng = make_rng(seed, Stream::draws, 0);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::vector<std::size_t> counts(gs.size(), 0);
    for (std::size_t d = 0; d < n_draws; ++d) ++counts[pick(rng)];
    PosteriorDraws pd;
    pd.seed = seed;
    pd.latent.resize(Eigen::Index(n_draws), gs.front().mode.size());
    std::size_t row = 0;
    for (std::size_t k = 0; k < gs.size(); ++k) {
        pd.hypers.push_back(gs[k].hyper);
        if (counts[k] == 0) continue;
        auto sub_rng = make_rng(seed, Stream::draws, k + 1);
        Eigen::MatrixXd x = sample_gaussian(gs[k], counts[k], sub_rng);
        pd.latent.middleRows(Eigen::Index(row), x.rows()) = x;
        for (std::size_t d = 0; d < counts[k]; ++d) pd.hyper_index.push_back(k);
        row += counts[k];
    }
    return pd;
}

/// Natural-scale cell means g^{-1}(A(theta) u) per draw: cells x draws.
inline Eigen::MatrixXd predict_cells(const ModelSpec& spec, const Design& design, const PosteriorDraws& pd) {
    const Eigen::Index nd = pd.latent.rows();
    Eigen::MatrixXd out(Eigen::Index(design.n_cells()), nd);
    std::vector<SpMat> a;
    for (const auto& th : pd.hypers) a.push_back(design_matrix(design, th));
    for (Eigen::Index d = 0; d < nd; ++d) {
        Eigen::VectorXd eta = a[pd.hyper_index[std::size_t(d)]] * pd.latent.row(d).transpose();
        for (Eigen::Index c = 0; c < eta.size(); ++c) out(c, d) = inverse_link(spec.link, eta(c));
    }
    return out;
}

/// Population-weighted aggregation of (subarea, group) cell draws to subarea
/// draws: mu_j = sum_a N_ja mu_ja / N_j. Subareas with N_j = 0 are flagged.
struct MrpResult {
    Eigen::MatrixXd draws; // subareas x draws
    std::vector<bool> valid;
};

inline MrpResult mrp_aggregate(const LatentFieldSpec& lat, const Eigen::MatrixXd& cell_draws,
                               const PopulationTable& pop, const std::vector<std::string>& subarea_ids) {
    MrpResult r;
    const std::size_t nj = lat.n_subareas, ng = lat.n_groups();
    r.draws = Eigen::MatrixXd::Constant(Eigen::Index(nj), cell_draws.cols(), std::numeric_limits<double>::quiet_NaN());
    r.valid.assign(nj, false);
    std::vector<std::size_t> gidx(ng);
    for (std::size_t g = 0; g < ng; ++g) {
        auto k = pop.group_index(lat.groups[g]);
        if (!k) throw DataError("population table has no group '" + lat.groups[g] + "'");
        gidx[g] = *k;
    }
    for (std::size_t j = 0; j < nj; ++j) {
        auto a = pop.area_index(subarea_ids.at(j));
        if (!a) throw DataError("population table has no subarea '" + subarea_ids[j] + "'");
        double total = 0.0;
        for (std::size_t g = 0; g < ng; ++g) {
            if (!pop.has(*a, gidx[g]))
                throw DataError("missing population for cell (" + subarea_ids[j] + ", " + lat.groups[g] + ")");
            total += pop.count(*a, gidx[g]);
        }
        if (!(total > 0.0)) continue;
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(cell_draws.cols());
        for (std::size_t g = 0; g < ng; ++g)
            acc += (pop.count(*a, gidx[g]) / total) * cell_draws.row(Eigen::Index(lat.cell(j, g)));
        r.draws.row(Eigen::Index(j)) = acc;
        r.valid[j] = true;
    }
    return r;
}

struct FitOptions {
    std::size_t n_draws = 1000;
    std::uint64_t seed = 1;
    double alpha = 0.10;
    /// Subarea x group populations for MRP aggregation; required with more
    /// than one group.
    const PopulationTable* population = nullptr;
    /// Subarea ids in latent order (needed with a population table).
    std::vector<std::string> subarea_ids;
    int max_hyper_rounds = 5;
    double hyper_round_tol = 1e-3;
    int grid_points = 5;
    double grid_half_width = 2.0;
};

struct GridPoint {
    HyperParams hyper;
    double log_posterior = 0.0;
    double weight = 0.0;
};

struct FitDiagnostics {
    int outer_iterations = 0;
    int newton_iterations = 0;
    int hyper_rounds = 0;
    int hyper_evaluations = 0;
    bool hyper_converged = true;
    int damping_halvings = 0;
    double final_step = 0.0;
    double grad_norm = 0.0;
    double ridge = 0.0;
    double log_marginal = 0.0;
    double linearization_gap = 0.0; // max |eta-tilde(m) - eta-bar(m)| at the final linearization
    std::vector<double> trajectory;
    std::vector<double> hyper_trace;
    std::vector<std::string> warnings;
};

struct FitResult {
    HyperParams hyper;
    Design design;
    GaussianApprox approx;
    PosteriorDraws draws;
    Eigen::MatrixXd cell_draws;      // cells x draws, natural scale
    std::vector<Summary> cells;      // per (subarea, group) cell
    Eigen::MatrixXd subarea_draws;   // subareas x draws
    std::vector<Summary> subareas;   // overall per subarea (MRP aggregated with several groups)
    std::vector<bool> subarea_valid;
    std::vector<GridPoint> grid;
    FixedEffectSummary fixed_effects;
    FitDiagnostics diagnostics;
};

namespace detail {

/// Starting latent vector: intercept at the link of the pooled outcome, all
/// other effects at zero.
inline Eigen::VectorXd initial_latent(const ModelSpec& spec, const Design& d) {
    Eigen::VectorXd u = Eigen::VectorXd::Zero(Eigen::Index(d.dim()));
    if (!d.layout.intercept) return u;
    double num = 0.0, den = 0.0;
    for (const auto& o : spec.observations) {
        if (spec.family == Family::gaussian) {
            num += o.y / o.variance;
            den += 1.0 / o.variance;
        } else {
            num += o.y;
            den += o.exposure;
        }
    }
    if (!(den > 0.0)) return u;
    double m = num / den;
    if (spec.family != Family::gaussian) {
        if (spec.link == Link::logit) m = std::clamp(m, 1e-4, 1.0 - 1e-4);
        else m = std::max(m, 1e-8);
        m = link_fn(spec.link, m);
    }
    u(Eigen::Index(*d.layout.intercept)) = m;
    return u;
}

} // namespace detail

/// Full fit: empirical-Bayes hyperparameters alternated with linearization
/// updates, a final fixed-point pass at the chosen hyperparameters,
/// posterior draws and summaries.
inline FitResult fit(const ModelSpec& spec, const FitOptions& opt = {}) {
    validate(spec);
    FitResult res;
    res.design = build_design(spec);
    const Design& d = res.design;
    auto& diag = res.diagnostics;
    HyperParams th = complete_hyper(spec, d);
    const HyperSpace hs = hyper_space(spec, d);
    const bool nonlinear = has_nonlinear_rows(spec);

    Eigen::VectorXd u = detail::initial_latent(spec, d);
    FixedPointOptions loose;
    loose.tol = opt.hyper_round_tol;
    if (nonlinear) u = fixed_point_iterate(spec, d, th, u, loose).approx.mode;

    if (hs.size() > 0) {
        double step = 0.5;
        for (int round = 1; round <= opt.max_hyper_rounds; ++round) {
            const auto lin = linearize(spec, cell_predictors(d, th, u));
            const Eigen::VectorXd x_old = hs.to_vector(th);
            auto ho = hyper_optimize(spec, d, lin, th, u, step);
            th = ho.hyper;
            diag.hyper_rounds = round;
            diag.hyper_evaluations += ho.evaluations;
            diag.hyper_converged = ho.converged;
            diag.hyper_trace.insert(diag.hyper_trace.end(), ho.trace.begin(), ho.trace.end());
            if (!ho.converged) diag.warnings.push_back("hyperparameter search stopped at its evaluation budget");
            if (!nonlinear) break;
            auto fp = fixed_point_iterate(spec, d, th, u, loose);
            const double du = (fp.approx.mode - u).cwiseAbs().maxCoeff();
            const double dx = (hs.to_vector(th) - x_old).cwiseAbs().maxCoeff();
            u = fp.approx.mode;
            if (du < opt.hyper_round_tol && dx < 1e-2) break;
            if (round == opt.max_hyper_rounds)
                diag.warnings.push_back("hyperparameter/linearization alternation hit its round limit");
            step = 0.2;
        }
    }

    FixedPointResult fp = fixed_point_iterate(spec, d, th, u);
    res.hyper = th;
    res.approx = std::move(fp.approx);
    diag.outer_iterations = fp.iterations;
    diag.trajectory = fp.trajectory;
    diag.damping_halvings = fp.halvings;
    diag.final_step = fp.trajectory.back();
    diag.newton_iterations = res.approx.iterations;
    diag.grad_norm = res.approx.grad_norm;
    diag.ridge = res.approx.ridge;
    diag.log_marginal = res.approx.laplace() + log_hyper_prior(spec, hs, hs.to_vector(th));
    {
        const Eigen::VectorXd exact = predictor_eval(spec, d, th, res.approx.mode);
        const Eigen::VectorXd lin = res.approx.offset + res.approx.B * res.approx.mode;
        diag.linearization_gap = exact.size() ? (exact - lin).cwiseAbs().maxCoeff() : 0.0;
    }
    if (res.approx.ridge > 0.0) diag.warnings.push_back("ridge " + std::to_string(res.approx.ridge) + " added to the precision");

    if (spec.treatment == HyperTreatment::grid && d.layout.bym2 && !spec.fixed.sigma_b && !spec.fixed.kappa) {
        std::vector<GaussianApprox> approxes;
        std::vector<double> logp;
        const int k = std::max(1, opt.grid_points);
        const double ls0 = std::log(th.sigma_b), lk0 = logit(th.kappa);
        for (int a = 0; a < k; ++a) {
            for (int b = 0; b < k; ++b) {
                const double off_a = k == 1 ? 0.0 : -opt.grid_half_width + 2.0 * opt.grid_half_width * a / (k - 1);
                const double off_b = k == 1 ? 0.0 : -opt.grid_half_width + 2.0 * opt.grid_half_width * b / (k - 1);
                HyperParams tg = th;
                tg.sigma_b = std::exp(ls0 + off_a);
                tg.kappa = std::clamp(expit(lk0 + off_b), 1e-9, 1.0 - 1e-9);
                try {
                    auto fpg = fixed_point_iterate(spec, d, tg, res.approx.mode);
                    logp.push_back(fpg.approx.laplace() + log_hyper_prior(spec, hs, hs.to_vector(tg)));
                    approxes.push_back(std::move(fpg.approx));
                } catch (const std::runtime_error&) {
                    diag.warnings.push_back("grid point skipped after a failed fit");
                }
            }
        }
        if (approxes.empty()) throw ConvergenceError("no hyperparameter grid point could be fitted");
        const double mx = *std::max_element(logp.begin(), logp.end());
        std::vector<double> w;
        double sw = 0.0;
        for (double l : logp) w.push_back(std::exp(l - mx)), sw += w.back();
        for (std::size_t g = 0; g < approxes.size(); ++g) {
            w[g] /= sw;
            res.grid.push_back({approxes[g].hyper, logp[g], w[g]});
        }
        res.draws = sample_posterior(approxes, w, opt.n_draws, opt.seed);
    } else {
        if (spec.treatment == HyperTreatment::grid)
            diag.warnings.push_back("grid treatment needs free BYM2 hyperparameters; using the mode");
        res.draws = sample_posterior(res.approx, opt.n_draws, opt.seed);
    }

    res.cell_draws = predict_cells(spec, d, res.draws);
    const auto& lat = spec.latent;
    res.cells.reserve(lat.n_cells());
    for (Eigen::Index c = 0; c < res.cell_draws.rows(); ++c) {
        const Eigen::RowVectorXd row = res.cell_draws.row(c);
        res.cells.push_back(summarize(std::vector<double>(row.data(), row.data() + row.size()), opt.alpha));
    }
    if (lat.n_groups() == 1) {
        res.subarea_draws = res.cell_draws;
        res.subarea_valid.assign(lat.n_subareas, true);
    } else if (opt.population) {
        auto m = mrp_aggregate(lat, res.cell_draws, *opt.population, opt.subarea_ids);
        res.subarea_draws = std::move(m.draws);
        res.subarea_valid = std::move(m.valid);
    }
    for (Eigen::Index j = 0; j < res.subarea_draws.rows(); ++j) {
        if (!res.subarea_valid[std::size_t(j)]) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            res.subareas.push_back({nan, nan, nan, nan, nan});
            diag.warnings.push_back("subarea index " + std::to_string(j) + " has zero population and was excluded");
            continue;
        }
        const Eigen::RowVectorXd row = res.subarea_draws.row(j);
        res.subareas.push_back(summarize(std::vector<double>(row.data(), row.data() + row.size()), opt.alpha));
    }
    res.fixed_effects = original_scale_coefficients(d, res.approx.mode);
    return res;
}

} // namespace sae
