// Test-only generators and oracles shared by the unit and acceptance suites.
#pragma once

#include <random>

#include "sae/graph.hpp"
#include "sae/model.hpp"

namespace sae::testkit {

/// Random connected graph: spanning tree plus `extra` random edges.
inline AdjacencyGraph random_graph(std::mt19937_64& rng, std::size_t n, std::size_t extra) {
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t k = 1; k < n; ++k) e.emplace_back(rng() % k, k);
    for (std::size_t k = 0; k < extra; ++k) {
        const std::size_t a = rng() % n, b = rng() % n;
        if (a != b) e.emplace_back(std::min(a, b), std::max(a, b));
    }
    return AdjacencyGraph(n, e);
}

/// Rook-adjacency k x k lattice.
inline std::shared_ptr<const ScaledStructure> lattice(std::size_t k) {
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < k; ++c) {
            if (c + 1 < k) e.emplace_back(r * k + c, r * k + c + 1);
            if (r + 1 < k) e.emplace_back(r * k + c, (r + 1) * k + c);
        }
    return std::make_shared<const ScaledStructure>(scaled_structure(AdjacencyGraph(k * k, e)));
}

/// Gaussian area-level model y_j ~ N(eta_j, v_j) on a k x k lattice.
inline ModelSpec gaussian_area(std::size_t k, const std::vector<double>& y, const std::vector<double>& v) {
    ModelSpec s;
    s.family = Family::gaussian;
    s.link = Link::identity;
    s.latent.n_subareas = k * k;
    s.latent.structure = lattice(k);
    for (std::size_t j = 0; j < k * k; ++j) {
        Observation o;
        o.cell = j;
        o.y = y[j];
        o.variance = v[j];
        s.observations.push_back(o);
    }
    return s;
}

/// Orthonormal basis of the null space of C.
inline Eigen::MatrixXd null_basis(const Eigen::MatrixXd& c, Eigen::Index n) {
    if (c.rows() == 0) return Eigen::MatrixXd::Identity(n, n);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullV);
    return svd.matrixV().rightCols(n - c.rows());
}

/// Conjugate posterior of a gaussian, identity-link, non-aggregated spec at
/// s.hyper, solved densely on the constrained subspace u = N w.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> gaussian_posterior(const ModelSpec& s, const Design& d) {
    const Eigen::MatrixXd a(design_matrix(d, s.hyper));
    const Eigen::MatrixXd q(d.prior_precision);
    const auto n_obs = Eigen::Index(s.observations.size());
    Eigen::VectorXd vinv(n_obs), yy(n_obs);
    Eigen::MatrixXd rows(n_obs, a.cols());
    for (Eigen::Index r = 0; r < n_obs; ++r) {
        const auto& o = s.observations[std::size_t(r)];
        vinv(r) = 1.0 / o.variance;
        yy(r) = o.y;
        rows.row(r) = a.row(Eigen::Index(o.cell));
    }
    const Eigen::MatrixXd p = q + rows.transpose() * vinv.asDiagonal() * rows;
    const Eigen::MatrixXd n = null_basis(Eigen::MatrixXd(d.constraints), a.cols());
    const Eigen::MatrixXd pn = n.transpose() * p * n;
    return {n * pn.ldlt().solve(n.transpose() * rows.transpose() * vinv.asDiagonal() * yy),
            n * pn.inverse() * n.transpose()};
}

/// A random spec with BYM2, two covariates, a fixed and a random factor, and a
/// mix of fine and aggregated observations under `link`.
inline ModelSpec random_spec(std::mt19937_64& rng, Link link) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.05, 1.0);
    const std::size_t n = 4 + rng() % 9;
    ModelSpec s;
    s.link = link;
    s.family = link == Link::log ? Family::poisson : Family::binomial;
    auto& lat = s.latent;
    lat.n_subareas = n;
    lat.structure = std::make_shared<const ScaledStructure>(scaled_structure(random_graph(rng, n, n / 2)));
    lat.covariate_names = {"x1", "x2"};
    lat.covariates = Eigen::MatrixXd(Eigen::Index(n), 2);
    for (Eigen::Index j = 0; j < Eigen::Index(n); ++j) lat.covariates(j, 0) = z(rng), lat.covariates(j, 1) = z(rng);
    lat.factors = {GroupFactor{"a", {"a0", "a1", "a2"}, FactorCoding::fixed},
                   GroupFactor{"b", {"b0", "b1"}, FactorCoding::random}};
    lat.groups.clear();
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
            lat.groups.push_back("a" + std::to_string(a) + "b" + std::to_string(b));
            lat.group_levels.push_back({a, b});
        }
    s.hyper.sigma_b = 0.2 + unif(rng);
    s.hyper.kappa = unif(rng) * 0.9;
    s.hyper.group_sd = {0.1 + unif(rng)};
    const std::size_t ncell = lat.n_cells();
    for (std::size_t r = 0; r < 6; ++r) {
        Observation o;
        o.y = 1;
        o.exposure = 10;
        if (r % 3 == 0) {
            o.cell = rng() % ncell;
        } else {
            const std::size_t m = 1 + rng() % 6;
            double tot = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                o.terms.push_back({std::size_t(rng() % ncell), unif(rng)});
                tot += o.terms.back().weight;
            }
            for (auto& t : o.terms) t.weight /= tot;
        }
        s.observations.push_back(o);
    }
    return s;
}

/// random_spec with `n_obs` observations whose counts are drawn from the model
/// at a random latent vector, with `trials` units of exposure each.
inline ModelSpec simulated_spec(std::mt19937_64& rng, Link link, double trials = 200.0, std::size_t n_obs = 40) {
    ModelSpec s = random_spec(rng, link);
    std::uniform_real_distribution<double> unif(0.05, 1.0);
    const std::size_t ncell = s.latent.n_cells();
    s.observations.clear();
    for (std::size_t r = 0; r < n_obs; ++r) {
        Observation o;
        o.exposure = trials;
        if (r % 3 == 0) {
            o.cell = rng() % ncell;
        } else {
            const std::size_t m = 1 + rng() % 6;
            double tot = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                o.terms.push_back({std::size_t(rng() % ncell), unif(rng)});
                tot += o.terms.back().weight;
            }
            for (auto& t : o.terms) t.weight /= tot;
        }
        s.observations.push_back(o);
    }
    const Design d = build_design(s);
    std::normal_distribution<double> z(0.0, 0.5);
    Eigen::VectorXd u(Eigen::Index(d.dim()));
    for (auto& v : u) v = z(rng);
    u(0) = link == Link::log ? std::log(0.1) : -1.5;
    const Eigen::VectorXd eta = predictor_eval(s, d, s.hyper, u);
    for (std::size_t r = 0; r < n_obs; ++r) {
        const double mu = inverse_link(link, eta(Eigen::Index(r)));
        auto& o = s.observations[r];
        o.y = link == Link::log ? double(std::poisson_distribution<int>(mu * trials)(rng))
                                : double(std::binomial_distribution<int>(int(trials), mu)(rng));
    }
    return s;
}

/// Max over rows of ||B_row - FD_row||_inf / ||B_row||_inf for the predictor
/// Jacobian against central differences of predictor_eval.
inline double jacobian_relative_error(const ModelSpec& s, const Design& d, const HyperParams& th,
                                      const Eigen::VectorXd& u0) {
    const Eigen::MatrixXd b(predictor_jacobian(s, d, th, u0));
    Eigen::MatrixXd fd(b.rows(), b.cols());
    for (Eigen::Index k = 0; k < u0.size(); ++k) {
        const double h = 1e-6 * std::max(1.0, std::abs(u0(k)));
        Eigen::VectorXd up = u0, dn = u0;
        up(k) += h;
        dn(k) -= h;
        fd.col(k) = (predictor_eval(s, d, th, up) - predictor_eval(s, d, th, dn)) / (2.0 * h);
    }
    double worst = 0.0;
    for (Eigen::Index r = 0; r < b.rows(); ++r) {
        const double scale = b.row(r).cwiseAbs().maxCoeff();
        if (scale == 0.0) continue;
        worst = std::max(worst, (b.row(r) - fd.row(r)).cwiseAbs().maxCoeff() / scale);
    }
    return worst;
}

} // namespace sae::testkit
