#include <gtest/gtest.h>

#include <boost/math/tools/minima.hpp>

#include "sae/inference.hpp"
#include "support.hpp"

using namespace sae;

using testkit::gaussian_area;

namespace {
FitOptions with_draws(std::size_t n) {
    FitOptions o;
    o.n_draws = n;
    return o;
}
} // namespace

TEST(LatentMode, GaussianMatchesConstrainedConjugateSolution) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> z(0, 1);
    std::uniform_real_distribution<double> u(0.05, 0.4);
    std::vector<double> y(16), v(16);
    for (std::size_t j = 0; j < 16; ++j) y[j] = 0.3 + z(rng), v[j] = u(rng);
    auto s = gaussian_area(4, y, v);
    s.latent.covariate_names = {"x"};
    s.latent.covariates = Eigen::MatrixXd(16, 1);
    for (Eigen::Index j = 0; j < 16; ++j) s.latent.covariates(j, 0) = z(rng);
    s.treatment = HyperTreatment::fixed;
    s.hyper.sigma_b = 0.7;
    s.hyper.kappa = 0.4;
    auto d = build_design(s);

    auto fp = fixed_point_iterate(s, d, s.hyper, Eigen::VectorXd::Zero(Eigen::Index(d.dim())));
    EXPECT_EQ(fp.iterations, 1);

    const auto [mean, cov] = testkit::gaussian_posterior(s, d);
    EXPECT_LT((fp.approx.mode - mean).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((fp.approx.covariance() - cov).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((Eigen::MatrixXd(d.constraints) * fp.approx.mode).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(LatentMode, PoissonInterceptMatchesScalarOracle) {
    ModelSpec s;
    s.family = Family::poisson;
    s.link = Link::log;
    s.latent.n_subareas = 1;
    s.latent.bym2 = false;
    s.priors.fixed_effect_precision = 0.01; // sd 10
    Observation o;
    o.y = 10;
    o.exposure = 10;
    s.observations = {o};
    auto d = build_design(s);
    auto g = latent_mode(s, d, s.hyper, Eigen::VectorXd::Constant(1, 1.0));
    auto f = [](double a) { return -(10.0 * a - 10.0 * std::exp(a) - 0.005 * a * a); };
    const double oracle = boost::math::tools::brent_find_minima(f, -2.0, 2.0, 50).first;
    EXPECT_NEAR(g.mode(0), oracle, 1e-7);
    EXPECT_NEAR(g.mode(0), 0.0, 0.02);
}

TEST(LatentMode, BetaBinomialApproachesBinomial) {
    std::mt19937_64 rng(5);
    auto s = testkit::simulated_spec(rng, Link::logit);
    auto d = build_design(s);
    const Eigen::VectorXd u0 = Eigen::VectorXd::Zero(Eigen::Index(d.dim()));
    auto bin = fixed_point_iterate(s, d, s.hyper, u0);
    s.family = Family::beta_binomial;
    HyperParams th = s.hyper;
    th.phi = 1e9;
    auto bb = fixed_point_iterate(s, d, th, u0);
    EXPECT_LT((bin.approx.mode - bb.approx.mode).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FixedPoint, AggregatedModelConvergesAndReproducesPredictor) {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 20; ++rep) {
        const Link link = rep % 2 ? Link::logit : Link::log;
        auto s = testkit::simulated_spec(rng, link);
        auto d = build_design(s);
        auto fp = fixed_point_iterate(s, d, s.hyper, Eigen::VectorXd::Zero(Eigen::Index(d.dim())));
        EXPECT_LE(fp.iterations, 20);
        EXPECT_LT(fp.trajectory.back(), 1e-6);
        const Eigen::VectorXd exact = predictor_eval(s, d, s.hyper, fp.approx.mode);
        const Eigen::VectorXd lin = fp.approx.offset + fp.approx.B * fp.approx.mode;
        EXPECT_LT((exact - lin).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(FixedPoint, SingleChildAggregationEqualsDirectFit) {
    std::vector<double> y(9), v(9, 0.05);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z(-1.0, 0.5);
    for (auto& a : y) a = z(rng);
    auto direct = gaussian_area(3, y, v);
    direct.link = Link::logit;
    auto agg = direct;
    for (auto& o : agg.observations) o.terms = {{o.cell, 1.0}};
    FitOptions opt;
    opt.n_draws = 50;
    auto fa = fit(direct, opt), fb = fit(agg, opt);
    EXPECT_LT((fa.approx.mode - fb.approx.mode).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(fa.hyper.sigma_b, fb.hyper.sigma_b, 1e-8);
    EXPECT_NEAR(fa.hyper.kappa, fb.hyper.kappa, 1e-8);
}

TEST(HyperOptimize, FixedTreatmentIsANoOp) {
    std::vector<double> y(9, 0.1), v(9, 0.1);
    auto s = gaussian_area(3, y, v);
    s.treatment = HyperTreatment::fixed;
    s.hyper.sigma_b = 0.123;
    s.hyper.kappa = 0.77;
    auto d = build_design(s);
    const Eigen::VectorXd u = Eigen::VectorXd::Zero(Eigen::Index(d.dim()));
    auto r = hyper_optimize(s, d, linearize(s, cell_predictors(d, s.hyper, u)), s.hyper, u);
    EXPECT_EQ(r.hyper.sigma_b, 0.123);
    EXPECT_EQ(r.hyper.kappa, 0.77);
    auto f = fit(s, with_draws(10));
    EXPECT_EQ(f.hyper.sigma_b, 0.123);
    EXPECT_EQ(f.hyper.kappa, 0.77);
}

TEST(HyperOptimize, ConjugateVarianceMatchesClosedForm) {
    // y_j ~ N(b_j, v_j), b_j ~ N(0, sigma^2): y_j ~ N(0, sigma^2 + v_j)
    std::mt19937_64 rng(31);
    std::normal_distribution<double> z(0, 1);
    std::uniform_real_distribution<double> uv(0.05, 0.3);
    std::vector<double> y(25), v(25);
    for (std::size_t j = 0; j < 25; ++j) {
        v[j] = uv(rng);
        y[j] = 0.6 * z(rng) + std::sqrt(v[j]) * z(rng);
    }
    auto s = gaussian_area(5, y, v);
    s.latent.intercept = false;
    s.hyper.kappa = 0.0;
    s.fixed.kappa = true;
    auto d = build_design(s);
    const Eigen::VectorXd u = Eigen::VectorXd::Zero(Eigen::Index(d.dim()));
    auto r = hyper_optimize(s, d, linearize(s, cell_predictors(d, s.hyper, u)), s.hyper, u);

    auto neg = [&](double ls) {
        const double s2 = std::exp(2.0 * ls);
        double l = pc::log_density_log_sd(ls, s.priors.pc_sigma_u, s.priors.pc_sigma_alpha);
        for (std::size_t j = 0; j < 25; ++j) l += -0.5 * std::log(s2 + v[j]) - 0.5 * y[j] * y[j] / (s2 + v[j]);
        return -l;
    };
    const double oracle = boost::math::tools::brent_find_minima(neg, -5.0, 2.0, 50).first;
    EXPECT_NEAR(std::log(r.hyper.sigma_b), oracle, 1e-3);
}

TEST(HyperOptimize, PureNoiseFavoursUnstructuredMixing) {
    int below = 0;
    for (int rep = 0; rep < 50; ++rep) {
        std::mt19937_64 rng(1000 + rep);
        std::normal_distribution<double> z(0, 1);
        std::vector<double> y(36), v(36, 0.02);
        for (auto& a : y) a = -1.0 + 0.5 * z(rng) + std::sqrt(0.02) * z(rng);
        auto s = gaussian_area(6, y, v);
        auto f = fit(s, with_draws(10));
        below += f.hyper.kappa < 0.5;
    }
    EXPECT_GT(below, 25);
}

TEST(SamplePosterior, SeededDrawsAreReproducible) {
    std::vector<double> y(9), v(9, 0.1);
    for (std::size_t j = 0; j < 9; ++j) y[j] = 0.1 * double(j);
    auto s = gaussian_area(3, y, v);
    FitOptions opt;
    opt.n_draws = 200;
    opt.seed = 77;
    auto a = fit(s, opt), b = fit(s, opt);
    EXPECT_EQ(a.draws.latent, b.draws.latent);
    EXPECT_EQ(a.diagnostics.hyper_trace, b.diagnostics.hyper_trace);
    opt.seed = 78;
    EXPECT_NE(fit(s, opt).draws.latent, a.draws.latent);
}

TEST(SamplePosterior, LargePrecisionGivesTightDraws) {
    GaussianApprox g;
    const Eigen::Index n = 5;
    g.mode = Eigen::VectorXd::Zero(n);
    SpMat p(n, n);
    p.setIdentity();
    p *= 1e6;
    g.precision = p;
    g.constraints.resize(0, n);
    g.factor = std::make_shared<Eigen::SimplicialLDLT<SpMat>>(p);
    auto pd = sample_posterior(g, 1000, 3);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::VectorXd c = pd.latent.col(k);
        const double sd = std::sqrt((c.array() - c.mean()).square().sum() / 999.0);
        EXPECT_LT(sd, 0.005);
        EXPECT_NEAR(sd, 1e-3, 4e-3 / std::sqrt(1000.0) * 10);
    }
}

TEST(SamplePosterior, SumToZeroHoldsInEveryDraw) {
    std::vector<double> y(16), v(16, 0.1);
    for (std::size_t j = 0; j < 16; ++j) y[j] = std::sin(double(j));
    auto s = gaussian_area(4, y, v);
    auto f = fit(s, with_draws(300));
    const auto& L = f.design.layout;
    for (Eigen::Index dr = 0; dr < f.draws.latent.rows(); ++dr)
        EXPECT_LT(std::abs(f.draws.latent.row(dr).segment(Eigen::Index(L.s_begin), 16).sum()), 1e-8);
}

TEST(PredictCells, DegenerateDrawsCollapseToThePointTransform) {
    std::mt19937_64 rng(6);
    auto s = testkit::random_spec(rng, Link::logit);
    auto d = build_design(s);
    Eigen::VectorXd m = Eigen::VectorXd::Random(Eigen::Index(d.dim()));
    PosteriorDraws pd;
    pd.latent = m.transpose().replicate(20, 1);
    pd.hyper_index.assign(20, 0);
    pd.hypers = {s.hyper};
    auto cells = predict_cells(s, d, pd);
    const Eigen::VectorXd eta = design_matrix(d, s.hyper) * m;
    for (Eigen::Index c = 0; c < cells.rows(); ++c) {
        const Eigen::RowVectorXd row = cells.row(c);
        auto sm = summarize(std::vector<double>(row.data(), row.data() + row.size()), 0.1);
        const double want = expit(eta(c));
        EXPECT_NEAR(sm.lower, want, 1e-15);
        EXPECT_NEAR(sm.median, want, 1e-15);
        EXPECT_NEAR(sm.upper, want, 1e-15);
    }
}

TEST(PredictCells, LogitMeansStayInUnitInterval) {
    std::mt19937_64 rng(15);
    auto s = testkit::simulated_spec(rng, Link::logit);
    auto f = fit(s, with_draws(200));
    EXPECT_GT(f.cell_draws.minCoeff(), 0.0);
    EXPECT_LT(f.cell_draws.maxCoeff(), 1.0);
    for (const auto& c : f.cells) {
        EXPECT_LE(c.lower, c.median);
        EXPECT_LE(c.median, c.upper);
    }
}

namespace {
struct MrpFixture {
    LatentFieldSpec lat;
    AreaHierarchy h = make_hierarchy({{"j1", "i1"}, {"j2", "i1"}});
    MrpFixture() {
        lat.n_subareas = 2;
        lat.groups = {"a", "b"};
    }
};
} // namespace

TEST(MrpAggregate, WeightedMeanPerDraw) {
    MrpFixture f;
    auto pop = make_population({{"j1", "a", 60}, {"j1", "b", 40}, {"j2", "a", 5}, {"j2", "b", 5}}, f.h);
    Eigen::MatrixXd cells(4, 3);
    cells << 0.5, 0.5, 0.1, 0.25, 0.25, 0.1, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3;
    auto r = mrp_aggregate(f.lat, cells, pop, {"j1", "j2"});
    EXPECT_NEAR(r.draws(0, 0), 0.4, 1e-12);
    EXPECT_NEAR(r.draws(0, 2), 0.1, 1e-12);
    EXPECT_NEAR(r.draws(1, 1), 0.3, 1e-12);
    // rescaling a subarea's populations leaves its draws unchanged
    auto pop2 = make_population({{"j1", "a", 600}, {"j1", "b", 400}, {"j2", "a", 5}, {"j2", "b", 5}}, f.h);
    EXPECT_EQ(mrp_aggregate(f.lat, cells, pop2, {"j1", "j2"}).draws.row(0), r.draws.row(0));
}

TEST(MrpAggregate, SingleGroupIsIdentity) {
    LatentFieldSpec lat;
    lat.n_subareas = 2;
    auto h = make_hierarchy({{"j1", "i1"}, {"j2", "i1"}});
    auto pop = make_population({{"j1", "all", 3}, {"j2", "all", 9}}, h);
    Eigen::MatrixXd cells = Eigen::MatrixXd::Random(2, 4).cwiseAbs();
    EXPECT_EQ(mrp_aggregate(lat, cells, pop, {"j1", "j2"}).draws, cells);
}

TEST(MrpAggregate, ZeroPopulationFlaggedAndMissingCellIsDataError) {
    MrpFixture f;
    auto pop = make_population({{"j1", "a", 0}, {"j1", "b", 0}, {"j2", "a", 1}, {"j2", "b", 1}}, f.h);
    Eigen::MatrixXd cells = Eigen::MatrixXd::Constant(4, 2, 0.2);
    auto r = mrp_aggregate(f.lat, cells, pop, {"j1", "j2"});
    EXPECT_FALSE(r.valid[0]);
    EXPECT_TRUE(r.valid[1]);
    EXPECT_TRUE(std::isnan(r.draws(0, 0)));
    auto partial = make_population({{"j1", "a", 1}, {"j1", "b", 1}, {"j2", "a", 1}}, f.h);
    EXPECT_THROW(mrp_aggregate(f.lat, cells, partial, {"j1", "j2"}), DataError);
}

TEST(Fit, GridTreatmentMixesOverHyperparameters) {
    std::vector<double> y(16), v(16, 0.05);
    for (std::size_t j = 0; j < 16; ++j) y[j] = 0.2 * std::cos(double(j));
    auto s = gaussian_area(4, y, v);
    s.treatment = HyperTreatment::grid;
    auto f = fit(s, with_draws(400));
    ASSERT_FALSE(f.grid.empty());
    double w = 0.0;
    for (const auto& g : f.grid) w += g.weight;
    EXPECT_NEAR(w, 1.0, 1e-12);
    EXPECT_EQ(f.draws.hyper_index.size(), 400u);
}
