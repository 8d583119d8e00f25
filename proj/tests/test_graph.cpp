#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sae/graph.hpp"

using namespace sae;

namespace {

// Dense eigendecomposition pseudo-inverse, independent of the library path.
Eigen::MatrixXd pinv(const Eigen::MatrixXd& q) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q);
    Eigen::VectorXd inv = es.eigenvalues();
    for (Eigen::Index k = 0; k < inv.size(); ++k) inv(k) = std::abs(inv(k)) > 1e-9 ? 1.0 / inv(k) : 0.0;
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd laplacian(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& e) {
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(n));
    for (auto [a, b] : e) {
        q(a, b) -= 1, q(b, a) -= 1;
        q(a, a) += 1, q(b, b) += 1;
    }
    return q;
}

std::pair<AreaHierarchy, AdjacencyGraph> four_chain() {
    return build_hierarchy({{"1", "a1"}, {"2", "a1"}, {"3", "a2"}, {"4", "a2"}}, {{"1", "2"}, {"2", "3"}, {"3", "4"}});
}

} // namespace

TEST(Hierarchy, BuildsParentsAndDegrees) {
    auto [h, g] = four_chain();
    EXPECT_EQ(h.n_subareas(), 4u);
    EXPECT_EQ(h.n_coarse(), 2u);
    EXPECT_EQ(h.parent(0), 0u);
    EXPECT_EQ(h.parent(3), 1u);
    EXPECT_EQ(g.degrees(), (std::vector<std::size_t>{1, 2, 2, 1}));
    EXPECT_EQ(h.children(1), (std::vector<std::size_t>{2, 3}));
}

TEST(Hierarchy, RejectsUnknownParent) {
    EXPECT_THROW(build_hierarchy({{"1", "a1"}, {"2", "aX"}}, {}, std::vector<std::string>{"a1"}), StructuralError);
}

TEST(Hierarchy, RejectsSelfLoop) {
    EXPECT_THROW(build_hierarchy({{"1", "a1"}, {"2", "a1"}}, {{"1", "1"}}), StructuralError);
}

TEST(Hierarchy, RejectsDanglingEdgeOrphanAndDuplicate) {
    EXPECT_THROW(build_hierarchy({{"1", "a1"}}, {{"1", "9"}}), StructuralError);
    EXPECT_THROW(build_hierarchy({{"1", ""}}, {}), StructuralError);
    EXPECT_THROW(build_hierarchy({{"1", "a1"}, {"1", "a2"}}, {}), StructuralError);
}

TEST(Hierarchy, CoarseAreaWithoutChildrenIsStructuralError) {
    EXPECT_THROW(build_hierarchy({{"1", "a1"}}, {}, std::vector<std::string>{"a1", "a2"}), StructuralError);
}

TEST(IcarScaling, PathOfThreeMatchesDenseOracle) {
    AdjacencyGraph g(3, {{0, 1}, {1, 2}});
    const Eigen::MatrixXd p = pinv(laplacian(3, {{0, 1}, {1, 2}}));
    EXPECT_NEAR(p(0, 0), 5.0 / 9.0, 1e-12);
    EXPECT_NEAR(p(1, 1), 2.0 / 9.0, 1e-12);
    const double oracle = std::cbrt(p(0, 0) * p(1, 1) * p(2, 2));
    EXPECT_NEAR(icar_scaling_factor(g), oracle, 1e-10);
    EXPECT_NEAR(icar_scaling_factor(g), 0.4094, 1e-3);
}

TEST(IcarScaling, TwoEdgeComponentsAndK2) {
    AdjacencyGraph two(4, {{0, 1}, {2, 3}});
    auto v = icar_marginal_variances(two);
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_NEAR(v(k), 0.25, 1e-12);
    EXPECT_NEAR(icar_scaling_factor(two), 0.25, 1e-12);
    AdjacencyGraph k2(2, {{0, 1}});
    EXPECT_NEAR(icar_scaling_factor(k2), 0.25, 1e-12);
}

TEST(IcarScaling, EmptyGraphIsAnError) {
    EXPECT_THROW(icar_scaling_factor(AdjacencyGraph(0, {})), std::invalid_argument);
}

TEST(ScaledStructure, PathOfThreeRowSumsAndSymmetry) {
    AdjacencyGraph g(3, {{0, 1}, {1, 2}});
    auto s = scaled_structure(g);
    const Eigen::MatrixXd q(s.precision);
    EXPECT_NEAR(q.rowwise().sum().cwiseAbs().maxCoeff(), 0.0, 1e-14);
    EXPECT_NEAR((q - q.transpose()).cwiseAbs().maxCoeff(), 0.0, 0.0);
    // Precision scaled so that the marginal variances have geometric mean one.
    const Eigen::MatrixXd p = pinv(q);
    EXPECT_NEAR(std::cbrt(p(0, 0) * p(1, 1) * p(2, 2)), 1.0, 1e-10);
    EXPECT_NEAR((q - s.scaling_factor * laplacian(3, {{0, 1}, {1, 2}})).cwiseAbs().maxCoeff(), 0.0, 1e-14);
}

TEST(ScaledStructure, IsolatedNodeHasZeroRowAndOwnComponent) {
    AdjacencyGraph g(3, {{0, 1}});
    auto s = scaled_structure(g);
    const Eigen::MatrixXd q(s.precision);
    EXPECT_EQ(q.row(2).cwiseAbs().sum(), 0.0);
    EXPECT_EQ(q.col(2).cwiseAbs().sum(), 0.0);
    EXPECT_TRUE(s.singleton[2]);
    EXPECT_EQ(s.components.size(), 2u);
    EXPECT_EQ(s.constrained_components().size(), 1u);
    EXPECT_DOUBLE_EQ(s.marginal_variances(2), 1.0);
}

TEST(ScaledStructure, RandomGraphsHaveUnitGeometricMeanVariance) {
    std::mt19937_64 rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 2 + rng() % 49;
        std::vector<std::pair<std::size_t, std::size_t>> e;
        for (std::size_t k = 1; k < n; ++k) e.emplace_back(rng() % k, k); // spanning tree
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t a = rng() % n, b = rng() % n;
            if (a != b) e.emplace_back(std::min(a, b), std::max(a, b));
        }
        AdjacencyGraph g(n, e);
        auto s = scaled_structure(g);
        const Eigen::MatrixXd p = pinv(Eigen::MatrixXd(s.precision));
        double acc = 0.0;
        for (Eigen::Index k = 0; k < p.rows(); ++k) acc += std::log(p(k, k));
        EXPECT_NEAR(std::exp(acc / double(n)), 1.0, 1e-6) << "graph " << rep << " with " << n << " nodes";
        for (Eigen::Index k = 0; k < p.rows(); ++k) EXPECT_NEAR(s.marginal_variances(k), p(k, k), 1e-8);
    }
}

TEST(ScaledStructure, InverseEigenvaluesMatchDense) {
    AdjacencyGraph g(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
    auto s = scaled_structure(g);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(s.precision)};
    std::vector<double> want;
    for (Eigen::Index k = 1; k < 4; ++k) want.push_back(1.0 / es.eigenvalues()(k));
    std::vector<double> got(s.inverse_eigenvalues.data(), s.inverse_eigenvalues.data() + s.inverse_eigenvalues.size());
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    ASSERT_EQ(got.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(got[k], want[k], 1e-10);
}

TEST(IcarScaling, SparseAndDenseVariancesAgree) {
    // a 15 x 15 lattice crosses the dense/sparse switch
    const std::size_t k = 15, n = k * k;
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < k; ++c) {
            if (c + 1 < k) e.emplace_back(r * k + c, r * k + c + 1);
            if (r + 1 < k) e.emplace_back(r * k + c, (r + 1) * k + c);
        }
    ASSERT_GT(n, kDenseIcarLimit);
    AdjacencyGraph g(n, e);
    const Eigen::VectorXd v = icar_marginal_variances(g);
    const Eigen::MatrixXd p = pinv(laplacian(n, e));
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(v(Eigen::Index(j)), p(Eigen::Index(j), Eigen::Index(j)), 1e-8);
}

TEST(Population, AggregatesToParents) {
    auto h = make_hierarchy({{"j1", "i1"}, {"j2", "i1"}});
    auto pop = make_population({{"j1", "all", 60}, {"j2", "all", 40}}, h);
    auto agg = aggregate_populations(pop, h);
    EXPECT_DOUBLE_EQ(agg.count(0, 0), 100.0);

    auto pop2 = make_population({{"j1", "a", 10}, {"j1", "b", 20}, {"j2", "a", 30}, {"j2", "b", 40}}, h);
    auto agg2 = aggregate_populations(pop2, h);
    EXPECT_DOUBLE_EQ(agg2.count(0, *agg2.group_index("a")), 40.0);
    EXPECT_DOUBLE_EQ(agg2.count(0, *agg2.group_index("b")), 60.0);
}

TEST(Population, ZeroCountsAreAllowed) {
    auto h = make_hierarchy({{"j1", "i1"}, {"j2", "i1"}});
    auto pop = make_population({{"j1", "all", 0}, {"j2", "all", 5}}, h);
    EXPECT_DOUBLE_EQ(aggregate_populations(pop, h).count(0, 0), 5.0);
}

TEST(Population, UnknownSubareaIsStructuralError) {
    auto h = make_hierarchy({{"j1", "i1"}});
    EXPECT_THROW(make_population({{"j9", "all", 1}}, h), StructuralError);
    PopulationTable t({"j9"}, {"all"});
    t.set(0, 0, 1.0);
    EXPECT_THROW(aggregate_populations(t, h), StructuralError);
}
