#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sae/errors.hpp"

namespace sae {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Two-level geography: subareas nested in coarse areas. Both levels are
/// ordered by identifier.
class AreaHierarchy {
public:
    AreaHierarchy() = default;

    std::size_t n_subareas() const { return subareas_.size(); }
    std::size_t n_coarse() const { return coarse_.size(); }
    const std::vector<std::string>& subareas() const { return subareas_; }
    const std::vector<std::string>& coarse_areas() const { return coarse_; }
    /// parent(j) is the coarse index containing subarea j.
    std::size_t parent(std::size_t j) const { return parent_[j]; }
    const std::vector<std::size_t>& parents() const { return parent_; }
    const std::vector<std::size_t>& children(std::size_t i) const { return children_[i]; }

    std::optional<std::size_t> subarea_index(const std::string& id) const {
        auto it = sub_index_.find(id);
        if (it == sub_index_.end()) return std::nullopt;
        return it->second;
    }
    std::optional<std::size_t> coarse_index(const std::string& id) const {
        auto it = coarse_index_.find(id);
        if (it == coarse_index_.end()) return std::nullopt;
        return it->second;
    }

    friend AreaHierarchy make_hierarchy(std::vector<std::pair<std::string, std::string>>,
                                        std::optional<std::vector<std::string>>);

private:
    std::vector<std::string> subareas_;
    std::vector<std::string> coarse_;
    std::vector<std::size_t> parent_;
    std::vector<std::vector<std::size_t>> children_;
    std::unordered_map<std::string, std::size_t> sub_index_;
    std::unordered_map<std::string, std::size_t> coarse_index_;
};

/// Builds and validates a hierarchy from (subarea_id, coarse_id) records. When
/// an explicit coarse list is given every parent must appear in it and every
/// listed coarse area needs at least one child.
inline AreaHierarchy make_hierarchy(std::vector<std::pair<std::string, std::string>> records,
                                    std::optional<std::vector<std::string>> coarse_list = std::nullopt) {
    AreaHierarchy h;
    std::sort(records.begin(), records.end());
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& [sub, par] = records[r];
        if (sub.empty()) throw StructuralError("empty subarea identifier");
        if (par.empty()) throw StructuralError("orphan subarea '" + sub + "' has no parent");
        if (r > 0 && records[r - 1].first == sub)
            throw StructuralError("duplicate subarea identifier '" + sub + "'");
    }
    std::vector<std::string> coarse;
    if (coarse_list) {
        coarse = *coarse_list;
        std::sort(coarse.begin(), coarse.end());
        if (std::adjacent_find(coarse.begin(), coarse.end()) != coarse.end())
            throw StructuralError("duplicate coarse area identifier '" +
                                  *std::adjacent_find(coarse.begin(), coarse.end()) + "'");
    } else {
        for (const auto& r : records) coarse.push_back(r.second);
        std::sort(coarse.begin(), coarse.end());
        coarse.erase(std::unique(coarse.begin(), coarse.end()), coarse.end());
    }
    h.coarse_ = coarse;
    for (std::size_t i = 0; i < coarse.size(); ++i) h.coarse_index_[coarse[i]] = i;
    h.children_.assign(coarse.size(), {});
    for (const auto& [sub, par] : records) {
        auto it = h.coarse_index_.find(par);
        if (it == h.coarse_index_.end())
            throw StructuralError("subarea '" + sub + "' references unknown coarse area '" + par + "'");
        std::size_t j = h.subareas_.size();
        h.subareas_.push_back(sub);
        h.sub_index_[sub] = j;
        h.parent_.push_back(it->second);
        h.children_[it->second].push_back(j);
    }
    for (std::size_t i = 0; i < coarse.size(); ++i)
        if (h.children_[i].empty())
            throw StructuralError("coarse area '" + coarse[i] + "' has no subareas");
    return h;
}

/// Undirected simple graph over the subareas of a hierarchy.
class AdjacencyGraph {
public:
    AdjacencyGraph() = default;
    AdjacencyGraph(std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> edges) : nbrs_(n) {
        for (auto& [a, b] : edges) {
            if (a >= n || b >= n) throw StructuralError("edge endpoint out of range");
            if (a == b) throw StructuralError("self-loop on node " + std::to_string(a));
            if (a > b) std::swap(a, b);
        }
        std::sort(edges.begin(), edges.end());
        edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
        edges_ = std::move(edges);
        for (auto [a, b] : edges_) {
            nbrs_[a].push_back(b);
            nbrs_[b].push_back(a);
        }
        for (auto& v : nbrs_) std::sort(v.begin(), v.end());
    }

    std::size_t n_nodes() const { return nbrs_.size(); }
    std::size_t n_edges() const { return edges_.size(); }
    /// Edges as (p, q) with p < q, sorted.
    const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
    const std::vector<std::size_t>& neighbors(std::size_t j) const { return nbrs_[j]; }
    std::size_t degree(std::size_t j) const { return nbrs_[j].size(); }
    std::vector<std::size_t> degrees() const {
        std::vector<std::size_t> d(n_nodes());
        for (std::size_t j = 0; j < n_nodes(); ++j) d[j] = degree(j);
        return d;
    }

    /// Unscaled ICAR structure matrix: degree on the diagonal, -1 per edge.
    SpMat laplacian() const {
        std::vector<Triplet> t;
        for (std::size_t j = 0; j < n_nodes(); ++j) t.emplace_back(j, j, double(degree(j)));
        for (auto [a, b] : edges_) {
            t.emplace_back(a, b, -1.0);
            t.emplace_back(b, a, -1.0);
        }
        SpMat q(n_nodes(), n_nodes());
        q.setFromTriplets(t.begin(), t.end());
        return q;
    }

    /// Connected components, each sorted, ordered by smallest member.
    std::vector<std::vector<std::size_t>> components() const {
        std::vector<int> seen(n_nodes(), 0);
        std::vector<std::vector<std::size_t>> out;
        for (std::size_t s = 0; s < n_nodes(); ++s) {
            if (seen[s]) continue;
            std::vector<std::size_t> comp;
            std::queue<std::size_t> q;
            q.push(s);
            seen[s] = 1;
            while (!q.empty()) {
                auto v = q.front();
                q.pop();
                comp.push_back(v);
                for (auto w : nbrs_[v])
                    if (!seen[w]) seen[w] = 1, q.push(w);
            }
            std::sort(comp.begin(), comp.end());
            out.push_back(std::move(comp));
        }
        return out;
    }

private:
    std::vector<std::vector<std::size_t>> nbrs_;
    std::vector<std::pair<std::size_t, std::size_t>> edges_;
};

struct SubareaRecord {
    std::string subarea_id;
    std::string coarse_id;
};
struct EdgeRecord {
    std::string a;
    std::string b;
};

/// Validated hierarchy plus adjacency, with nodes in hierarchy order.
inline std::pair<AreaHierarchy, AdjacencyGraph>
build_hierarchy(const std::vector<SubareaRecord>& subarea_table, const std::vector<EdgeRecord>& adjacency,
                std::optional<std::vector<std::string>> coarse_list = std::nullopt) {
    std::vector<std::pair<std::string, std::string>> recs;
    recs.reserve(subarea_table.size());
    for (const auto& r : subarea_table) recs.emplace_back(r.subarea_id, r.coarse_id);
    AreaHierarchy h = make_hierarchy(std::move(recs), std::move(coarse_list));
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& e : adjacency) {
        auto a = h.subarea_index(e.a);
        auto b = h.subarea_index(e.b);
        if (!a) throw StructuralError("edge endpoint '" + e.a + "' is not a subarea");
        if (!b) throw StructuralError("edge endpoint '" + e.b + "' is not a subarea");
        if (*a == *b) throw StructuralError("self-loop on subarea '" + e.a + "'");
        edges.emplace_back(*a, *b);
    }
    return {std::move(h), AdjacencyGraph(h.n_subareas(), std::move(edges))};
}

/// Population counts N_{area, group}. Cells never supplied are reported as
/// absent by has(); their count reads as zero.
class PopulationTable {
public:
    PopulationTable() = default;
    PopulationTable(std::vector<std::string> areas, std::vector<std::string> groups)
        : areas_(std::move(areas)), groups_(std::move(groups)),
          counts_(areas_.size() * groups_.size(), 0.0), present_(areas_.size() * groups_.size(), 0) {
        for (std::size_t i = 0; i < areas_.size(); ++i) area_index_[areas_[i]] = i;
        for (std::size_t g = 0; g < groups_.size(); ++g) group_index_[groups_[g]] = g;
    }

    const std::vector<std::string>& areas() const { return areas_; }
    const std::vector<std::string>& groups() const { return groups_; }
    std::size_t n_areas() const { return areas_.size(); }
    std::size_t n_groups() const { return groups_.size(); }

    void set(std::size_t area, std::size_t group, double n) {
        if (!(n >= 0.0) || !std::isfinite(n)) throw DataError("population counts must be finite and non-negative");
        counts_[area * groups_.size() + group] = n;
        present_[area * groups_.size() + group] = 1;
    }
    void add(std::size_t area, std::size_t group, double n) {
        set(area, group, count(area, group) + n);
    }
    double count(std::size_t area, std::size_t group) const { return counts_[area * groups_.size() + group]; }
    bool has(std::size_t area, std::size_t group) const { return present_[area * groups_.size() + group] != 0; }
    double total(std::size_t area) const {
        double s = 0.0;
        for (std::size_t g = 0; g < groups_.size(); ++g) s += count(area, g);
        return s;
    }
    double grand_total() const {
        double s = 0.0;
        for (double c : counts_) s += c;
        return s;
    }
    std::optional<std::size_t> area_index(const std::string& id) const {
        auto it = area_index_.find(id);
        return it == area_index_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
    }
    std::optional<std::size_t> group_index(const std::string& id) const {
        auto it = group_index_.find(id);
        return it == group_index_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
    }

private:
    std::vector<std::string> areas_;
    std::vector<std::string> groups_;
    std::vector<double> counts_;
    std::vector<char> present_;
    std::unordered_map<std::string, std::size_t> area_index_;
    std::unordered_map<std::string, std::size_t> group_index_;
};

struct PopulationRecord {
    std::string subarea_id;
    std::string group;
    double count;
};

/// Subarea-level table over every subarea of the hierarchy; groups sorted.
inline PopulationTable make_population(const std::vector<PopulationRecord>& records, const AreaHierarchy& hier) {
    std::vector<std::string> groups;
    for (const auto& r : records) groups.push_back(r.group);
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    PopulationTable t(hier.subareas(), groups);
    for (const auto& r : records) {
        auto j = hier.subarea_index(r.subarea_id);
        if (!j) throw StructuralError("population row references unknown subarea '" + r.subarea_id + "'");
        auto g = *t.group_index(r.group);
        if (t.has(*j, g)) throw DataError("duplicate population cell (" + r.subarea_id + ", " + r.group + ")");
        t.set(*j, g, r.count);
    }
    return t;
}

/// Sums subarea counts into their parents: N_{i,a} = sum over children of N_{j,a}.
inline PopulationTable aggregate_populations(const PopulationTable& pop, const AreaHierarchy& hier) {
    PopulationTable out(hier.coarse_areas(), pop.groups());
    for (std::size_t r = 0; r < pop.n_areas(); ++r) {
        auto j = hier.subarea_index(pop.areas()[r]);
        if (!j) throw StructuralError("population references unknown subarea '" + pop.areas()[r] + "'");
        for (std::size_t g = 0; g < pop.n_groups(); ++g)
            if (pop.has(r, g)) out.add(hier.parent(*j), g, pop.count(r, g));
    }
    return out;
}

/// Scaled ICAR structure. Non-singleton components carry a sum-to-zero
/// constraint; singleton nodes have zero rows here and are given unit-variance
/// noise by the model.
struct ScaledStructure {
    SpMat precision;
    double scaling_factor = 1.0;
    std::vector<std::vector<std::size_t>> components;
    std::vector<std::size_t> component_of;
    std::vector<char> singleton;
    /// Marginal variances of the constrained generalized inverse of `precision`
    /// (1 for singletons).
    Eigen::VectorXd marginal_variances;
    /// Non-zero eigenvalues of the constrained generalized inverse of `precision`,
    /// used by the PC prior on the mixing proportion.
    Eigen::VectorXd inverse_eigenvalues;

    /// Components that carry a sum-to-zero constraint.
    std::vector<std::size_t> constrained_components() const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < components.size(); ++c)
            if (components[c].size() > 1) out.push_back(c);
        return out;
    }
};

namespace detail {

inline SpMat component_laplacian(const AdjacencyGraph& g, const std::vector<std::size_t>& comp) {
    std::unordered_map<std::size_t, std::size_t> local;
    for (std::size_t k = 0; k < comp.size(); ++k) local[comp[k]] = k;
    std::vector<Triplet> t;
    for (std::size_t k = 0; k < comp.size(); ++k) {
        t.emplace_back(k, k, double(g.degree(comp[k])));
        for (auto w : g.neighbors(comp[k])) t.emplace_back(k, local.at(w), -1.0);
    }
    SpMat q(comp.size(), comp.size());
    q.setFromTriplets(t.begin(), t.end());
    return q;
}

/// Diagonal of the Moore-Penrose inverse of a connected Laplacian via a dense
/// eigendecomposition.
inline Eigen::VectorXd pinv_diagonal_dense(const SpMat& lap) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(lap)};
    const auto& ev = es.eigenvalues();
    const auto& U = es.eigenvectors();
    Eigen::VectorXd d = Eigen::VectorXd::Zero(lap.rows());
    // The smallest eigenvalue is the constant null vector of a connected graph.
    for (Eigen::Index k = 1; k < ev.size(); ++k) d += U.col(k).cwiseAbs2() / ev(k);
    return d;
}

/// Same diagonal via sparse Cholesky of the grounded Laplacian M = L_r^{-1}
/// (node 0 removed) and the sum-to-zero correction
/// L+ = (I - J/n) M (I - J/n).
inline Eigen::VectorXd pinv_diagonal_sparse(const SpMat& lap) {
    const Eigen::Index n = lap.rows();
    SpMat red = lap.bottomRightCorner(n - 1, n - 1);
    Eigen::SimplicialLDLT<SpMat> ldlt(red);
    if (ldlt.info() != Eigen::Success) throw NumericError("grounded Laplacian factorization failed");
    Eigen::VectorXd mdiag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd rowsum = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(n - 1);
    Eigen::VectorXd m1 = ldlt.solve(ones);
    rowsum.tail(n - 1) = m1;
    const double total = m1.sum();
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n - 1);
    for (Eigen::Index k = 0; k < n - 1; ++k) {
        e.setZero();
        e(k) = 1.0;
        mdiag(k + 1) = ldlt.solve(e)(k);
    }
    const double dn = double(n);
    return (mdiag - 2.0 * rowsum / dn).array() + total / (dn * dn);
}

} // namespace detail

/// Threshold below which generalized-inverse diagonals use a dense
/// eigendecomposition.
inline constexpr std::size_t kDenseIcarLimit = 200;

/// Unscaled marginal variances of the per-component sum-to-zero constrained
/// ICAR (1 for singletons).
inline Eigen::VectorXd icar_marginal_variances(const AdjacencyGraph& graph) {
    Eigen::VectorXd v = Eigen::VectorXd::Ones(graph.n_nodes());
    for (const auto& comp : graph.components()) {
        if (comp.size() < 2) continue;
        SpMat lap = detail::component_laplacian(graph, comp);
        Eigen::VectorXd d = comp.size() < kDenseIcarLimit ? detail::pinv_diagonal_dense(lap)
                                                          : detail::pinv_diagonal_sparse(lap);
        for (std::size_t k = 0; k < comp.size(); ++k) v(comp[k]) = d(k);
    }
    return v;
}

/// Geometric mean of the constrained ICAR marginal variances over nodes in
/// non-singleton components. Dividing those variances by it gives geometric
/// mean one; singletons keep unit variance and do not enter the mean.
inline double icar_scaling_factor(const AdjacencyGraph& graph) {
    if (graph.n_nodes() == 0) throw std::invalid_argument("icar_scaling_factor: empty graph");
    Eigen::VectorXd v = icar_marginal_variances(graph);
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& comp : graph.components()) {
        if (comp.size() < 2) continue;
        for (auto j : comp) acc += std::log(v(j)), ++n;
    }
    return n == 0 ? 1.0 : std::exp(acc / double(n));
}

inline ScaledStructure scaled_structure(const AdjacencyGraph& graph) {
    if (graph.n_nodes() == 0) throw std::invalid_argument("scaled_structure: empty graph");
    ScaledStructure s;
    s.components = graph.components();
    s.component_of.assign(graph.n_nodes(), 0);
    s.singleton.assign(graph.n_nodes(), 0);
    for (std::size_t c = 0; c < s.components.size(); ++c)
        for (auto j : s.components[c]) {
            s.component_of[j] = c;
            s.singleton[j] = s.components[c].size() == 1;
        }
    Eigen::VectorXd v = icar_marginal_variances(graph);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < graph.n_nodes(); ++j)
        if (!s.singleton[j]) acc += std::log(v(j)), ++n;
    s.scaling_factor = n == 0 ? 1.0 : std::exp(acc / double(n));
    // Variances scale inversely with precision, so multiplying Q by the factor
    // divides every marginal variance by it.
    s.precision = graph.laplacian() * s.scaling_factor;
    s.marginal_variances = v;
    for (std::size_t j = 0; j < graph.n_nodes(); ++j)
        if (!s.singleton[j]) s.marginal_variances(j) /= s.scaling_factor;

    std::vector<double> inv_eig;
    for (const auto& comp : s.components) {
        if (comp.size() < 2) continue;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
            Eigen::MatrixXd(detail::component_laplacian(graph, comp)) * s.scaling_factor, Eigen::EigenvaluesOnly);
        for (Eigen::Index k = 1; k < es.eigenvalues().size(); ++k) inv_eig.push_back(1.0 / es.eigenvalues()(k));
    }
    s.inverse_eigenvalues = Eigen::Map<Eigen::VectorXd>(inv_eig.data(), Eigen::Index(inv_eig.size()));
    return s;
}

} // namespace sae
