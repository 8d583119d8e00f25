#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sae/direct.hpp"
#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/link.hpp"
#include "sae/rng.hpp"

namespace sae::sim {

inline constexpr std::size_t kAges = 6;
inline const std::array<std::string, kAges> kAgeLabels = {"15-19", "20-24", "25-29", "30-34", "35-39", "40-44"};
inline const std::array<std::string, 2> kEducLabels = {"low", "high"};
inline const std::array<std::string, 2> kUrbanLabels = {"R", "U"};
/// Share of women by age group, declining with age.
inline constexpr std::array<double, kAges> kAgeShares = {0.20, 0.19, 0.17, 0.16, 0.15, 0.13};

// ---------------------------------------------------------------------------
// Geography

struct Geography {
    AreaHierarchy hier;
    AdjacencyGraph graph;
    std::size_t rows = 0, cols = 0;               // lattice dimensions
    std::vector<std::pair<std::size_t, std::size_t>> cell; // (row, col) per subarea
};

namespace detail {
inline std::size_t largest_divisor_at_most(std::size_t n, double limit) {
    std::size_t best = 1;
    for (std::size_t d = 1; d <= n; ++d)
        if (n % d == 0 && double(d) <= limit) best = d;
    return best;
}

inline std::string padded(char prefix, std::size_t k, std::size_t total) {
    const std::size_t width = std::to_string(total).size();
    std::string s = std::to_string(k + 1);
    return std::string(1, prefix) + std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}
} // namespace detail

/// Coarse areas are blocks of a lattice of subareas with rook adjacency.
/// Optional jitter adds seeded diagonal edges.
inline Geography generate_geography(std::size_t n_coarse, std::size_t children, std::uint64_t seed = 0,
                                    double jitter = 0.0) {
    if (n_coarse == 0 || children == 0) throw std::invalid_argument("geography needs positive counts");
    const std::size_t bh = detail::largest_divisor_at_most(children, std::sqrt(double(children)));
    const std::size_t bw = children / bh;
    const std::size_t cc = detail::largest_divisor_at_most(n_coarse, std::sqrt(double(n_coarse)));
    const std::size_t cr = n_coarse / cc;
    Geography g;
    g.rows = cr * bh;
    g.cols = cc * bw;
    const std::size_t n = n_coarse * children;
    std::vector<std::pair<std::string, std::string>> records;
    std::vector<std::string> coarse;
    std::vector<std::vector<std::size_t>> at(g.rows, std::vector<std::size_t>(g.cols));
    g.cell.resize(n);
    for (std::size_t i = 0; i < n_coarse; ++i) {
        coarse.push_back(detail::padded('A', i, n_coarse));
        const std::size_t br = i / cc, bc = i % cc;
        for (std::size_t k = 0; k < children; ++k) {
            const std::size_t j = i * children + k;
            const std::size_t r = br * bh + k / bw, c = bc * bw + k % bw;
            g.cell[j] = {r, c};
            at[r][c] = j;
            records.emplace_back(detail::padded('S', j, n), coarse.back());
        }
    }
    g.hier = make_hierarchy(records, coarse);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    auto rng = make_rng(seed, Stream::geography);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            if (c + 1 < g.cols) edges.emplace_back(at[r][c], at[r][c + 1]);
            if (r + 1 < g.rows) edges.emplace_back(at[r][c], at[r + 1][c]);
            if (jitter > 0.0 && r + 1 < g.rows && c + 1 < g.cols && unif(rng) < jitter)
                edges.emplace_back(at[r][c], at[r + 1][c + 1]);
        }
    // Subarea ids sort in generation order, so lattice indices are hierarchy indices.
    g.graph = AdjacencyGraph(n, std::move(edges));
    return g;
}

// ---------------------------------------------------------------------------
// Area-level marginals and covariates

struct AreaMarginals {
    Eigen::MatrixXd observed;   // ntl, health, hh (standardized)
    Eigen::MatrixXd unobserved; // ndvi, mobile (standardized)
    Eigen::VectorXd urban_share;
    Eigen::VectorXd educ_share; // women with secondary or higher education
    std::vector<long> women;    // women aged 15-44 per subarea
    std::vector<std::string> observed_names{"ntl", "health", "hh"};
};

namespace detail {
inline Eigen::VectorXd standardize(Eigen::VectorXd v) {
    const double m = v.mean();
    const double sd = std::sqrt((v.array() - m).square().sum() / std::max<double>(1.0, double(v.size() - 1)));
    return sd > 0.0 ? Eigen::VectorXd((v.array() - m) / sd) : Eigen::VectorXd(v.array() - m);
}
} // namespace detail

/// Spatially autocorrelated Gaussian fields with covariance exp(-d/2) in
/// lattice distance; each column is standardized.
inline Eigen::MatrixXd spatial_fields(const Geography& g, std::size_t k, Rng& rng) {
    const std::size_t n = g.cell.size();
    Eigen::MatrixXd cov(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
            const double dr = double(g.cell[a].first) - double(g.cell[b].first);
            const double dc = double(g.cell[a].second) - double(g.cell[b].second);
            cov(Eigen::Index(a), Eigen::Index(b)) = std::exp(-std::sqrt(dr * dr + dc * dc) / 2.0);
        }
    cov.diagonal().array() += 1e-9;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    std::normal_distribution<double> norm(0.0, 1.0);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
        Eigen::VectorXd z(static_cast<Eigen::Index>(n));
        for (auto& v : z) v = norm(rng);
        out.col(Eigen::Index(c)) = detail::standardize(llt.matrixL() * z);
    }
    return out;
}

struct MarginalOptions {
    double women_per_subarea = 3000.0;
    /// Share of the urbanicity and education-field variance that is
    /// subarea-specific rather than spatially smooth.
    double local_share = 0.0;
    /// Slope of the urban-share logit on the standardized urbanicity field.
    double urban_spread = 2.0;
};

inline AreaMarginals generate_marginals(const Geography& g, std::uint64_t seed, const MarginalOptions& opt = {}) {
    auto rng = make_rng(seed, Stream::covariates);
    const Eigen::MatrixXd f = spatial_fields(g, 7, rng);
    AreaMarginals m;
    const Eigen::Index n = f.rows();
    // urbanicity drives night lights and education, as in real settings
    std::normal_distribution<double> norm(0.0, 1.0);
    auto local = [&](const Eigen::VectorXd& smooth) {
        Eigen::VectorXd z(smooth.size());
        for (auto& v : z) v = norm(rng);
        return detail::standardize(std::sqrt(1.0 - opt.local_share) * smooth + std::sqrt(opt.local_share) * z);
    };
    const Eigen::VectorXd urb = local(f.col(0));
    const Eigen::VectorXd edu = local(f.col(6));
    m.urban_share = (-0.8 + opt.urban_spread * urb.array()).unaryExpr([](double x) { return expit(x); });
    m.observed.resize(n, 3);
    m.observed.col(0) = detail::standardize(0.7 * urb + std::sqrt(0.51) * f.col(1));
    m.observed.col(1) = f.col(2);
    m.observed.col(2) = f.col(3);
    m.unobserved.resize(n, 2);
    m.unobserved.col(0) = f.col(4);
    m.unobserved.col(1) = f.col(5);
    m.educ_share = (0.5 * urb.array() + 0.7 * edu.array()).unaryExpr([](double x) { return expit(x); });
    auto mrng = make_rng(seed, Stream::marginals);
    std::lognormal_distribution<double> size(0.0, 0.25);
    for (Eigen::Index j = 0; j < n; ++j) m.women.push_back(std::max(50L, std::lround(opt.women_per_subarea * size(mrng))));
    return m;
}

// ---------------------------------------------------------------------------
// Scenarios

struct Coefficients {
    double alpha = 0.0;
    double ntl = 0.0, health = 0.0, hh = 0.0; // observed area covariates
    double ndvi = 0.0, mobile = 0.0;          // unobserved area covariates
    double educ = 0.0;                        // individual secondary-education effect
    std::array<double, kAges> age{};
};

struct ScenarioConfig {
    int id = 1;
    Coefficients urban, rural;
    double sd_individual = 0.05;
    double sd_cluster = 0.05;
    double sd_area = 0.0;
    double exposure_months = 48.0;

    /// Parameter values of the four published scenarios.
    static ScenarioConfig preset(int id) {
        if (id < 1 || id > 4) throw ValidationError("scenario", "unknown scenario " + std::to_string(id));
        ScenarioConfig s;
        s.id = id;
        Coefficients c;
        c.ntl = -0.08;
        c.health = 0.08;
        c.hh = 0.08;
        c.educ = -0.6;
        c.age = {-0.3, 0.6, 0.5, 0.3, -0.2, -0.9};
        if (id >= 2) {
            c.ndvi = 0.08;
            c.mobile = -0.08;
        }
        s.urban = c;
        s.rural = c;
        s.urban.alpha = -2.1;
        s.rural.alpha = -1.8;
        if (id >= 3) s.sd_area = 0.12;
        if (id == 4) {
            s.urban = {-2.10, -0.10, 0.10, 0.06, 0.06, -0.06, -0.50, {-0.4, 0.5, 0.5, 0.3, -0.1, -0.8}};
            s.rural = {-1.80, -0.06, 0.06, 0.10, 0.10, -0.10, -0.70, {-0.2, 0.6, 0.4, 0.3, -0.2, -0.9}};
        }
        return s;
    }

    void validate() const {
        if (id < 1 || id > 4) throw ValidationError("scenario", "unknown scenario " + std::to_string(id));
        for (double v : {sd_individual, sd_cluster, sd_area})
            if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("scenario", "standard deviations must be >= 0");
        if (!(exposure_months > 0.0)) throw ValidationError("scenario", "exposure must be positive");
    }
};

// ---------------------------------------------------------------------------
// Master frame

struct Woman {
    std::uint32_t subarea;
    std::uint32_t cluster;
    std::uint8_t age;
    std::uint8_t educ;  // 1 = secondary or higher
    std::uint8_t urban; // 1 = urban
};

struct Cluster {
    std::uint32_t subarea;
    std::uint32_t stratum;
    std::uint8_t urban;
    std::vector<std::uint32_t> members; // women indices
};

struct Stratum {
    std::size_t coarse;
    std::uint8_t urban;
    std::vector<std::uint32_t> clusters;
    long size = 0;
    std::string id;
};

inline std::size_t group_index(std::size_t age, std::size_t educ, std::size_t urban) {
    return (age * 2 + educ) * 2 + urban;
}
inline std::string group_label(std::size_t age, std::size_t educ, std::size_t urban) {
    return kAgeLabels[age] + "|" + kEducLabels[educ] + "|" + kUrbanLabels[urban];
}
inline std::vector<std::string> group_labels() {
    std::vector<std::string> out;
    for (std::size_t a = 0; a < kAges; ++a)
        for (std::size_t e = 0; e < 2; ++e)
            for (std::size_t u = 0; u < 2; ++u) out.push_back(group_label(a, e, u));
    return out;
}

struct MasterFrame {
    std::vector<Woman> women;
    std::vector<Cluster> clusters;
    std::vector<Stratum> strata;
    /// Women by subarea x (age|educ|urban) cell.
    PopulationTable population;
};

namespace detail {
/// Integer allocation of `total` proportional to `w` by largest remainders.
inline std::vector<long> largest_remainder(long total, const std::vector<double>& w) {
    std::vector<long> out(w.size(), 0);
    const double sw = std::accumulate(w.begin(), w.end(), 0.0);
    if (total <= 0 || !(sw > 0.0)) return out;
    std::vector<std::pair<double, std::size_t>> rem;
    long used = 0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double exact = double(total) * w[k] / sw;
        out[k] = long(std::floor(exact));
        used += out[k];
        rem.emplace_back(exact - double(out[k]), k);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (long k = 0; k < total - used; ++k) ++out[rem[std::size_t(k) % rem.size()].second];
    return out;
}
} // namespace detail

struct FrameOptions {
    double target_ea_size = 120.0;
    double ea_size_sd = 0.2; // sd of log relative EA size
};

/// Expands subarea x age x urbanicity x education cells into women, then
/// forms EAs within subarea x urbanicity cells.
inline MasterFrame generate_population(const Geography& g, const AreaMarginals& m, std::uint64_t frame_seed,
                                       const FrameOptions& opt = {}) {
    MasterFrame f;
    const std::size_t nj = g.hier.n_subareas();
    f.population = PopulationTable(g.hier.subareas(), group_labels());
    auto rng = make_rng(frame_seed, Stream::frame);
    std::lognormal_distribution<double> rel_size(0.0, opt.ea_size_sd);

    // strata: coarse x urban
    std::vector<std::vector<std::size_t>> stratum_of(g.hier.n_coarse(), std::vector<std::size_t>(2));
    for (std::size_t i = 0; i < g.hier.n_coarse(); ++i)
        for (std::uint8_t u = 0; u < 2; ++u) {
            stratum_of[i][u] = f.strata.size();
            f.strata.push_back({i, u, {}, 0, g.hier.coarse_areas()[i] + "-" + kUrbanLabels[u]});
        }

    for (std::size_t j = 0; j < nj; ++j) {
        const double us = m.urban_share(Eigen::Index(j)), es = m.educ_share(Eigen::Index(j));
        const double lo = logit(std::clamp(es, 1e-6, 1.0 - 1e-6));
        const std::array<double, 2> educ_by_urban = {expit(lo - 0.4), expit(lo + 0.4)};
        std::vector<double> w(kAges * 4);
        for (std::size_t a = 0; a < kAges; ++a)
            for (std::size_t e = 0; e < 2; ++e)
                for (std::size_t u = 0; u < 2; ++u) {
                    const double pu = u ? us : 1.0 - us;
                    const double pe = e ? educ_by_urban[u] : 1.0 - educ_by_urban[u];
                    w[group_index(a, e, u)] = kAgeShares[a] * pu * pe;
                }
        const auto counts = detail::largest_remainder(m.women[j], w);
        for (std::size_t c = 0; c < counts.size(); ++c) f.population.set(j, c, double(counts[c]));

        for (std::uint8_t u = 0; u < 2; ++u) {
            std::vector<std::uint32_t> cell;
            for (std::size_t a = 0; a < kAges; ++a)
                for (std::size_t e = 0; e < 2; ++e)
                    for (long k = 0; k < counts[group_index(a, e, u)]; ++k) {
                        cell.push_back(std::uint32_t(f.women.size()));
                        f.women.push_back({std::uint32_t(j), 0, std::uint8_t(a), std::uint8_t(e), u});
                    }
            if (cell.empty()) continue;
            std::shuffle(cell.begin(), cell.end(), rng);
            const long n_cell = long(cell.size());
            const long n_ea = std::clamp(std::lround(double(n_cell) / opt.target_ea_size), 1L, n_cell);
            std::vector<double> s(static_cast<std::size_t>(n_ea));
            for (auto& v : s) v = rel_size(rng);
            auto sizes = detail::largest_remainder(n_cell - n_ea, s);
            const std::size_t h = stratum_of[g.hier.parent(j)][u];
            std::size_t pos = 0;
            for (long e = 0; e < n_ea; ++e) {
                Cluster cl{std::uint32_t(j), std::uint32_t(h), u, {}};
                const long sz = sizes[std::size_t(e)] + 1;
                for (long k = 0; k < sz; ++k) {
                    const auto w_idx = cell[pos++];
                    f.women[w_idx].cluster = std::uint32_t(f.clusters.size());
                    cl.members.push_back(w_idx);
                }
                std::sort(cl.members.begin(), cl.members.end());
                f.strata[h].clusters.push_back(std::uint32_t(f.clusters.size()));
                f.strata[h].size += sz;
                f.clusters.push_back(std::move(cl));
            }
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// Outcomes

struct Outcomes {
    std::vector<double> rate;   // per woman-year
    std::vector<int> births;
    std::vector<double> exposure_months;
    /// Realized truth per subarea: births per woman-year over the full frame.
    std::vector<double> truth;
    std::vector<double> truth_gfr; // per 1,000 woman-years
};

/// Individual log-rate: alpha_s + delta_age + delta_educ + beta x_j + beta_unobs x_unobs_j + e_j + e_k + e_c.
inline Outcomes simulate_outcomes(const MasterFrame& f, const AreaMarginals& m, const ScenarioConfig& cfg,
                                  std::uint64_t seed) {
    cfg.validate();
    Outcomes o;
    const std::size_t nw = f.women.size(), nj = std::size_t(m.observed.rows());
    auto rk = make_rng(seed, Stream::individual_effects);
    auto rc = make_rng(seed, Stream::cluster_effects);
    auto rj = make_rng(seed, Stream::area_effects);
    auto ry = make_rng(seed, Stream::outcomes);
    std::normal_distribution<double> norm(0.0, 1.0);
    std::vector<double> ej(nj), ec(f.clusters.size());
    for (auto& v : ej) v = cfg.sd_area * norm(rj);
    for (auto& v : ec) v = cfg.sd_cluster * norm(rc);
    o.rate.resize(nw);
    o.births.resize(nw);
    o.exposure_months.assign(nw, cfg.exposure_months);
    const double years = cfg.exposure_months / 12.0;
    std::vector<double> b(nj, 0.0), e(nj, 0.0);
    for (std::size_t k = 0; k < nw; ++k) {
        const auto& w = f.women[k];
        const Coefficients& c = w.urban ? cfg.urban : cfg.rural;
        const Eigen::Index j = w.subarea;
        const double s1 = c.alpha + c.age[w.age] + (w.educ ? c.educ : 0.0) + c.ntl * m.observed(j, 0) +
                          c.health * m.observed(j, 1) + c.hh * m.observed(j, 2);
        const double unobs = c.ndvi * m.unobserved(j, 0) + c.mobile * m.unobserved(j, 1);
        const double eta = s1 + unobs + ej[std::size_t(j)] + cfg.sd_individual * norm(rk) + ec[w.cluster];
        o.rate[k] = std::exp(eta);
        const double mean = years * o.rate[k];
        o.births[k] = mean > 0.0 ? std::poisson_distribution<int>(mean)(ry) : 0;
        b[std::size_t(j)] += o.births[k];
        e[std::size_t(j)] += o.exposure_months[k];
    }
    for (std::size_t j = 0; j < nj; ++j) {
        const double births[] = {b[j]};
        const double expo[] = {e[j]};
        o.truth_gfr.push_back(gfr(births, expo));
        o.truth.push_back(o.truth_gfr.back() / 1000.0);
    }
    return o;
}

// ---------------------------------------------------------------------------
// Two-stage sampling

/// Non-negative rational with reduced terms; inclusion probabilities and
/// weights are exact reciprocals.
struct Rational {
    std::int64_t num = 0, den = 1;

    static Rational make(std::int64_t n, std::int64_t d) {
        if (d <= 0 || n < 0) throw std::invalid_argument("rational needs n >= 0, d > 0");
        const auto g = std::gcd(n, d);
        return g ? Rational{n / g, d / g} : Rational{0, 1};
    }
    Rational operator*(const Rational& o) const {
        const auto g1 = std::gcd(num, o.den), g2 = std::gcd(o.num, den);
        return make((num / (g1 ? g1 : 1)) * (o.num / (g2 ? g2 : 1)), (den / (g2 ? g2 : 1)) * (o.den / (g1 ? g1 : 1)));
    }
    Rational inverse() const { return make(den, num); }
    double value() const { return double(num) / double(den); }
    bool operator==(const Rational&) const = default;
};

struct SampledUnit {
    std::uint32_t woman;
    std::uint32_t cluster;
    std::uint32_t stratum;
    Rational pi1, pi2, pi, weight;
};

struct SampleDraw {
    std::vector<SampledUnit> units;
    std::vector<std::uint32_t> clusters;    // selected clusters
    std::vector<Rational> cluster_pi1;      // first-stage probability of every frame cluster
};

/// First-stage probabilities n N_c / N with certainty selections removed
/// iteratively; returns (pi1 per listed cluster, certainty flags).
inline std::pair<std::vector<Rational>, std::vector<char>> pps_probabilities(const std::vector<long>& sizes, long n) {
    const std::size_t k = sizes.size();
    std::vector<char> certain(k, 0);
    std::vector<Rational> pi(k);
    n = std::min<long>(n, long(k));
    bool changed = true;
    while (changed) {
        changed = false;
        long rem_n = n, rem_size = 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (certain[c]) --rem_n;
            else rem_size += sizes[c];
        }
        if (rem_n <= 0) break;
        for (std::size_t c = 0; c < k; ++c)
            if (!certain[c] && rem_n * sizes[c] >= rem_size) certain[c] = 1, changed = true;
    }
    long rem_n = n, rem_size = 0;
    for (std::size_t c = 0; c < k; ++c) {
        if (certain[c]) --rem_n;
        else rem_size += sizes[c];
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (certain[c]) pi[c] = Rational{1, 1};
        else if (rem_n <= 0 || rem_size == 0) pi[c] = Rational{0, 1};
        else pi[c] = Rational::make(rem_n * sizes[c], rem_size);
    }
    return {pi, certain};
}

/// Systematic PPS on a randomly permuted list. Uses integer arithmetic so the
/// selection probability of each non-certainty cluster is exactly n N_c / N.
inline std::vector<std::size_t> systematic_pps(const std::vector<long>& sizes, long n, Rng& rng) {
    const auto [pi, certain] = pps_probabilities(sizes, n);
    std::vector<std::size_t> chosen, pool;
    long rem_n = std::min<long>(n, long(sizes.size())), total = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
        if (certain[c]) chosen.push_back(c), --rem_n;
        else pool.push_back(c), total += sizes[c];
    }
    if (rem_n > 0 && total > 0) {
        std::shuffle(pool.begin(), pool.end(), rng);
        std::uniform_int_distribution<long> start(0, total - 1);
        const long u = start(rng);
        // selection points (u + k total) / rem_n, compared in units scaled by rem_n
        long cum = 0, k = 0;
        for (auto c : pool) {
            const long lo = cum * rem_n, hi = (cum + sizes[c]) * rem_n;
            while (k < rem_n && u + k * total < hi) {
                if (u + k * total >= lo) chosen.push_back(c);
                ++k;
            }
            cum += sizes[c];
        }
    }
    std::sort(chosen.begin(), chosen.end());
    chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
    return chosen;
}

/// Stratified two-stage design: PPS of n_h clusters per stratum, then SRSWOR
/// of m women per selected cluster (take-all when smaller).
inline SampleDraw draw_sample(const MasterFrame& f, long n_h, long m, Rng& rng) {
    if (n_h <= 0 || m <= 0) throw std::invalid_argument("sample sizes must be positive");
    SampleDraw s;
    s.cluster_pi1.assign(f.clusters.size(), Rational{0, 1});
    for (std::size_t h = 0; h < f.strata.size(); ++h) {
        const auto& st = f.strata[h];
        if (st.clusters.empty()) continue;
        std::vector<long> sizes;
        for (auto c : st.clusters) sizes.push_back(long(f.clusters[c].members.size()));
        const auto [pi1, certain] = pps_probabilities(sizes, n_h);
        for (std::size_t k = 0; k < st.clusters.size(); ++k) s.cluster_pi1[st.clusters[k]] = pi1[k];
        for (auto k : systematic_pps(sizes, n_h, rng)) {
            const auto cid = st.clusters[k];
            s.clusters.push_back(cid);
            const auto& mem = f.clusters[cid].members;
            const long nc = long(mem.size());
            std::vector<std::uint32_t> pick = mem;
            Rational pi2{1, 1};
            if (nc > m) {
                for (long r = 0; r < m; ++r) {
                    std::uniform_int_distribution<long> d(r, nc - 1);
                    std::swap(pick[std::size_t(r)], pick[std::size_t(d(rng))]);
                }
                pick.resize(std::size_t(m));
                std::sort(pick.begin(), pick.end());
                pi2 = Rational::make(m, nc);
            }
            const Rational pi = pi1[k] * pi2;
            for (auto w : pick) s.units.push_back({w, cid, std::uint32_t(h), pi1[k], pi2, pi, pi.inverse()});
        }
    }
    return s;
}

/// Survey records from a sample, indexed at the fine or coarse level.
/// Groups are age|educ|urban labels; exposure is in woman-years.
inline SurveyDataset to_survey(const Geography& g, const MasterFrame& f, const SampleDraw& s, const Outcomes& o,
                               GeoLevel level) {
    SurveyDataset d;
    d.geo_level = level;
    d.kind = OutcomeKind::rate;
    d.records.reserve(s.units.size());
    for (const auto& u : s.units) {
        const auto& w = f.women[u.woman];
        SurveyRecord r;
        r.unit_id = "w" + std::to_string(u.woman);
        r.cluster_id = "c" + std::to_string(u.cluster);
        r.stratum_id = f.strata[u.stratum].id;
        r.area_id = level == GeoLevel::fine ? g.hier.subareas()[w.subarea] : g.hier.coarse_areas()[g.hier.parent(w.subarea)];
        r.group = group_label(w.age, w.educ, w.urban);
        r.weight = u.weight.value();
        r.outcome = o.births[u.woman];
        r.exposure = o.exposure_months[u.woman] / 12.0;
        d.records.push_back(std::move(r));
    }
    return d;
}

} // namespace sae::sim
