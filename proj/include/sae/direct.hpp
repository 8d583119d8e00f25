#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/link.hpp"

namespace sae {

enum class GeoLevel { fine, coarse };
/// Prevalence: outcome/exposure are successes/trials-style with ratio sum(wy)/sum(w).
/// Rate: outcome counts over exposure, ratio sum(wy)/sum(wE).
enum class OutcomeKind { prevalence, rate };

inline std::string to_string(GeoLevel g) { return g == GeoLevel::fine ? "fine" : "coarse"; }

struct SurveyRecord {
    std::string unit_id;
    std::string cluster_id;
    std::string stratum_id;
    std::string area_id;
    std::string group;
    double weight = 1.0;
    double outcome = 0.0;
    double exposure = 1.0; // trials for binomial-type outcomes
};

struct SurveyDataset {
    std::vector<SurveyRecord> records;
    GeoLevel geo_level = GeoLevel::fine;
    OutcomeKind kind = OutcomeKind::prevalence;

    /// Checks weights, exposures and that every area id exists at the declared level.
    void validate(const AreaHierarchy& hier) const {
        for (std::size_t r = 0; r < records.size(); ++r) {
            const auto& rec = records[r];
            const std::string where = "survey record " + std::to_string(r + 1) + " (unit '" + rec.unit_id + "')";
            if (!std::isfinite(rec.weight) || rec.weight < 0.0)
                throw DataError(where + ": weight must be finite and non-negative");
            if (!std::isfinite(rec.exposure) || rec.exposure <= 0.0)
                throw DataError(where + ": exposure must be positive");
            if (!std::isfinite(rec.outcome) || rec.outcome < 0.0)
                throw DataError(where + ": outcome must be non-negative");
            const bool known = geo_level == GeoLevel::fine ? hier.subarea_index(rec.area_id).has_value()
                                                           : hier.coarse_index(rec.area_id).has_value();
            if (!known) {
                const bool other = geo_level == GeoLevel::fine ? hier.coarse_index(rec.area_id).has_value()
                                                               : hier.subarea_index(rec.area_id).has_value();
                if (other)
                    throw ValidationError("geo-level", where + ": area '" + rec.area_id + "' is indexed at the " +
                                                           (geo_level == GeoLevel::fine ? "coarse" : "fine") +
                                                           " level but the data are declared " +
                                                           to_string(geo_level));
                throw StructuralError(where + ": unknown area '" + rec.area_id + "'");
            }
        }
    }
};

/// Selects the records of one estimation cell; an empty group matches all groups.
struct CellKey {
    std::string area;
    std::optional<std::string> group;

    bool matches(const SurveyRecord& r) const { return r.area_id == area && (!group || r.group == *group); }
};

namespace detail {
inline double denominator_term(const SurveyRecord& r, OutcomeKind k) {
    return k == OutcomeKind::rate ? r.exposure : 1.0;
}
} // namespace detail

/// Hajek ratio estimate for one cell. Returns nullopt for a cell without
/// records; throws EstimationError when the records carry no weight.
inline std::optional<double> hajek_estimate(const SurveyDataset& data, const CellKey& cell) {
    double num = 0.0, den = 0.0;
    std::size_t n = 0;
    for (const auto& r : data.records) {
        if (!cell.matches(r)) continue;
        ++n;
        num += r.weight * r.outcome;
        den += r.weight * detail::denominator_term(r, data.kind);
    }
    if (n == 0) return std::nullopt;
    if (!(den > 0.0)) throw EstimationError("no effective sample in cell '" + cell.area + "'");
    return num / den;
}

struct VarianceEstimate {
    double variance = 0.0;
    std::size_t n_clusters = 0; // clusters with positive weight in the cell
    bool unreliable = false;    // fewer than two such clusters
};

/// Maps each stratum id to a collapsed-stratum index. Strata with a single PSU
/// are merged with the next stratum in id order (the previous one at the end).
inline std::map<std::string, std::size_t>
collapse_strata(const std::map<std::string, std::size_t>& psu_per_stratum) {
    std::vector<std::vector<std::string>> groups;
    std::vector<std::size_t> counts;
    std::vector<std::string> pending;
    std::size_t pending_count = 0;
    for (const auto& [id, n] : psu_per_stratum) {
        pending.push_back(id);
        pending_count += n;
        if (pending_count >= 2) {
            groups.push_back(std::move(pending));
            counts.push_back(pending_count);
            pending.clear();
            pending_count = 0;
        }
    }
    if (!pending.empty()) {
        if (groups.empty()) {
            groups.push_back(std::move(pending));
        } else {
            for (auto& s : pending) groups.back().push_back(std::move(s));
        }
    }
    std::map<std::string, std::size_t> out;
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (const auto& s : groups[g]) out[s] = g;
    return out;
}

/// Stratified with-replacement PSU linearization variance of the Hajek ratio
/// for one cell, treated as a domain of the full design.
inline VarianceEstimate design_variance(const SurveyDataset& data, const CellKey& cell) {
    double num = 0.0, den = 0.0;
    for (const auto& r : data.records) {
        if (!cell.matches(r)) continue;
        num += r.weight * r.outcome;
        den += r.weight * detail::denominator_term(r, data.kind);
    }
    if (!(den > 0.0)) throw EstimationError("no effective sample in cell '" + cell.area + "'");
    const double ratio = num / den;

    // Cluster totals of the linearized residuals, zero outside the domain.
    std::map<std::string, std::map<std::string, double>> ztot; // stratum -> cluster -> total
    std::map<std::string, double> cell_cluster_weight;
    double scale = 0.0; // magnitude of the summed terms, for the roundoff floor
    for (const auto& r : data.records) {
        double& z = ztot[r.stratum_id][r.cluster_id];
        if (!cell.matches(r)) continue;
        const double t = ratio * detail::denominator_term(r, data.kind);
        z += r.weight * (r.outcome - t) / den;
        scale += r.weight * (std::abs(r.outcome) + std::abs(t)) / den;
        cell_cluster_weight[r.stratum_id + '\x1f' + r.cluster_id] += r.weight;
    }
    VarianceEstimate out;
    for (const auto& [k, w] : cell_cluster_weight)
        if (w > 0.0) ++out.n_clusters;
    out.unreliable = out.n_clusters < 2;

    std::map<std::string, std::size_t> psu;
    for (const auto& [h, clusters] : ztot) psu[h] = clusters.size();
    auto collapsed = collapse_strata(psu);
    std::map<std::size_t, std::vector<double>> by_group;
    for (const auto& [h, clusters] : ztot)
        for (const auto& [c, z] : clusters) by_group[collapsed.at(h)].push_back(z);
    double v = 0.0;
    for (const auto& [g, zs] : by_group) {
        const double nh = double(zs.size());
        if (zs.size() < 2) continue;
        const double mean = std::accumulate(zs.begin(), zs.end(), 0.0) / nh;
        double ss = 0.0;
        for (double z : zs) ss += (z - mean) * (z - mean);
        v += nh / (nh - 1.0) * ss;
    }
    // cluster totals that cancel exactly in theory leave only roundoff
    const double floor = 1e-12 * scale;
    out.variance = v > floor * floor ? v : 0.0;
    return out;
}

struct TransformedEstimate {
    double lambda = 0.0;
    double variance = 0.0;
};

/// Delta-method transform to the link scale. nullopt signals a boundary
/// estimate (0 or 1 under logit, 0 under log) whose transform is undefined.
inline std::optional<TransformedEstimate> transform_delta(double mu, double var, Link link) {
    switch (link) {
    case Link::logit:
        if (!(mu > 0.0 && mu < 1.0)) return std::nullopt;
        return TransformedEstimate{logit(mu), var / ((mu * (1.0 - mu)) * (mu * (1.0 - mu)))};
    case Link::log:
        if (!(mu > 0.0)) return std::nullopt;
        return TransformedEstimate{std::log(mu), var / (mu * mu)};
    case Link::identity:
        return TransformedEstimate{mu, var};
    }
    return std::nullopt;
}

/// General fertility rate: births per 1,000 woman-years from births and
/// woman-months of exposure by age group.
inline double gfr(std::span<const double> births, std::span<const double> exposure_months) {
    if (births.size() != exposure_months.size()) throw std::invalid_argument("gfr: size mismatch");
    double b = 0.0, e = 0.0;
    for (std::size_t a = 0; a < births.size(); ++a) {
        if (exposure_months[a] < 0.0) throw std::invalid_argument("gfr: negative exposure");
        b += births[a];
        e += exposure_months[a];
    }
    if (!(e > 0.0)) throw std::invalid_argument("gfr: zero total exposure");
    return 1000.0 * b / (e / 12.0);
}

enum class DirectStatus { ok, empty, no_weight, boundary, unreliable, zero_variance };

inline std::string to_string(DirectStatus s) {
    switch (s) {
    case DirectStatus::ok: return "ok";
    case DirectStatus::empty: return "empty";
    case DirectStatus::no_weight: return "no_weight";
    case DirectStatus::boundary: return "boundary";
    case DirectStatus::unreliable: return "unreliable";
    case DirectStatus::zero_variance: return "zero_variance";
    }
    return "?";
}

struct DirectEstimate {
    std::string area;
    std::string group; // empty when pooled over groups
    double mu = 0.0;
    double var_mu = 0.0;
    double lambda = 0.0;
    double var_lambda = 0.0;
    double effective_n = 0.0; // Kish effective sample size
    std::size_t n_clusters = 0;
    DirectStatus status = DirectStatus::ok;

    /// Usable as a Fay-Herriot observation.
    bool usable() const { return status == DirectStatus::ok; }
};

/// Direct estimate plus transformed variance for one cell, with the exclusion
/// status that decides whether it can enter a Fay-Herriot likelihood.
inline DirectEstimate direct_estimate(const SurveyDataset& data, const CellKey& cell, Link link) {
    DirectEstimate d;
    d.area = cell.area;
    d.group = cell.group.value_or("");
    std::optional<double> mu;
    try {
        mu = hajek_estimate(data, cell);
    } catch (const EstimationError&) {
        d.status = DirectStatus::no_weight;
        return d;
    }
    if (!mu) {
        d.status = DirectStatus::empty;
        return d;
    }
    d.mu = *mu;
    double sw = 0.0, sw2 = 0.0;
    for (const auto& r : data.records)
        if (cell.matches(r)) sw += r.weight, sw2 += r.weight * r.weight;
    d.effective_n = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
    auto v = design_variance(data, cell);
    d.var_mu = v.variance;
    d.n_clusters = v.n_clusters;
    auto t = transform_delta(d.mu, d.var_mu, link);
    if (!t) {
        d.status = DirectStatus::boundary;
        return d;
    }
    d.lambda = t->lambda;
    d.var_lambda = t->variance;
    if (v.unreliable)
        d.status = DirectStatus::unreliable;
    else if (!(t->variance > 0.0))
        d.status = DirectStatus::zero_variance;
    return d;
}

} // namespace sae
