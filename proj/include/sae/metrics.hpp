#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sae {

namespace detail {
inline void check_aligned(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": vectors are not aligned");
}

/// Member indices per group id, ordered by group id.
inline std::map<std::size_t, std::vector<std::size_t>> members(std::span<const std::size_t> group) {
    std::map<std::size_t, std::vector<std::size_t>> m;
    for (std::size_t k = 0; k < group.size(); ++k) m[group[k]].push_back(k);
    return m;
}
} // namespace detail

struct R2Result {
    std::optional<double> value; // nullopt when SST_within is zero
    double sse = 0.0;
    double sst_within = 0.0;
    std::size_t singleton_groups = 0;
};

/// 1 - SSE / SST_within, with SST_within the spread of the truth around its
/// group means. Singleton groups add to SSE only.
inline R2Result within_group_r2(std::span<const double> truth, std::span<const double> pred,
                                std::span<const std::size_t> group) {
    detail::check_aligned(truth.size(), pred.size(), "within_group_r2");
    detail::check_aligned(truth.size(), group.size(), "within_group_r2");
    R2Result r;
    for (const auto& [g, idx] : detail::members(group)) {
        double mean = 0.0;
        for (auto k : idx) mean += truth[k];
        mean /= double(idx.size());
        for (auto k : idx) {
            r.sse += (pred[k] - truth[k]) * (pred[k] - truth[k]);
            if (idx.size() > 1) r.sst_within += (truth[k] - mean) * (truth[k] - mean);
        }
        if (idx.size() == 1) ++r.singleton_groups;
    }
    if (r.sst_within > 0.0) r.value = 1.0 - r.sse / r.sst_within;
    return r;
}

struct PearsonResult {
    std::optional<double> value; // nullopt when no group is valid
    std::size_t valid_groups = 0;
    std::size_t excluded_groups = 0;
};

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    detail::check_aligned(x.size(), y.size(), "pearson");
    const double n = double(x.size());
    if (x.size() < 2) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) mx += x[k], my += y[k];
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

/// Mean of per-group correlations over groups with at least two members and
/// non-constant truth and prediction.
inline PearsonResult within_group_pearson(std::span<const double> truth, std::span<const double> pred,
                                          std::span<const std::size_t> group) {
    detail::check_aligned(truth.size(), pred.size(), "within_group_pearson");
    detail::check_aligned(truth.size(), group.size(), "within_group_pearson");
    PearsonResult r;
    double acc = 0.0;
    for (const auto& [g, idx] : detail::members(group)) {
        std::vector<double> t, p;
        for (auto k : idx) t.push_back(truth[k]), p.push_back(pred[k]);
        auto c = pearson(t, p);
        if (!c) {
            ++r.excluded_groups;
            continue;
        }
        acc += *c;
        ++r.valid_groups;
    }
    if (r.valid_groups > 0) r.value = acc / double(r.valid_groups);
    return r;
}

/// `paper` weighs misses by alpha/2, `standard` by 2/alpha.
enum class IntervalScoreVariant { paper, standard };

inline IntervalScoreVariant parse_is_variant(const std::string& s) {
    if (s == "paper") return IntervalScoreVariant::paper;
    if (s == "standard") return IntervalScoreVariant::standard;
    throw std::invalid_argument("unknown interval-score variant '" + s + "'");
}

struct IntervalMetrics {
    double interval_score = 0.0;
    double coverage = 0.0;
    double width = 0.0;
};

inline IntervalMetrics interval_metrics(std::span<const double> truth, std::span<const double> lower,
                                        std::span<const double> upper, double alpha,
                                        IntervalScoreVariant variant = IntervalScoreVariant::paper) {
    detail::check_aligned(truth.size(), lower.size(), "interval_metrics");
    detail::check_aligned(truth.size(), upper.size(), "interval_metrics");
    if (truth.empty()) throw std::invalid_argument("interval_metrics: no values");
    const double pen = variant == IntervalScoreVariant::paper ? alpha / 2.0 : 2.0 / alpha;
    IntervalMetrics m;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const double l = lower[k], u = upper[k], t = truth[k];
        if (l > u) throw std::invalid_argument("interval_metrics: lower bound above upper bound at " + std::to_string(k));
        double s = u - l;
        if (l > t) s += pen * (l - t);
        if (u < t) s += pen * (t - u);
        m.interval_score += s;
        m.width += u - l;
        m.coverage += (l <= t && t <= u) ? 1.0 : 0.0;
    }
    const double n = double(truth.size());
    m.interval_score /= n;
    m.width /= n;
    m.coverage /= n;
    return m;
}

struct BiasMetrics {
    double bias = 0.0;
    double abs_rel_bias = 0.0; // percent
    std::size_t excluded_zero_truth = 0;
};

inline BiasMetrics bias_metrics(std::span<const double> truth, std::span<const double> pred) {
    detail::check_aligned(truth.size(), pred.size(), "bias_metrics");
    if (truth.empty()) throw std::invalid_argument("bias_metrics: no values");
    BiasMetrics b;
    std::size_t nrel = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        b.bias += pred[k] - truth[k];
        if (truth[k] == 0.0) {
            ++b.excluded_zero_truth;
            continue;
        }
        b.abs_rel_bias += std::abs(pred[k] - truth[k]) / std::abs(truth[k]);
        ++nrel;
    }
    b.bias /= double(truth.size());
    b.abs_rel_bias = nrel ? 100.0 * b.abs_rel_bias / double(nrel) : std::numeric_limits<double>::quiet_NaN();
    return b;
}

/// One row of the metric table for a (method, scenario) pair.
struct MetricRow {
    std::string method;
    int scenario = 0;
    double r2 = 0.0;
    double pearson = 0.0;
    double interval_score = 0.0;
    double bias = 0.0;
    double abs_rel_bias = 0.0;
    double coverage = 0.0;
    double width = 0.0;
};

inline const char* kMetricHeader = "method,scenario,r2,pearson,interval_score,bias,abs_rel_bias,coverage,width";

/// All metrics for one set of subarea predictions.
inline MetricRow evaluate_predictions(std::string method, int scenario, std::span<const double> truth,
                                      std::span<const double> point, std::span<const double> lower,
                                      std::span<const double> upper, std::span<const std::size_t> group,
                                      double alpha, IntervalScoreVariant variant) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MetricRow row;
    row.method = std::move(method);
    row.scenario = scenario;
    row.r2 = within_group_r2(truth, point, group).value.value_or(nan);
    row.pearson = within_group_pearson(truth, point, group).value.value_or(nan);
    const auto im = interval_metrics(truth, lower, upper, alpha, variant);
    row.interval_score = im.interval_score;
    row.coverage = im.coverage;
    row.width = im.width;
    const auto bm = bias_metrics(truth, point);
    row.bias = bm.bias;
    row.abs_rel_bias = bm.abs_rel_bias;
    return row;
}

} // namespace sae
