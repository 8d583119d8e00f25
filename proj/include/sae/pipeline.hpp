#pragma once

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "sae/direct.hpp"
#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/inference.hpp"
#include "sae/metrics.hpp"
#include "sae/model.hpp"
#include "sae/sim.hpp"

namespace sae {

// ---------------------------------------------------------------------------
// Composite group labels ("15-19|low|R") and their projections

inline std::vector<std::string> split_label(const std::string& label, char sep = '|') {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : label) {
        if (ch == sep) out.push_back(std::move(cur)), cur.clear();
        else cur.push_back(ch);
    }
    out.push_back(std::move(cur));
    return out;
}

/// Keeps the label components at `positions`; "all" when none are kept.
inline std::string project_label(const std::string& label, const std::vector<std::size_t>& positions, char sep = '|') {
    if (positions.empty()) return "all";
    const auto parts = split_label(label, sep);
    std::string out;
    for (std::size_t k = 0; k < positions.size(); ++k) {
        if (positions[k] >= parts.size())
            throw DataError("group label '" + label + "' has no component " + std::to_string(positions[k]));
        if (k) out.push_back(sep);
        out += parts[positions[k]];
    }
    return out;
}

inline SurveyDataset project_groups(const SurveyDataset& data, const std::vector<std::size_t>& positions) {
    SurveyDataset out = data;
    for (auto& r : out.records) r.group = project_label(r.group, positions);
    return out;
}

/// Sums population cells that share a projected label.
inline PopulationTable project_population(const PopulationTable& pop, const std::vector<std::size_t>& positions) {
    std::vector<std::string> groups;
    for (const auto& g : pop.groups()) groups.push_back(project_label(g, positions));
    std::vector<std::string> uniq = groups;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    PopulationTable out(pop.areas(), uniq);
    for (std::size_t a = 0; a < pop.n_areas(); ++a)
        for (std::size_t g = 0; g < pop.n_groups(); ++g)
            if (pop.has(a, g)) out.add(a, *out.group_index(groups[g]), pop.count(a, g));
    return out;
}

// ---------------------------------------------------------------------------
// Inputs shared by every method

struct AreaInputs {
    AreaHierarchy hier;
    std::shared_ptr<const ScaledStructure> structure;
    std::vector<std::string> covariate_names;
    Eigen::MatrixXd covariates; // one row per subarea, hierarchy order
    /// Subarea x composite-group counts.
    PopulationTable population;
    /// Names of the components of a composite group label, in order.
    std::vector<std::string> factor_names;

    std::vector<std::size_t> factor_positions(const std::vector<std::string>& names) const {
        std::vector<std::size_t> pos;
        for (const auto& n : names) {
            auto it = std::find(factor_names.begin(), factor_names.end(), n);
            if (it == factor_names.end()) throw ValidationError("factor", "unknown grouping factor '" + n + "'");
            pos.push_back(std::size_t(it - factor_names.begin()));
        }
        return pos;
    }

    Eigen::MatrixXd covariate_columns(const std::vector<std::string>& names) const {
        Eigen::MatrixXd x(covariates.rows(), Eigen::Index(names.size()));
        for (std::size_t k = 0; k < names.size(); ++k) {
            auto it = std::find(covariate_names.begin(), covariate_names.end(), names[k]);
            if (it == covariate_names.end()) throw ValidationError("covariate", "unknown covariate '" + names[k] + "'");
            x.col(Eigen::Index(k)) = covariates.col(it - covariate_names.begin());
        }
        return x;
    }
};

enum class MethodKind { direct, area, unit };

inline std::string to_string(MethodKind k) {
    switch (k) {
    case MethodKind::direct: return "direct";
    case MethodKind::area: return "area";
    case MethodKind::unit: return "unit";
    }
    return "?";
}

inline MethodKind parse_method_kind(const std::string& s) {
    if (s == "direct") return MethodKind::direct;
    if (s == "area" || s == "fh") return MethodKind::area;
    if (s == "unit") return MethodKind::unit;
    throw ValidationError("method-kind", "unknown model kind '" + s + "' (direct, area, unit)");
}

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::area;
    /// Level of the survey data the method consumes.
    GeoLevel data_level = GeoLevel::fine;
    Family family = Family::gaussian;
    Link link = Link::logit;
    std::vector<std::string> factors;
    std::vector<std::string> covariates;
    bool bym2 = true;
    PriorSettings priors;
    HyperTreatment treatment = HyperTreatment::optimized;
    HyperParams hyper;  // starting values, or the values held when fixed
    HyperFixed fixed;
};

/// The six methods compared in the simulation study. Names follow the
/// metric tables.
inline std::vector<MethodSpec> standard_methods() {
    const std::vector<std::string> all4{"ntl", "health", "hh", "edu"};
    const std::vector<std::string> obs3{"ntl", "health", "hh"};
    auto make = [](std::string name, MethodKind kind, GeoLevel level, Family fam, Link link,
                   std::vector<std::string> factors, std::vector<std::string> cov) {
        MethodSpec s;
        s.name = std::move(name);
        s.kind = kind;
        s.data_level = level;
        s.family = fam;
        s.link = link;
        s.factors = std::move(factors);
        s.covariates = std::move(cov);
        return s;
    };
    std::vector<MethodSpec> m;
    m.push_back(make("direct", MethodKind::direct, GeoLevel::fine, Family::gaussian, Link::logit, {}, {}));
    m.push_back(make("fh_adm2", MethodKind::area, GeoLevel::fine, Family::gaussian, Link::logit, {}, all4));
    m.push_back(make("fh_disagg", MethodKind::area, GeoLevel::coarse, Family::gaussian, Link::logit, {}, all4));
    m.push_back(make("fh_mrp_disagg", MethodKind::area, GeoLevel::coarse, Family::gaussian, Link::logit,
                     {"age", "educ"}, obs3));
    m.push_back(make("unit_disagg", MethodKind::unit, GeoLevel::coarse, Family::negative_binomial, Link::log, {"urb"},
                     all4));
    m.push_back(make("unit_mrp_disagg", MethodKind::unit, GeoLevel::coarse, Family::poisson, Link::log,
                     {"age", "educ", "urb"}, obs3));
    return m;
}

inline MethodSpec standard_method(const std::string& name) {
    for (auto& m : standard_methods())
        if (m.name == name) return m;
    throw ValidationError("method", "unknown method '" + name + "'");
}

inline bool is_disaggregation(const MethodSpec& m) { return m.data_level == GeoLevel::coarse; }

namespace detail {

/// Latent groups and factor layout for the projected population groups.
inline void set_groups(LatentFieldSpec& lat, const PopulationTable& pop, const std::vector<std::string>& factor_names) {
    if (factor_names.empty()) return;
    lat.groups = pop.groups();
    std::vector<std::vector<std::string>> parts;
    for (const auto& g : lat.groups) parts.push_back(split_label(g));
    for (std::size_t f = 0; f < factor_names.size(); ++f) {
        GroupFactor gf;
        gf.name = factor_names[f];
        for (const auto& p : parts) gf.levels.push_back(p[f]);
        std::sort(gf.levels.begin(), gf.levels.end());
        gf.levels.erase(std::unique(gf.levels.begin(), gf.levels.end()), gf.levels.end());
        gf.coding = auto_coding(gf.levels.size());
        lat.factors.push_back(std::move(gf));
    }
    for (const auto& p : parts) {
        std::vector<std::size_t> lv;
        for (std::size_t f = 0; f < factor_names.size(); ++f) {
            const auto& levels = lat.factors[f].levels;
            lv.push_back(std::size_t(std::lower_bound(levels.begin(), levels.end(), p[f]) - levels.begin()));
        }
        lat.group_levels.push_back(std::move(lv));
    }
}

/// Maps an observation in `area` (at the data level) and latent group g to a
/// single cell or a population-weighted aggregation over children.
inline void attach_cells(Observation& o, const AreaInputs& in, const LatentFieldSpec& lat, GeoLevel level,
                         const std::string& area, std::size_t g, const PopulationTable& pop) {
    if (level == GeoLevel::fine) {
        auto j = in.hier.subarea_index(area);
        if (!j) throw StructuralError("survey area '" + area + "' is not a subarea");
        o.cell = lat.cell(*j, g);
        return;
    }
    auto i = in.hier.coarse_index(area);
    if (!i) throw StructuralError("survey area '" + area + "' is not a coarse area");
    const auto& kids = in.hier.children(*i);
    const auto pg = *pop.group_index(lat.groups[g]);
    double total = 0.0;
    for (auto j : kids) total += pop.count(j, pg);
    if (!(total > 0.0))
        throw DataError("coarse area '" + area + "' has zero population in group '" + lat.groups[g] + "'");
    for (auto j : kids) {
        const double n = pop.count(j, pg);
        if (n > 0.0) o.terms.push_back({lat.cell(j, g), n / total});
    }
    // exact unit sum for the validator
    double s = 0.0;
    for (const auto& t : o.terms) s += t.weight;
    for (auto& t : o.terms) t.weight /= s;
}

inline LatentFieldSpec base_latent(const AreaInputs& in, const MethodSpec& m, const PopulationTable& pop) {
    LatentFieldSpec lat;
    lat.n_subareas = in.hier.n_subareas();
    lat.covariate_names = m.covariates;
    lat.covariates = in.covariate_columns(m.covariates);
    lat.bym2 = m.bym2;
    lat.structure = in.structure;
    set_groups(lat, pop, m.factors);
    return lat;
}

} // namespace detail

/// Area-level spec: transformed direct estimates per (area, group) cell with
/// their delta-method variances. Cells that cannot be used are reported in
/// `excluded`.
struct AreaSpecBuild {
    ModelSpec spec;
    PopulationTable population; // subarea x latent group
    std::vector<DirectEstimate> estimates;
    std::vector<DirectEstimate> excluded;
};

inline AreaSpecBuild build_area_spec(const AreaInputs& in, const SurveyDataset& data, const MethodSpec& m) {
    if (m.family != Family::gaussian) throw ValidationError("family", "area-level models use the gaussian family");
    const auto pos = in.factor_positions(m.factors);
    AreaSpecBuild b;
    b.population = project_population(in.population, pos);
    const SurveyDataset pd = project_groups(data, pos);
    b.spec.family = Family::gaussian;
    // y is on the link scale; the link maps cell predictors to means for
    // aggregation and prediction
    b.spec.link = m.link;
    b.spec.geo_level = data.geo_level;
    b.spec.priors = m.priors;
    b.spec.treatment = m.treatment;
    b.spec.hyper = m.hyper;
    b.spec.fixed = m.fixed;
    b.spec.latent = detail::base_latent(in, m, b.population);
    const auto& lat = b.spec.latent;
    const auto& areas = data.geo_level == GeoLevel::fine ? in.hier.subareas() : in.hier.coarse_areas();
    for (const auto& area : areas) {
        for (std::size_t g = 0; g < lat.n_groups(); ++g) {
            CellKey key{area, m.factors.empty() ? std::nullopt : std::optional<std::string>(lat.groups[g])};
            auto d = direct_estimate(pd, key, m.link);
            if (!d.usable()) {
                if (d.status != DirectStatus::empty) b.excluded.push_back(d);
                continue;
            }
            Observation o;
            o.y = d.lambda;
            o.variance = d.var_lambda;
            detail::attach_cells(o, in, lat, data.geo_level, area, g, b.population);
            b.spec.observations.push_back(std::move(o));
            b.estimates.push_back(std::move(d));
        }
    }
    return b;
}

/// Unit-level spec: one row per (cluster, latent group) with summed outcomes
/// and exposures.
struct UnitSpecBuild {
    ModelSpec spec;
    PopulationTable population;
};

inline UnitSpecBuild build_unit_spec(const AreaInputs& in, const SurveyDataset& data, const MethodSpec& m) {
    const auto pos = in.factor_positions(m.factors);
    UnitSpecBuild b;
    b.population = project_population(in.population, pos);
    b.spec.family = m.family;
    b.spec.link = m.link;
    b.spec.geo_level = data.geo_level;
    b.spec.priors = m.priors;
    b.spec.treatment = m.treatment;
    b.spec.hyper = m.hyper;
    b.spec.fixed = m.fixed;
    b.spec.latent = detail::base_latent(in, m, b.population);
    const auto& lat = b.spec.latent;
    std::map<std::tuple<std::string, std::string, std::string>, std::pair<double, double>> rows;
    for (const auto& r : data.records) {
        auto& acc = rows[{r.area_id, r.cluster_id, project_label(r.group, pos)}];
        acc.first += r.outcome;
        acc.second += r.exposure;
    }
    for (const auto& [key, yt] : rows) {
        const auto& [area, cluster, group] = key;
        auto g = std::find(lat.groups.begin(), lat.groups.end(), group);
        if (g == lat.groups.end()) throw DataError("survey group '" + group + "' is absent from the population table");
        if (!(yt.second > 0.0)) continue;
        Observation o;
        o.y = yt.first;
        o.exposure = yt.second;
        detail::attach_cells(o, in, lat, data.geo_level, area, std::size_t(g - lat.groups.begin()), b.population);
        b.spec.observations.push_back(std::move(o));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Running a method

struct MethodOutput {
    std::string method;
    std::vector<Summary> subareas; // NaN summaries where unavailable
    std::vector<bool> valid;
    std::optional<FitResult> fit;
    std::optional<ModelSpec> spec;
    std::vector<DirectEstimate> direct; // direct estimates entering the method
    std::vector<DirectEstimate> excluded;
    std::vector<std::string> warnings;
};

inline Summary nan_summary() {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {nan, nan, nan, nan, nan};
}

/// Direct estimates per subarea with a (1 - alpha) interval built on the link
/// scale and mapped back.
inline MethodOutput run_direct(const AreaInputs& in, const SurveyDataset& data, const MethodSpec& m, double alpha) {
    if (data.geo_level != GeoLevel::fine)
        throw ValidationError("geo-level", "direct estimation of subareas needs subarea-indexed survey data");
    MethodOutput out;
    out.method = m.name;
    const double z = boost::math::quantile(boost::math::normal(), 1.0 - alpha / 2.0);
    for (const auto& area : in.hier.subareas()) {
        auto d = direct_estimate(data, CellKey{area, std::nullopt}, m.link);
        const bool ok = (d.status == DirectStatus::ok || d.status == DirectStatus::unreliable) && d.var_lambda > 0.0;
        if (!ok) {
            out.subareas.push_back(nan_summary());
            out.valid.push_back(false);
            out.excluded.push_back(std::move(d));
            continue;
        }
        const double se = std::sqrt(d.var_lambda);
        out.subareas.push_back({d.mu, d.mu, inverse_link(m.link, d.lambda - z * se),
                                inverse_link(m.link, d.lambda + z * se), std::sqrt(d.var_mu)});
        out.valid.push_back(true);
        out.direct.push_back(std::move(d));
    }
    if (!out.excluded.empty())
        out.warnings.push_back(std::to_string(out.excluded.size()) + " subareas have no usable direct estimate");
    return out;
}

/// Builds and fits a model-based method; subarea summaries are MRP
/// aggregates when the method has several groups.
inline MethodOutput run_method(const AreaInputs& in, const SurveyDataset& data, const MethodSpec& m,
                               FitOptions opt = {}) {
    if (m.kind == MethodKind::direct) return run_direct(in, data, m, opt.alpha);
    if (data.geo_level != m.data_level)
        throw ValidationError("geo-level", "method '" + m.name + "' expects " + to_string(m.data_level) +
                                               "-indexed data but the survey is " + to_string(data.geo_level) +
                                               "-indexed");
    MethodOutput out;
    out.method = m.name;
    PopulationTable pop;
    if (m.kind == MethodKind::area) {
        auto b = build_area_spec(in, data, m);
        out.spec = std::move(b.spec);
        pop = std::move(b.population);
        out.direct = std::move(b.estimates);
        out.excluded = std::move(b.excluded);
        if (!out.excluded.empty())
            out.warnings.push_back(std::to_string(out.excluded.size()) + " direct estimates excluded from the likelihood");
    } else {
        auto b = build_unit_spec(in, data, m);
        out.spec = std::move(b.spec);
        pop = std::move(b.population);
    }
    if (out.spec->observations.empty()) throw DataError("method '" + m.name + "' has no usable observations");
    opt.population = &pop;
    opt.subarea_ids = in.hier.subareas();
    out.fit = fit(*out.spec, opt);
    out.subareas = out.fit->subareas;
    out.valid = out.fit->subarea_valid;
    for (const auto& w : out.fit->diagnostics.warnings) out.warnings.push_back(w);
    return out;
}

/// Metrics over subareas with a valid prediction; R^2 and Pearson are
/// computed within coarse areas.
struct Evaluation {
    MetricRow row;
    std::size_t n_evaluated = 0;
    std::size_t n_excluded = 0;
};

inline Evaluation evaluate_method(const AreaHierarchy& hier, const std::vector<double>& truth, const MethodOutput& out,
                                  int scenario, double alpha, IntervalScoreVariant variant) {
    std::vector<double> t, p, lo, hi;
    std::vector<std::size_t> grp;
    Evaluation e;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        const auto& s = out.subareas[j];
        if (!out.valid[j] || !std::isfinite(s.mean) || !std::isfinite(s.lower) || !std::isfinite(s.upper)) {
            ++e.n_excluded;
            continue;
        }
        t.push_back(truth[j]);
        p.push_back(s.mean);
        lo.push_back(s.lower);
        hi.push_back(s.upper);
        grp.push_back(hier.parent(j));
    }
    e.n_evaluated = t.size();
    if (t.empty()) throw EstimationError("method '" + out.method + "' produced no evaluable subarea");
    e.row = evaluate_predictions(out.method, scenario, t, p, lo, hi, grp, alpha, variant);
    return e;
}

// ---------------------------------------------------------------------------
// Simulation study

struct StudyConfig {
    std::vector<sim::ScenarioConfig> scenarios{sim::ScenarioConfig::preset(1)};
    std::vector<std::string> methods;
    std::size_t replicates = 50;
    std::uint64_t seed = 20240601;
    std::size_t threads = 1;
    std::size_t n_coarse = 20;
    std::size_t children = 4;
    double jitter = 0.0;
    sim::MarginalOptions marginals;
    sim::FrameOptions frame;
    long clusters_per_stratum = 5;
    long women_per_cluster = 20;
    double alpha = 0.10;
    IntervalScoreVariant variant = IntervalScoreVariant::paper;
    std::size_t n_draws = 1000;
    HyperTreatment treatment = HyperTreatment::optimized;

    std::vector<MethodSpec> method_specs() const {
        std::vector<MethodSpec> out;
        if (methods.empty()) out = standard_methods();
        else
            for (const auto& n : methods) out.push_back(standard_method(n));
        for (auto& m : out) m.treatment = treatment;
        return out;
    }

    void validate() const {
        if (scenarios.empty()) throw ValidationError("study", "no scenarios");
        for (const auto& s : scenarios) s.validate();
        method_specs();
        if (replicates == 0) throw ValidationError("study", "replicates must be positive");
        if (n_coarse == 0 || children == 0) throw ValidationError("study", "geography sizes must be positive");
        if (clusters_per_stratum <= 0 || women_per_cluster <= 0)
            throw ValidationError("study", "sample sizes must be positive");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("study", "alpha must lie in (0, 1)");
        if (n_draws < 2) throw ValidationError("study", "need at least two posterior draws");
        if (!(marginals.women_per_subarea > 0.0)) throw ValidationError("study", "women_per_subarea must be positive");
    }
};

/// Geography, marginals and covariates shared by every replicate.
struct SimulatedWorld {
    sim::Geography geo;
    sim::AreaMarginals marginals;
    AreaInputs inputs;
    std::shared_ptr<const sim::MasterFrame> base_frame; // frame of replicate-independent scenarios
};

namespace detail {
enum : std::uint64_t { kSeedGeography = 1, kSeedMarginals, kSeedFrame, kSeedOutcomes, kSeedSample, kSeedFit };
}

inline SimulatedWorld make_world(const StudyConfig& c) {
    SimulatedWorld w;
    w.geo = sim::generate_geography(c.n_coarse, c.children, derive_seed(c.seed, {detail::kSeedGeography}), c.jitter);
    w.marginals = sim::generate_marginals(w.geo, derive_seed(c.seed, {detail::kSeedMarginals}), c.marginals);
    w.base_frame = std::make_shared<sim::MasterFrame>(
        sim::generate_population(w.geo, w.marginals, derive_seed(c.seed, {detail::kSeedFrame, 0}), c.frame));
    auto& in = w.inputs;
    in.hier = w.geo.hier;
    in.structure = std::make_shared<ScaledStructure>(scaled_structure(w.geo.graph));
    in.population = w.base_frame->population;
    in.factor_names = {"age", "educ", "urb"};
    // share of women with secondary education, from the census counts
    const std::size_t nj = in.hier.n_subareas();
    Eigen::VectorXd edu(static_cast<Eigen::Index>(nj));
    for (std::size_t j = 0; j < nj; ++j) {
        double hi = 0.0;
        for (std::size_t g = 0; g < in.population.n_groups(); ++g)
            if (split_label(in.population.groups()[g])[1] == "high") hi += in.population.count(j, g);
        edu(Eigen::Index(j)) = hi / in.population.total(j);
    }
    in.covariate_names = {"ntl", "health", "hh", "edu"};
    in.covariates.resize(Eigen::Index(nj), 4);
    in.covariates.leftCols(3) = w.marginals.observed;
    in.covariates.col(3) = edu;
    return w;
}

/// Scenarios whose population is built once for the whole study.
inline bool fixed_population(const sim::ScenarioConfig& s) { return s.id <= 2; }

struct ReplicateData {
    std::shared_ptr<const sim::MasterFrame> frame;
    sim::Outcomes outcomes;
    sim::SampleDraw sample;
    SurveyDataset fine, coarse;
};

inline ReplicateData replicate_data(const StudyConfig& c, const SimulatedWorld& w, const sim::ScenarioConfig& s,
                                    std::size_t r) {
    ReplicateData d;
    const std::uint64_t pidx = fixed_population(s) ? 0 : r;
    d.frame = pidx == 0 ? w.base_frame
                        : std::make_shared<sim::MasterFrame>(sim::generate_population(
                              w.geo, w.marginals, derive_seed(c.seed, {detail::kSeedFrame, pidx}), c.frame));
    d.outcomes = sim::simulate_outcomes(*d.frame, w.marginals, s, derive_seed(c.seed, {detail::kSeedOutcomes, pidx}));
    auto rng = make_rng(derive_seed(c.seed, {detail::kSeedSample}), Stream::sample, r);
    d.sample = sim::draw_sample(*d.frame, c.clusters_per_stratum, c.women_per_cluster, rng);
    d.fine = sim::to_survey(w.geo, *d.frame, d.sample, d.outcomes, GeoLevel::fine);
    d.coarse = sim::to_survey(w.geo, *d.frame, d.sample, d.outcomes, GeoLevel::coarse);
    return d;
}

struct ReplicateRow {
    int scenario = 0;
    std::size_t replicate = 0;
    std::string method;
    bool ok = false;
    std::string error;
    MetricRow metrics;
    std::size_t n_evaluated = 0;
    std::size_t n_excluded = 0;
};

struct AveragedRow {
    MetricRow metrics;
    std::size_t n_ok = 0;
    std::size_t n_failed = 0;
};

struct TruthRow {
    int scenario = 0;
    std::size_t replicate = 0;
    std::string subarea;
    double truth = 0.0;
};

struct StudyReport {
    std::vector<ReplicateRow> rows;
    std::vector<AveragedRow> averaged;
    std::vector<TruthRow> truth;
    std::vector<std::string> warnings;
};

/// Means over successful replicates; NaN metrics are skipped per column.
inline std::vector<AveragedRow> average_rows(const std::vector<ReplicateRow>& rows) {
    std::vector<std::pair<int, std::string>> keys;
    for (const auto& r : rows)
        if (std::find(keys.begin(), keys.end(), std::pair{r.scenario, r.method}) == keys.end())
            keys.emplace_back(r.scenario, r.method);
    std::vector<AveragedRow> out;
    for (const auto& [s, m] : keys) {
        AveragedRow a;
        a.metrics.method = m;
        a.metrics.scenario = s;
        double MetricRow::*fields[] = {&MetricRow::r2,           &MetricRow::pearson, &MetricRow::interval_score,
                                       &MetricRow::bias,         &MetricRow::abs_rel_bias, &MetricRow::coverage,
                                       &MetricRow::width};
        std::vector<double> sum(std::size(fields), 0.0);
        std::vector<std::size_t> cnt(std::size(fields), 0);
        for (const auto& r : rows) {
            if (r.scenario != s || r.method != m) continue;
            if (!r.ok) {
                ++a.n_failed;
                continue;
            }
            ++a.n_ok;
            for (std::size_t f = 0; f < std::size(fields); ++f) {
                const double v = r.metrics.*fields[f];
                if (std::isfinite(v)) sum[f] += v, ++cnt[f];
            }
        }
        for (std::size_t f = 0; f < std::size(fields); ++f)
            a.metrics.*fields[f] = cnt[f] ? sum[f] / double(cnt[f]) : std::numeric_limits<double>::quiet_NaN();
        out.push_back(std::move(a));
    }
    return out;
}

/// Runs every (scenario, replicate) task, in parallel when threads > 1.
/// Results are placed by task index, so the report does not depend on
/// scheduling.
inline StudyReport run_replications(const StudyConfig& c) {
    c.validate();
    const SimulatedWorld w = make_world(c);
    const auto methods = c.method_specs();
    const std::size_t ns = c.scenarios.size(), nm = methods.size(), ntask = ns * c.replicates;
    std::vector<std::vector<ReplicateRow>> results(ntask);
    std::vector<std::vector<TruthRow>> truths(ntask);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t t = next++; t < ntask; t = next++) {
            const auto& s = c.scenarios[t / c.replicates];
            const std::size_t r = t % c.replicates;
            std::vector<ReplicateRow> rows;
            std::optional<ReplicateData> data;
            std::string data_error;
            try {
                data = replicate_data(c, w, s, r);
            } catch (const std::exception& e) {
                data_error = std::string("data generation failed: ") + e.what();
            }
            if (data)
                for (std::size_t j = 0; j < w.inputs.hier.n_subareas(); ++j)
                    truths[t].push_back({s.id, r, w.inputs.hier.subareas()[j], data->outcomes.truth[j]});
            for (std::size_t k = 0; k < nm; ++k) {
                const auto& m = methods[k];
                ReplicateRow row;
                row.scenario = s.id;
                row.replicate = r;
                row.method = m.name;
                row.metrics.method = m.name;
                row.metrics.scenario = s.id;
                if (!data) {
                    row.error = data_error;
                    rows.push_back(std::move(row));
                    continue;
                }
                try {
                    FitOptions fo;
                    fo.n_draws = c.n_draws;
                    fo.alpha = c.alpha;
                    fo.seed = derive_seed(c.seed, {detail::kSeedFit, std::uint64_t(s.id), r, k});
                    const auto& ds = m.data_level == GeoLevel::fine ? data->fine : data->coarse;
                    auto out = run_method(w.inputs, ds, m, fo);
                    auto ev = evaluate_method(w.inputs.hier, data->outcomes.truth, out, s.id, c.alpha, c.variant);
                    row.metrics = ev.row;
                    row.n_evaluated = ev.n_evaluated;
                    row.n_excluded = ev.n_excluded;
                    row.ok = true;
                } catch (const std::exception& e) {
                    row.error = e.what();
                }
                rows.push_back(std::move(row));
            }
            results[t] = std::move(rows);
        }
    };
    const std::size_t nt = std::max<std::size_t>(1, std::min(c.threads, ntask));
    if (nt == 1) worker();
    else {
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < nt; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    StudyReport rep;
    for (std::size_t t = 0; t < ntask; ++t) {
        for (auto& r : results[t]) {
            if (!r.ok)
                rep.warnings.push_back("scenario " + std::to_string(r.scenario) + " replicate " +
                                       std::to_string(r.replicate) + " method " + r.method + ": " + r.error);
            rep.rows.push_back(std::move(r));
        }
        for (auto& tr : truths[t]) rep.truth.push_back(std::move(tr));
    }
    rep.averaged = average_rows(rep.rows);
    return rep;
}

} // namespace sae
