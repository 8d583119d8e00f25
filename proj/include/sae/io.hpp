#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sae/csv.hpp"
#include "sae/direct.hpp"
#include "sae/errors.hpp"
#include "sae/graph.hpp"
#include "sae/pipeline.hpp"

namespace sae::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Tables

inline std::pair<AreaHierarchy, AdjacencyGraph> read_geography(const std::string& subareas_csv,
                                                               const std::string& adjacency_csv) {
    const auto st = csv::read_file(subareas_csv);
    const auto cs = st.column("subarea_id"), cc = st.column("coarse_id");
    std::vector<SubareaRecord> subs;
    for (std::size_t r = 0; r < st.rows.size(); ++r) {
        if (st.rows[r][cc].empty())
            throw StructuralError(subareas_csv + ":" + std::to_string(st.line_numbers[r]) + ": subarea '" +
                                  st.rows[r][cs] + "' has no parent");
        subs.push_back({st.rows[r][cs], st.rows[r][cc]});
    }
    const auto at = csv::read_file(adjacency_csv);
    const auto ca = at.column("subarea_a"), cb = at.column("subarea_b");
    std::vector<EdgeRecord> edges;
    for (const auto& row : at.rows) edges.push_back({row[ca], row[cb]});
    return build_hierarchy(subs, edges);
}

/// Records whose area ids are all subareas are fine-indexed, all coarse ids
/// coarse-indexed. Mixed or unknown ids are errors.
inline GeoLevel detect_level(const std::vector<SurveyRecord>& recs, const AreaHierarchy& hier) {
    bool fine = false, coarse = false;
    for (const auto& r : recs) {
        const bool f = hier.subarea_index(r.area_id).has_value(), c = hier.coarse_index(r.area_id).has_value();
        if (!f && !c) throw StructuralError("survey references unknown area '" + r.area_id + "'");
        fine |= f && !c;
        coarse |= c && !f;
    }
    if (fine && coarse) throw ValidationError("geo-level", "survey mixes subarea and coarse-area ids");
    return coarse ? GeoLevel::coarse : GeoLevel::fine;
}

inline SurveyDataset read_survey(const std::string& path, const AreaHierarchy& hier, OutcomeKind kind) {
    const auto t = csv::read_file(path);
    const std::size_t cu = t.column("unit_id"), cc = t.column("cluster_id"), cs = t.column("stratum_id"),
                      ca = t.column("area_id"), cg = t.column("group"), cw = t.column("weight"),
                      co = t.column("outcome"), ce = t.column("exposure");
    SurveyDataset d;
    d.kind = kind;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = path + ":" + std::to_string(t.line_numbers[r]);
        SurveyRecord rec;
        rec.unit_id = row[cu];
        rec.cluster_id = row[cc];
        rec.stratum_id = row[cs];
        rec.area_id = row[ca];
        rec.group = row[cg].empty() ? "all" : row[cg];
        rec.weight = csv::to_double(row[cw], where + " weight");
        rec.outcome = csv::to_double(row[co], where + " outcome");
        rec.exposure = csv::to_double(row[ce], where + " exposure");
        d.records.push_back(std::move(rec));
    }
    if (d.records.empty()) throw DataError(path + ": no survey records");
    d.geo_level = detect_level(d.records, hier);
    d.validate(hier);
    return d;
}

struct CovariateTable {
    std::vector<std::string> names;
    Eigen::MatrixXd values; // subarea rows
    bool coarse = false;    // supplied per coarse area and copied to children
};

/// Either a `subarea_id` or a `coarse_id` key column followed by numeric
/// covariate columns. Every area of that level must appear exactly once.
inline CovariateTable read_covariates(const std::string& path, const AreaHierarchy& hier) {
    const auto t = csv::read_file(path);
    CovariateTable out;
    out.coarse = !t.has_column("subarea_id");
    const std::size_t key = t.column(out.coarse ? "coarse_id" : "subarea_id");
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < t.header.size(); ++c)
        if (c != key) cols.push_back(c), out.names.push_back(t.header[c]);
    const std::size_t n_area = out.coarse ? hier.n_coarse() : hier.n_subareas();
    Eigen::MatrixXd raw = Eigen::MatrixXd::Constant(Eigen::Index(n_area), Eigen::Index(cols.size()),
                                                    std::numeric_limits<double>::quiet_NaN());
    std::vector<char> seen(n_area, 0);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = path + ":" + std::to_string(t.line_numbers[r]);
        auto idx = out.coarse ? hier.coarse_index(row[key]) : hier.subarea_index(row[key]);
        if (!idx) throw StructuralError(where + ": unknown area '" + row[key] + "'");
        if (seen[*idx]) throw DataError(where + ": duplicate covariate row for '" + row[key] + "'");
        seen[*idx] = 1;
        for (std::size_t k = 0; k < cols.size(); ++k)
            raw(Eigen::Index(*idx), Eigen::Index(k)) = csv::to_double(row[cols[k]], where + " " + out.names[k]);
    }
    for (std::size_t a = 0; a < n_area; ++a)
        if (!seen[a])
            throw DataError(path + ": covariates missing for '" +
                            (out.coarse ? hier.coarse_areas()[a] : hier.subareas()[a]) + "'");
    if (!out.coarse) {
        out.values = std::move(raw);
        return out;
    }
    out.values.resize(Eigen::Index(hier.n_subareas()), raw.cols());
    for (std::size_t j = 0; j < hier.n_subareas(); ++j) out.values.row(Eigen::Index(j)) = raw.row(Eigen::Index(hier.parent(j)));
    return out;
}

inline PopulationTable read_population(const std::string& path, const AreaHierarchy& hier) {
    const auto t = csv::read_file(path);
    const std::size_t cs = t.column("subarea_id"), cg = t.column("group"), cn = t.column("count");
    std::vector<PopulationRecord> recs;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        recs.push_back({row[cs], row[cg].empty() ? "all" : row[cg],
                        csv::to_double(row[cn], path + ":" + std::to_string(t.line_numbers[r]) + " count")});
    }
    return make_population(recs, hier);
}

// ---------------------------------------------------------------------------
// JSON helpers

/// Parses a JSON file; syntax errors carry the line number.
inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t pos = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + std::ptrdiff_t(pos ? pos - 1 : 0), '\n');
        throw ValidationError("json", path + ":" + std::to_string(line) + ": " + e.what());
    }
}

namespace detail {

/// Rejects keys outside `allowed` so typos do not pass silently.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ValidationError("config", where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok |= k == a;
        if (!ok) throw ValidationError("config", where + ": unknown key '" + k + "'");
    }
}

template <class T>
void get_to(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ValidationError("config", where + "." + key + ": " + e.what());
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Model configuration for `fit`

struct ModelConfig {
    MethodSpec method;
    OutcomeKind outcome = OutcomeKind::prevalence;
    std::optional<GeoLevel> geo_level; // expected data level
    std::vector<std::string> group_factors;
    std::size_t n_draws = 1000;
    std::uint64_t seed = 1;
    double alpha = 0.10;
};

inline GeoLevel parse_level(const std::string& s, const std::string& where) {
    if (s == "fine" || s == "subarea") return GeoLevel::fine;
    if (s == "coarse") return GeoLevel::coarse;
    throw ValidationError("config", where + ": geo_level must be 'fine' or 'coarse'");
}

inline ModelConfig parse_model_config(const json& j, const std::string& where = "model") {
    detail::check_keys(j, where, {"name", "kind", "family", "link", "outcome", "geo_level", "covariates",
                                  "group_factors", "factors", "bym2", "treatment", "hyper", "fixed", "priors",
                                  "n_draws", "seed", "alpha"});
    ModelConfig m;
    auto& ms = m.method;
    std::string s;
    detail::get_to(j, "name", ms.name, where);
    if (ms.name.empty()) ms.name = "model";
    s = "area";
    detail::get_to(j, "kind", s, where);
    ms.kind = parse_method_kind(s);
    s = ms.kind == MethodKind::unit ? "binomial" : "gaussian";
    detail::get_to(j, "family", s, where);
    try {
        ms.family = parse_family(s);
        s = ms.family == Family::poisson || ms.family == Family::negative_binomial ? "log" : "logit";
        detail::get_to(j, "link", s, where);
        ms.link = parse_link(s);
    } catch (const std::invalid_argument& e) {
        throw ValidationError("config", where + ": " + e.what());
    }
    s = ms.family == Family::poisson || ms.family == Family::negative_binomial ? "rate" : "prevalence";
    detail::get_to(j, "outcome", s, where);
    if (s == "rate") m.outcome = OutcomeKind::rate;
    else if (s == "prevalence") m.outcome = OutcomeKind::prevalence;
    else throw ValidationError("config", where + ".outcome: expected 'rate' or 'prevalence'");
    if (j.contains("geo_level")) {
        detail::get_to(j, "geo_level", s, where);
        m.geo_level = parse_level(s, where);
    }
    detail::get_to(j, "covariates", ms.covariates, where);
    detail::get_to(j, "group_factors", m.group_factors, where);
    detail::get_to(j, "factors", ms.factors, where);
    detail::get_to(j, "bym2", ms.bym2, where);
    if (j.contains("treatment")) {
        detail::get_to(j, "treatment", s, where);
        try {
            ms.treatment = parse_treatment(s);
        } catch (const std::invalid_argument& e) {
            throw ValidationError("config", where + ".treatment: " + e.what());
        }
    }
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        detail::check_keys(h, where + ".hyper", {"sigma_b", "kappa", "phi", "group_sd"});
        detail::get_to(h, "sigma_b", ms.hyper.sigma_b, where + ".hyper");
        detail::get_to(h, "kappa", ms.hyper.kappa, where + ".hyper");
        detail::get_to(h, "phi", ms.hyper.phi, where + ".hyper");
        detail::get_to(h, "group_sd", ms.hyper.group_sd, where + ".hyper");
        if (!(ms.hyper.sigma_b > 0.0) || !(ms.hyper.kappa > 0.0 && ms.hyper.kappa < 1.0) || !(ms.hyper.phi > 0.0))
            throw ValidationError("config", where + ".hyper: need sigma_b > 0, 0 < kappa < 1, phi > 0");
    }
    if (j.contains("fixed")) {
        const auto& f = j.at("fixed");
        detail::check_keys(f, where + ".fixed", {"sigma_b", "kappa", "phi", "group"});
        detail::get_to(f, "sigma_b", ms.fixed.sigma_b, where + ".fixed");
        detail::get_to(f, "kappa", ms.fixed.kappa, where + ".fixed");
        detail::get_to(f, "phi", ms.fixed.phi, where + ".fixed");
        detail::get_to(f, "group", ms.fixed.group, where + ".fixed");
    }
    if (j.contains("priors")) {
        const auto& p = j.at("priors");
        const std::string w = where + ".priors";
        detail::check_keys(p, w, {"fixed_effect_precision", "pc_sigma_u", "pc_sigma_alpha", "pc_kappa_u",
                                  "pc_kappa_alpha", "pc_phi_u", "pc_phi_alpha", "pc_group_u", "pc_group_alpha"});
        auto& pr = ms.priors;
        detail::get_to(p, "fixed_effect_precision", pr.fixed_effect_precision, w);
        detail::get_to(p, "pc_sigma_u", pr.pc_sigma_u, w);
        detail::get_to(p, "pc_sigma_alpha", pr.pc_sigma_alpha, w);
        detail::get_to(p, "pc_kappa_u", pr.pc_kappa_u, w);
        detail::get_to(p, "pc_kappa_alpha", pr.pc_kappa_alpha, w);
        detail::get_to(p, "pc_phi_u", pr.pc_phi_u, w);
        detail::get_to(p, "pc_phi_alpha", pr.pc_phi_alpha, w);
        detail::get_to(p, "pc_group_u", pr.pc_group_u, w);
        detail::get_to(p, "pc_group_alpha", pr.pc_group_alpha, w);
    }
    detail::get_to(j, "n_draws", m.n_draws, where);
    detail::get_to(j, "seed", m.seed, where);
    detail::get_to(j, "alpha", m.alpha, where);
    if (m.n_draws < 2) throw ValidationError("config", where + ".n_draws: need at least 2 draws");
    if (!(m.alpha > 0.0 && m.alpha < 1.0)) throw ValidationError("config", where + ".alpha: must lie in (0, 1)");
    for (const auto& f : ms.factors)
        if (std::find(m.group_factors.begin(), m.group_factors.end(), f) == m.group_factors.end())
            throw ValidationError("config", where + ".factors: '" + f + "' is not listed in group_factors");
    if (m.geo_level) ms.data_level = *m.geo_level;
    return m;
}

// ---------------------------------------------------------------------------
// Study configuration for `simulate`

namespace detail {
inline void read_coefficients(const json& j, sim::Coefficients& c, const std::string& where) {
    check_keys(j, where, {"alpha", "ntl", "health", "hh", "ndvi", "mobile", "educ", "age"});
    get_to(j, "alpha", c.alpha, where);
    get_to(j, "ntl", c.ntl, where);
    get_to(j, "health", c.health, where);
    get_to(j, "hh", c.hh, where);
    get_to(j, "ndvi", c.ndvi, where);
    get_to(j, "mobile", c.mobile, where);
    get_to(j, "educ", c.educ, where);
    if (j.contains("age")) {
        std::vector<double> a;
        get_to(j, "age", a, where);
        if (a.size() != sim::kAges) throw ValidationError("config", where + ".age: expected 6 age effects");
        std::copy(a.begin(), a.end(), c.age.begin());
    }
}

inline json coefficients_json(const sim::Coefficients& c) {
    return {{"alpha", c.alpha}, {"ntl", c.ntl},       {"health", c.health}, {"hh", c.hh},
            {"ndvi", c.ndvi},   {"mobile", c.mobile}, {"educ", c.educ},     {"age", c.age}};
}
} // namespace detail

/// Scenarios are ids or objects starting from the preset of their id, with
/// any parameter overridden (urban/rural coefficient sets, or `both`).
inline StudyConfig parse_study_config(const json& j, const std::string& where = "config") {
    detail::check_keys(j, where, {"scenarios", "methods", "replicates", "seed", "threads", "geography", "population",
                                  "sampling", "alpha", "interval_score", "n_draws", "treatment"});
    StudyConfig c;
    if (j.contains("scenarios")) {
        const auto& sj = j.at("scenarios");
        if (!sj.is_array() || sj.empty()) throw ValidationError("config", where + ".scenarios: expected a non-empty array");
        c.scenarios.clear();
        for (std::size_t k = 0; k < sj.size(); ++k) {
            const std::string w = where + ".scenarios[" + std::to_string(k) + "]";
            const auto& e = sj[k];
            int id = 0;
            if (e.is_number_integer()) id = e.get<int>();
            else if (e.is_object() && e.contains("id") && e.at("id").is_number_integer()) id = e.at("id").get<int>();
            else throw ValidationError("config", w + ": expected a scenario id or an object with an integer id");
            if (id < 1 || id > 4) throw ValidationError("scenario", w + ": unknown scenario " + std::to_string(id));
            auto s = sim::ScenarioConfig::preset(id);
            if (e.is_object()) {
                detail::check_keys(e, w, {"id", "urban", "rural", "both", "sd_individual", "sd_cluster", "sd_area",
                                          "exposure_months"});
                if (e.contains("both")) {
                    detail::read_coefficients(e.at("both"), s.urban, w + ".both");
                    detail::read_coefficients(e.at("both"), s.rural, w + ".both");
                }
                if (e.contains("urban")) detail::read_coefficients(e.at("urban"), s.urban, w + ".urban");
                if (e.contains("rural")) detail::read_coefficients(e.at("rural"), s.rural, w + ".rural");
                detail::get_to(e, "sd_individual", s.sd_individual, w);
                detail::get_to(e, "sd_cluster", s.sd_cluster, w);
                detail::get_to(e, "sd_area", s.sd_area, w);
                detail::get_to(e, "exposure_months", s.exposure_months, w);
            }
            try {
                s.validate();
            } catch (const ValidationError& err) {
                throw ValidationError(err.rule(), w + ": " + err.what());
            }
            c.scenarios.push_back(s);
        }
    }
    detail::get_to(j, "methods", c.methods, where);
    detail::get_to(j, "replicates", c.replicates, where);
    detail::get_to(j, "seed", c.seed, where);
    detail::get_to(j, "threads", c.threads, where);
    if (j.contains("geography")) {
        const auto& g = j.at("geography");
        detail::check_keys(g, where + ".geography", {"n_coarse", "children", "jitter"});
        detail::get_to(g, "n_coarse", c.n_coarse, where + ".geography");
        detail::get_to(g, "children", c.children, where + ".geography");
        detail::get_to(g, "jitter", c.jitter, where + ".geography");
    }
    if (j.contains("population")) {
        const auto& p = j.at("population");
        const std::string w = where + ".population";
        detail::check_keys(p, w, {"women_per_subarea", "local_share", "urban_spread", "target_ea_size", "ea_size_sd"});
        detail::get_to(p, "women_per_subarea", c.marginals.women_per_subarea, w);
        detail::get_to(p, "local_share", c.marginals.local_share, w);
        detail::get_to(p, "urban_spread", c.marginals.urban_spread, w);
        detail::get_to(p, "target_ea_size", c.frame.target_ea_size, w);
        detail::get_to(p, "ea_size_sd", c.frame.ea_size_sd, w);
    }
    if (j.contains("sampling")) {
        const auto& s = j.at("sampling");
        detail::check_keys(s, where + ".sampling", {"clusters_per_stratum", "women_per_cluster"});
        detail::get_to(s, "clusters_per_stratum", c.clusters_per_stratum, where + ".sampling");
        detail::get_to(s, "women_per_cluster", c.women_per_cluster, where + ".sampling");
    }
    detail::get_to(j, "alpha", c.alpha, where);
    detail::get_to(j, "n_draws", c.n_draws, where);
    std::string s;
    if (j.contains("interval_score")) {
        detail::get_to(j, "interval_score", s, where);
        try {
            c.variant = parse_is_variant(s);
        } catch (const std::invalid_argument& e) {
            throw ValidationError("config", where + ".interval_score: " + e.what());
        }
    }
    if (j.contains("treatment")) {
        detail::get_to(j, "treatment", s, where);
        try {
            c.treatment = parse_treatment(s);
        } catch (const std::invalid_argument& e) {
            throw ValidationError("config", where + ".treatment: " + e.what());
        }
    }
    c.validate();
    return c;
}

/// The resolved configuration, written into manifests.
inline json study_config_json(const StudyConfig& c) {
    json sc = json::array();
    for (const auto& s : c.scenarios)
        sc.push_back({{"id", s.id},
                      {"urban", detail::coefficients_json(s.urban)},
                      {"rural", detail::coefficients_json(s.rural)},
                      {"sd_individual", s.sd_individual},
                      {"sd_cluster", s.sd_cluster},
                      {"sd_area", s.sd_area},
                      {"exposure_months", s.exposure_months}});
    json methods = json::array();
    for (const auto& m : c.method_specs()) methods.push_back(m.name);
    return {{"scenarios", sc},
            {"methods", methods},
            {"replicates", c.replicates},
            {"seed", c.seed},
            {"threads", c.threads},
            {"geography", {{"n_coarse", c.n_coarse}, {"children", c.children}, {"jitter", c.jitter}}},
            {"population",
             {{"women_per_subarea", c.marginals.women_per_subarea},
              {"local_share", c.marginals.local_share},
              {"urban_spread", c.marginals.urban_spread},
              {"target_ea_size", c.frame.target_ea_size},
              {"ea_size_sd", c.frame.ea_size_sd}}},
            {"sampling", {{"clusters_per_stratum", c.clusters_per_stratum}, {"women_per_cluster", c.women_per_cluster}}},
            {"alpha", c.alpha},
            {"interval_score", c.variant == IntervalScoreVariant::paper ? "paper" : "standard"},
            {"n_draws", c.n_draws},
            {"treatment", c.treatment == HyperTreatment::fixed ? "fixed"
                          : c.treatment == HyperTreatment::grid ? "grid"
                                                                : "optimized"}};
}

// ---------------------------------------------------------------------------
// Writers

/// Column label of a quantile level: 0.05 -> "q05", 0.025 -> "q025".
inline std::string quantile_label(double p) {
    std::string digits = csv::fmt(std::round(p * 1e6) / 1e4); // percent
    digits.erase(std::remove(digits.begin(), digits.end(), '.'), digits.end());
    if (p < 0.1) digits = "0" + digits;
    return "q" + digits;
}

inline void write_metric_row(csv::Writer& w, const MetricRow& m, std::vector<std::string> extra = {}) {
    std::vector<std::string> f{m.method,         std::to_string(m.scenario), csv::fmt(m.r2),
                               csv::fmt(m.pearson), csv::fmt(m.interval_score), csv::fmt(m.bias),
                               csv::fmt(m.abs_rel_bias), csv::fmt(m.coverage), csv::fmt(m.width)};
    for (auto& e : extra) f.push_back(std::move(e));
    w.row(f);
}

inline void write_study_report(const StudyReport& rep, std::ostream& per_replicate, std::ostream& averaged,
                               std::ostream& truth) {
    {
        per_replicate << "replicate," << kMetricHeader << ",n_evaluated,n_excluded,status,error\n";
        for (const auto& r : rep.rows) {
            per_replicate << r.replicate << ',';
            csv::Writer w(per_replicate);
            write_metric_row(w, r.metrics,
                             {std::to_string(r.n_evaluated), std::to_string(r.n_excluded), r.ok ? "ok" : "failed",
                              r.error});
        }
    }
    {
        csv::Writer w(averaged);
        averaged << kMetricHeader << ",n_ok,n_failed\n";
        for (const auto& a : rep.averaged)
            write_metric_row(w, a.metrics, {std::to_string(a.n_ok), std::to_string(a.n_failed)});
    }
    {
        csv::Writer w(truth);
        truth << "scenario,replicate,subarea_id,truth\n";
        for (const auto& t : rep.truth)
            w.row(std::to_string(t.scenario), std::to_string(t.replicate), t.subarea, t.truth);
    }
}

/// Estimates table: one row per (subarea, group) cell and one "all" row per
/// subarea with the overall (MRP-aggregated) estimate.
inline void write_estimates(std::ostream& out, const AreaHierarchy& hier, const MethodOutput& mo, double alpha) {
    csv::Writer w(out);
    w.row(std::vector<std::string>{"subarea_id", "group", "mean", "median", quantile_label(alpha / 2.0),
                                   quantile_label(1.0 - alpha / 2.0), "sd"});
    auto put = [&](const std::string& area, const std::string& group, const Summary& s) {
        auto f = [](double v) { return std::isfinite(v) ? csv::fmt(v) : std::string("NA"); };
        w.row(std::vector<std::string>{area, group, f(s.mean), f(s.median), f(s.lower), f(s.upper), f(s.sd)});
    };
    const bool cells = mo.fit && mo.spec && mo.spec->latent.n_groups() > 1;
    for (std::size_t j = 0; j < hier.n_subareas(); ++j) {
        if (cells) {
            const auto& lat = mo.spec->latent;
            for (std::size_t g = 0; g < lat.n_groups(); ++g) put(hier.subareas()[j], lat.groups[g], mo.fit->cells[lat.cell(j, g)]);
        }
        put(hier.subareas()[j], "all", mo.subareas[j]);
    }
}

inline json diagnostics_json(const MethodOutput& mo) {
    json d;
    d["method"] = mo.method;
    d["warnings"] = mo.warnings;
    json ex = json::array();
    for (const auto& e : mo.excluded)
        ex.push_back({{"area", e.area}, {"group", e.group}, {"status", to_string(e.status)}});
    d["excluded_direct_estimates"] = ex;
    if (!mo.fit) return d;
    const auto& f = *mo.fit;
    const auto& g = f.diagnostics;
    d["hyper"] = {{"sigma_b", f.hyper.sigma_b}, {"kappa", f.hyper.kappa}, {"phi", f.hyper.phi},
                  {"group_sd", f.hyper.group_sd}};
    d["fixed_effects"] = {{"intercept", f.fixed_effects.intercept},
                          {"covariates", mo.spec->latent.covariate_names},
                          {"coefficients", f.fixed_effects.coefficients}};
    d["outer_iterations"] = g.outer_iterations;
    d["newton_iterations"] = g.newton_iterations;
    d["hyper_rounds"] = g.hyper_rounds;
    d["hyper_evaluations"] = g.hyper_evaluations;
    d["hyper_converged"] = g.hyper_converged;
    d["damping_halvings"] = g.damping_halvings;
    d["final_step"] = g.final_step;
    d["grad_norm"] = g.grad_norm;
    d["ridge"] = g.ridge;
    d["log_marginal"] = g.log_marginal;
    d["linearization_gap"] = g.linearization_gap;
    d["trajectory"] = g.trajectory;
    d["n_observations"] = mo.spec->observations.size();
    json grid = json::array();
    for (const auto& p : f.grid)
        grid.push_back({{"sigma_b", p.hyper.sigma_b}, {"kappa", p.hyper.kappa}, {"log_posterior", p.log_posterior},
                        {"weight", p.weight}});
    if (!grid.empty()) d["grid"] = grid;
    return d;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
}

} // namespace sae::io
