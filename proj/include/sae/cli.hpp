#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sae/io.hpp"
#include "sae/pipeline.hpp"
#include "sae/svg.hpp"

namespace sae::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kInternal = 1, kInvalid = 2, kNumeric = 3 };

/// 2 for bad input or configuration, 3 for numeric or convergence failures.
inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const StructuralError*>(&e) ||
        dynamic_cast<const DataError*>(&e) || dynamic_cast<const EstimationError*>(&e) ||
        dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const json::exception*>(&e))
        return kInvalid;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const ConvergenceError*>(&e)) return kNumeric;
    return kInternal;
}

inline std::string describe(const std::exception& e) {
    if (auto v = dynamic_cast<const ValidationError*>(&e)) return "[" + v->rule() + "] " + v->what();
    return e.what();
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Run record written next to every output set. Timestamps are the only
/// fields that differ between reruns.
struct Manifest {
    json j;
    Manifest(const std::string& command, std::uint64_t seed) {
        j["command"] = command;
        j["tool_version"] = kVersion;
        j["seed"] = seed;
        j["started_utc"] = utc_now();
        j["configs"] = json::object();
        j["inputs"] = json::object();
        j["outputs"] = json::array();
    }
    void write(const fs::path& dir) {
        j["finished_utc"] = utc_now();
        io::write_text((dir / "manifest.json").string(), j.dump(2) + "\n");
    }
};

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
    std::string config; // empty: desk-scale defaults
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::optional<std::string> variant;
};

inline StudyConfig load_study(const SimulateArgs& a) {
    StudyConfig c = a.config.empty() ? StudyConfig{} : io::parse_study_config(io::read_json(a.config), a.config);
    if (a.seed) c.seed = *a.seed;
    if (a.threads) c.threads = *a.threads;
    if (a.variant) c.variant = parse_is_variant(*a.variant);
    c.validate();
    return c;
}

inline int cmd_simulate(const SimulateArgs& a, std::ostream& err = std::cerr) {
    try {
        const StudyConfig c = load_study(a);
        const fs::path dir(a.out);
        ensure_dir(dir);
        Manifest man("simulate", c.seed);
        if (!a.config.empty()) man.j["configs"]["study"] = a.config;
        man.j["study"] = io::study_config_json(c);
        const auto rep = run_replications(c);
        std::ostringstream per, avg, truth;
        io::write_study_report(rep, per, avg, truth);
        io::write_text((dir / "replicates.csv").string(), per.str());
        io::write_text((dir / "averaged.csv").string(), avg.str());
        io::write_text((dir / "truth.csv").string(), truth.str());
        man.j["outputs"] = {"truth.csv", "replicates.csv", "averaged.csv"};
        man.j["n_failed_fits"] = rep.warnings.size();
        man.write(dir);
        if (!rep.warnings.empty()) {
            err << rep.warnings.size() << " fits failed and were recorded as failures:\n";
            const std::size_t shown = std::min<std::size_t>(rep.warnings.size(), 10);
            for (std::size_t k = 0; k < shown; ++k) err << "  " << rep.warnings[k] << '\n';
            if (shown < rep.warnings.size()) err << "  ...\n";
        }
        return kOk;
    } catch (const std::exception& e) {
        err << "simulate: " << describe(e) << '\n';
        return exit_code(e);
    }
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
    std::string config; // model JSON
    std::string survey, subareas, adjacency, covariates, population;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
};

/// Inputs for `fit` from user files. Without a population table every
/// subarea gets a single "all" group of unit size.
inline AreaInputs load_inputs(const FitArgs& a, const io::ModelConfig& mc, const AreaHierarchy& hier,
                              const AdjacencyGraph& graph) {
    AreaInputs in;
    in.hier = hier;
    in.structure = std::make_shared<ScaledStructure>(scaled_structure(graph));
    in.factor_names = mc.group_factors;
    if (!a.covariates.empty()) {
        auto ct = io::read_covariates(a.covariates, hier);
        if (ct.coarse && mc.method.data_level == GeoLevel::coarse && !mc.method.covariates.empty())
            throw ValidationError("coarse-covariates", "disaggregation requires covariates indexed at the subarea level");
        in.covariate_names = std::move(ct.names);
        in.covariates = std::move(ct.values);
    } else {
        in.covariates.resize(Eigen::Index(hier.n_subareas()), 0);
    }
    if (!a.population.empty()) {
        in.population = io::read_population(a.population, hier);
        for (const auto& g : in.population.groups())
            if (split_label(g).size() != mc.group_factors.size() && !(mc.group_factors.empty() && g == "all"))
                throw DataError("population group '" + g + "' does not have one component per group factor");
    } else {
        if (mc.method.data_level == GeoLevel::coarse || !mc.method.factors.empty())
            throw DataError("this model needs a population table (--population)");
        in.population = PopulationTable(hier.subareas(), {"all"});
        for (std::size_t j = 0; j < hier.n_subareas(); ++j) in.population.set(j, 0, 1.0);
    }
    return in;
}

inline int cmd_fit(const FitArgs& a, std::ostream& err = std::cerr) {
    const fs::path dir(a.out);
    std::string method = "model";
    try {
        auto mc = io::parse_model_config(io::read_json(a.config), a.config);
        method = mc.method.name;
        if (a.seed) mc.seed = *a.seed;
        auto [hier, graph] = io::read_geography(a.subareas, a.adjacency);
        const SurveyDataset data = io::read_survey(a.survey, hier, mc.outcome);
        if (mc.geo_level && *mc.geo_level != data.geo_level)
            throw ValidationError("geo-level", "model '" + method + "' expects " + to_string(*mc.geo_level) +
                                                   "-indexed data but the survey is " + to_string(data.geo_level) +
                                                   "-indexed");
        if (!mc.geo_level) mc.method.data_level = data.geo_level;
        const AreaInputs in = load_inputs(a, mc, hier, graph);
        ensure_dir(dir);
        Manifest man("fit", mc.seed);
        man.j["configs"]["model"] = a.config;
        man.j["inputs"] = {{"survey", a.survey},         {"subareas", a.subareas},
                           {"adjacency", a.adjacency},   {"covariates", a.covariates},
                           {"population", a.population}};
        FitOptions fo;
        fo.n_draws = mc.n_draws;
        fo.seed = mc.seed;
        fo.alpha = mc.alpha;
        MethodOutput mo;
        try {
            mo = run_method(in, data, mc.method, fo);
        } catch (const std::exception& e) {
            if (exit_code(e) != kNumeric) throw;
            json d{{"method", method}, {"status", "failed"}, {"error", e.what()}};
            io::write_text((dir / "diagnostics.json").string(), d.dump(2) + "\n");
            man.j["outputs"] = {"diagnostics.json"};
            man.write(dir);
            err << "fit: " << describe(e) << " (diagnostics in " << (dir / "diagnostics.json").string() << ")\n";
            return kNumeric;
        }
        std::ostringstream est;
        io::write_estimates(est, hier, mo, mc.alpha);
        io::write_text((dir / "estimates.csv").string(), est.str());
        auto diag = io::diagnostics_json(mo);
        diag["status"] = "ok";
        io::write_text((dir / "diagnostics.json").string(), diag.dump(2) + "\n");
        man.j["outputs"] = {"estimates.csv", "diagnostics.json"};
        man.write(dir);
        for (const auto& w : mo.warnings) err << "fit: warning: " << w << '\n';
        return kOk;
    } catch (const std::exception& e) {
        err << "fit: " << describe(e) << '\n';
        return exit_code(e);
    }
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
    std::string estimates, truth, subareas;
    std::string out = "out";
    std::string method = "model";
    int scenario = 0;
    std::optional<std::size_t> replicate; // selects rows of a simulate truth.csv
    double alpha = 0.10;
    std::string variant = "paper";
};

inline AreaHierarchy read_hierarchy(const std::string& path) {
    const auto t = csv::read_file(path);
    const auto cs = t.column("subarea_id"), cc = t.column("coarse_id");
    std::vector<std::pair<std::string, std::string>> recs;
    for (const auto& r : t.rows) recs.emplace_back(r[cs], r[cc]);
    return make_hierarchy(std::move(recs));
}

/// Truth per subarea in hierarchy order. A simulate truth table is filtered
/// by scenario and replicate.
inline std::vector<double> read_truth(const std::string& path, const AreaHierarchy& hier, int scenario,
                                      std::optional<std::size_t> replicate) {
    const auto t = csv::read_file(path);
    const auto cs = t.column("subarea_id"), ct = t.column("truth");
    const bool multi = t.has_column("replicate");
    std::vector<double> out(hier.n_subareas(), std::numeric_limits<double>::quiet_NaN());
    std::vector<char> seen(hier.n_subareas(), 0);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = path + ":" + std::to_string(t.line_numbers[r]);
        if (multi) {
            if (scenario != 0 && std::stoi(row[t.column("scenario")]) != scenario) continue;
            if (std::stoul(row[t.column("replicate")]) != replicate.value_or(0)) continue;
        }
        auto j = hier.subarea_index(row[cs]);
        if (!j) throw StructuralError(where + ": unknown subarea '" + row[cs] + "'");
        if (seen[*j]) throw DataError(where + ": duplicate truth for '" + row[cs] + "'");
        seen[*j] = 1;
        out[*j] = csv::to_double(row[ct], where + " truth");
    }
    for (std::size_t j = 0; j < out.size(); ++j)
        if (!seen[j]) throw DataError(path + ": no truth for subarea '" + hier.subareas()[j] + "'");
    return out;
}

/// Overall ("all") rows of an estimates table as a MethodOutput.
inline MethodOutput read_estimates(const std::string& path, const AreaHierarchy& hier, const std::string& method) {
    const auto t = csv::read_file(path);
    const auto cs = t.column("subarea_id"), cm = t.column("mean"), cd = t.column("median"), csd = t.column("sd");
    std::vector<std::size_t> q;
    for (std::size_t c = 0; c < t.header.size(); ++c)
        if (t.header[c].size() > 1 && t.header[c][0] == 'q' && std::isdigit(static_cast<unsigned char>(t.header[c][1])))
            q.push_back(c);
    if (q.size() != 2) throw DataError(path + ": expected exactly two quantile columns");
    const bool grouped = t.has_column("group");
    MethodOutput mo;
    mo.method = method;
    mo.subareas.assign(hier.n_subareas(), nan_summary());
    mo.valid.assign(hier.n_subareas(), false);
    std::vector<char> seen(hier.n_subareas(), 0);
    auto num = [](const std::string& s, const std::string& where) {
        return s == "NA" || s.empty() ? std::numeric_limits<double>::quiet_NaN() : csv::to_double(s, where);
    };
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        if (grouped && row[t.column("group")] != "all") continue;
        const std::string where = path + ":" + std::to_string(t.line_numbers[r]);
        auto j = hier.subarea_index(row[cs]);
        if (!j) throw StructuralError(where + ": unknown subarea '" + row[cs] + "'");
        if (seen[*j]) throw DataError(where + ": duplicate estimate for '" + row[cs] + "'");
        seen[*j] = 1;
        Summary s{num(row[cm], where), num(row[cd], where), num(row[q[0]], where), num(row[q[1]], where),
                  num(row[csd], where)};
        mo.valid[*j] = std::isfinite(s.mean) && std::isfinite(s.lower) && std::isfinite(s.upper);
        mo.subareas[*j] = s;
    }
    return mo;
}

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& err = std::cerr) {
    try {
        const auto hier = read_hierarchy(a.subareas);
        const auto truth = read_truth(a.truth, hier, a.scenario, a.replicate);
        const auto mo = read_estimates(a.estimates, hier, a.method);
        const auto ev = evaluate_method(hier, truth, mo, a.scenario, a.alpha, parse_is_variant(a.variant));
        const fs::path dir(a.out);
        ensure_dir(dir);
        Manifest man("evaluate", 0);
        man.j.erase("seed");
        man.j["inputs"] = {{"estimates", a.estimates}, {"truth", a.truth}, {"subareas", a.subareas}};
        man.j["alpha"] = a.alpha;
        man.j["interval_score"] = a.variant;
        std::ostringstream o;
        o << kMetricHeader << ",n_evaluated,n_excluded\n";
        csv::Writer w(o);
        io::write_metric_row(w, ev.row, {std::to_string(ev.n_evaluated), std::to_string(ev.n_excluded)});
        io::write_text((dir / "metrics.csv").string(), o.str());
        man.j["outputs"] = {"metrics.csv"};
        man.write(dir);
        return kOk;
    } catch (const std::exception& e) {
        err << "evaluate: " << describe(e) << '\n';
        return exit_code(e);
    }
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
    std::string estimates, polygons;
    std::string field = "mean";
    std::string out = "map.svg";
    std::string id_key = "subarea_id";
    std::string title;
};

inline int cmd_plot(const PlotArgs& a, std::ostream& err = std::cerr) {
    try {
        const auto features = svg::parse_geojson(io::read_json(a.polygons), a.id_key);
        const auto values = svg::field_values(csv::read_file(a.estimates), a.field);
        svg::PlotOptions po;
        po.title = a.title.empty() ? a.field : a.title;
        const std::string doc = svg::choropleth(features, values, po);
        const fs::path out(a.out);
        if (out.has_parent_path()) ensure_dir(out.parent_path());
        io::write_text(out.string(), doc);
        return kOk;
    } catch (const std::exception& e) {
        err << "plot: " << describe(e) << '\n';
        return exit_code(e);
    }
}

// ---------------------------------------------------------------------------
// Toy dataset

/// Model JSON for one of the study methods.
inline json method_json(const MethodSpec& m, const std::vector<std::string>& group_factors) {
    json j{{"name", m.name},
           {"kind", to_string(m.kind)},
           {"family", to_string(m.family)},
           {"link", to_string(m.link)},
           {"outcome", "rate"},
           {"geo_level", to_string(m.data_level)},
           {"covariates", m.covariates},
           {"group_factors", group_factors},
           {"factors", m.factors},
           {"n_draws", 1000},
           {"seed", 1},
           {"alpha", 0.10}};
    return j;
}

inline void write_survey(const SurveyDataset& d, const fs::path& path) {
    std::ostringstream o;
    csv::Writer w(o);
    w.row("unit_id", "cluster_id", "stratum_id", "area_id", "group", "weight", "outcome", "exposure");
    for (const auto& r : d.records) w.row(r.unit_id, r.cluster_id, r.stratum_id, r.area_id, r.group, r.weight, r.outcome, r.exposure);
    io::write_text(path.string(), o.str());
}

/// Small simulated dataset in the file formats `fit`, `evaluate` and `plot`
/// read: an 8 x 4 geography, scenario 1, one survey at each level.
inline void export_toy(const fs::path& dir, std::uint64_t seed) {
    ensure_dir(dir / "models");
    StudyConfig c;
    c.seed = seed;
    c.n_coarse = 8;
    c.children = 4;
    c.replicates = 2;
    c.n_draws = 500;
    c.methods = {"direct", "fh_disagg", "unit_mrp_disagg"};
    const auto w = make_world(c);
    const auto s = sim::ScenarioConfig::preset(1);
    const auto data = replicate_data(c, w, s, 0);
    const auto& hier = w.inputs.hier;
    std::ostringstream o;
    {
        csv::Writer wr(o);
        wr.row("subarea_id", "coarse_id");
        for (std::size_t j = 0; j < hier.n_subareas(); ++j) wr.row(hier.subareas()[j], hier.coarse_areas()[hier.parent(j)]);
        io::write_text((dir / "subareas.csv").string(), o.str());
    }
    o.str("");
    {
        csv::Writer wr(o);
        wr.row("subarea_a", "subarea_b");
        for (const auto& [a, b] : w.geo.graph.edges()) wr.row(hier.subareas()[a], hier.subareas()[b]);
        io::write_text((dir / "adjacency.csv").string(), o.str());
    }
    o.str("");
    {
        csv::Writer wr(o);
        std::vector<std::string> h{"subarea_id"};
        for (const auto& n : w.inputs.covariate_names) h.push_back(n);
        wr.row(h);
        for (std::size_t j = 0; j < hier.n_subareas(); ++j) {
            std::vector<std::string> r{hier.subareas()[j]};
            for (Eigen::Index k = 0; k < w.inputs.covariates.cols(); ++k)
                r.push_back(csv::fmt(w.inputs.covariates(Eigen::Index(j), k)));
            wr.row(r);
        }
        io::write_text((dir / "covariates.csv").string(), o.str());
    }
    o.str("");
    {
        csv::Writer wr(o);
        wr.row("subarea_id", "group", "count");
        const auto& p = w.inputs.population;
        for (std::size_t j = 0; j < p.n_areas(); ++j)
            for (std::size_t g = 0; g < p.n_groups(); ++g) wr.row(p.areas()[j], p.groups()[g], p.count(j, g));
        io::write_text((dir / "population.csv").string(), o.str());
    }
    o.str("");
    {
        csv::Writer wr(o);
        wr.row("subarea_id", "truth");
        for (std::size_t j = 0; j < hier.n_subareas(); ++j) wr.row(hier.subareas()[j], data.outcomes.truth[j]);
        io::write_text((dir / "truth.csv").string(), o.str());
    }
    write_survey(data.fine, dir / "survey_subarea.csv");
    write_survey(data.coarse, dir / "survey_coarse.csv");

    json fc{{"type", "FeatureCollection"}, {"features", json::array()}};
    for (std::size_t j = 0; j < hier.n_subareas(); ++j) {
        const auto [r, col] = w.geo.cell[j];
        const double x0 = 34.0 + 0.25 * double(col), y0 = 1.0 - 0.25 * double(r + 1);
        json ring = json::array({{x0, y0}, {x0 + 0.25, y0}, {x0 + 0.25, y0 + 0.25}, {x0, y0 + 0.25}, {x0, y0}});
        fc["features"].push_back({{"type", "Feature"},
                                  {"properties", {{"subarea_id", hier.subareas()[j]}, {"coarse_id", hier.coarse_areas()[hier.parent(j)]}}},
                                  {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}}});
    }
    io::write_text((dir / "polygons.geojson").string(), fc.dump() + "\n");

    for (const auto& m : standard_methods())
        io::write_text((dir / "models" / (m.name + ".json")).string(), method_json(m, w.inputs.factor_names).dump(2) + "\n");
    auto bad = standard_method("unit_disagg");
    bad.name = "unit_disagg_identity";
    bad.family = Family::poisson;
    bad.link = Link::identity;
    io::write_text((dir / "models" / "invalid_identity_poisson.json").string(),
                   method_json(bad, w.inputs.factor_names).dump(2) + "\n");
    io::write_text((dir / "study.json").string(), io::study_config_json(c).dump(2) + "\n");
}

} // namespace sae::cli
