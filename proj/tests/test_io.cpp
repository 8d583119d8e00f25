#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sae/io.hpp"

using namespace sae;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kToy = std::string(SAE_SOURCE_DIR) + "/data/toy/";

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() / ("sae_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string file(const std::string& name, const std::string& text) const {
        const auto p = (path_ / name).string();
        std::ofstream(p) << text;
        return p;
    }

private:
    fs::path path_;
};

std::string rule_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ValidationError& e) {
        return e.rule();
    }
    return "";
}

} // namespace

TEST(Json, SyntaxErrorsCarryLineNumbers) {
    TempDir d;
    const auto p = d.file("bad.json", "{\n  \"kind\": \"area\",\n  \"family\": gaussian\n}\n");
    try {
        io::read_json(p);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.rule(), "json");
        EXPECT_NE(std::string(e.what()).find("bad.json:3:"), std::string::npos) << e.what();
    }
    EXPECT_THROW(io::read_json(d.file("x", "") + ".missing"), DataError);
}

TEST(ModelConfig, DefaultsFollowFamily) {
    auto m = io::parse_model_config(json{{"kind", "unit"}, {"family", "poisson"}});
    EXPECT_EQ(m.method.link, Link::log);
    EXPECT_EQ(m.outcome, OutcomeKind::rate);
    auto a = io::parse_model_config(json::object());
    EXPECT_EQ(a.method.kind, MethodKind::area);
    EXPECT_EQ(a.method.family, Family::gaussian);
    EXPECT_EQ(a.method.link, Link::logit);
    EXPECT_EQ(a.outcome, OutcomeKind::prevalence);
    EXPECT_FALSE(a.geo_level.has_value());
    auto c = io::parse_model_config(json{{"geo_level", "coarse"}, {"hyper", {{"kappa", 0.3}}}, {"fixed", {{"kappa", true}}}});
    EXPECT_EQ(c.method.data_level, GeoLevel::coarse);
    EXPECT_EQ(c.method.hyper.kappa, 0.3);
    EXPECT_TRUE(c.method.fixed.kappa);
}

TEST(ModelConfig, RejectsBadInput) {
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"familly", "poisson"}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"family", "weibull"}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"kind", "mixed"}}); }), "method-kind");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"hyper", {{"kappa", 1.5}}}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"hyper", {{"tau", 1.0}}}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"n_draws", 1}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"alpha", 0.0}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"n_draws", "many"}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"factors", {"age"}}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_model_config(json{{"geo_level", "region"}}); }), "config");
}

TEST(ModelConfig, ToyModelsParse) {
    for (const auto& e : fs::directory_iterator(kToy + "models")) {
        const auto j = io::read_json(e.path().string());
        EXPECT_NO_THROW(io::parse_model_config(j)) << e.path();
    }
}

TEST(StudyConfig, ScenarioOverridesAndUnknownScenario) {
    auto c = io::parse_study_config(json{{"scenarios", {1, {{"id", 3}, {"sd_area", 0.0}, {"both", {{"ndvi", 0.0}}}}}},
                                         {"replicates", 3},
                                         {"geography", {{"n_coarse", 6}, {"children", 2}}}});
    ASSERT_EQ(c.scenarios.size(), 2u);
    EXPECT_EQ(c.scenarios[1].id, 3);
    EXPECT_EQ(c.scenarios[1].sd_area, 0.0);
    EXPECT_EQ(c.scenarios[1].urban.ndvi, 0.0);
    EXPECT_EQ(c.scenarios[1].rural.mobile, -0.08);
    EXPECT_EQ(c.replicates, 3u);
    EXPECT_EQ(c.n_coarse, 6u);
    EXPECT_EQ(rule_of([] { io::parse_study_config(json{{"scenarios", {5}}}); }), "scenario");
    EXPECT_EQ(rule_of([] { io::parse_study_config(json{{"scenarios", {{{"id", 2}, {"sd_area", -1.0}}}}}); }), "scenario");
    EXPECT_EQ(rule_of([] { io::parse_study_config(json{{"replicate", 3}}); }), "config");
    EXPECT_EQ(rule_of([] { io::parse_study_config(json{{"scenarios", {{{"id", 1}, {"rural", {{"age", {0.1}}}}}}}}); }),
              "config");
    EXPECT_EQ(rule_of([] { io::parse_study_config(json{{"methods", {"fh_x"}}}); }), "method");
}

TEST(StudyConfig, ResolvedJsonRoundTrips) {
    auto c = io::parse_study_config(json{{"scenarios", {4, 2}}, {"interval_score", "standard"}, {"treatment", "grid"}});
    const json j = io::study_config_json(c);
    const auto back = io::parse_study_config(j);
    EXPECT_EQ(io::study_config_json(back), j);
    EXPECT_EQ(back.scenarios[0].urban.educ, -0.5);
    EXPECT_EQ(back.variant, IntervalScoreVariant::standard);
    EXPECT_EQ(back.treatment, HyperTreatment::grid);
    EXPECT_NO_THROW(io::parse_study_config(io::read_json(kToy + "study.json")));
}

TEST(Tables, ToyGeographyAndSurveys) {
    const auto [hier, graph] = io::read_geography(kToy + "subareas.csv", kToy + "adjacency.csv");
    EXPECT_EQ(hier.n_subareas(), graph.n_nodes());
    EXPECT_GT(graph.n_edges(), 0u);
    const auto fine = io::read_survey(kToy + "survey_subarea.csv", hier, OutcomeKind::rate);
    const auto coarse = io::read_survey(kToy + "survey_coarse.csv", hier, OutcomeKind::rate);
    EXPECT_EQ(fine.geo_level, GeoLevel::fine);
    EXPECT_EQ(coarse.geo_level, GeoLevel::coarse);
    EXPECT_EQ(fine.records.size(), coarse.records.size());
    const auto cov = io::read_covariates(kToy + "covariates.csv", hier);
    EXPECT_FALSE(cov.coarse);
    EXPECT_EQ(cov.names, (std::vector<std::string>{"ntl", "health", "hh", "edu"}));
    const auto pop = io::read_population(kToy + "population.csv", hier);
    EXPECT_EQ(pop.n_areas(), hier.n_subareas());
}

TEST(Tables, SurveyLevelErrors) {
    TempDir d;
    const auto subs = d.file("s.csv", "subarea_id,coarse_id\nS1,A\nS2,A\nS3,B\n");
    const auto adj = d.file("a.csv", "subarea_a,subarea_b\nS1,S2\nS2,S3\n");
    const auto [hier, graph] = io::read_geography(subs, adj);
    const std::string head = "unit_id,cluster_id,stratum_id,area_id,group,weight,outcome,exposure\n";
    const auto mixed = d.file("m.csv", head + "u1,c1,h,S1,,1,0,1\nu2,c2,h,B,,1,1,1\n");
    EXPECT_EQ(rule_of([&] { io::read_survey(mixed, hier, OutcomeKind::prevalence); }), "geo-level");
    const auto unknown = d.file("u.csv", head + "u1,c1,h,S9,,1,0,1\n");
    EXPECT_THROW(io::read_survey(unknown, hier, OutcomeKind::prevalence), StructuralError);
    const auto bad = d.file("b.csv", head + "u1,c1,h,S1,,1,0,1\nu2,c1,h,S1,,x,0,1\n");
    try {
        io::read_survey(bad, hier, OutcomeKind::prevalence);
        FAIL();
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("b.csv:3"), std::string::npos) << e.what();
    }
    const auto orphan = d.file("o.csv", "subarea_id,coarse_id\nS1,A\nS2,\n");
    EXPECT_THROW(io::read_geography(orphan, adj), StructuralError);
}

TEST(Tables, CoarseCovariatesAreCopiedToChildren) {
    TempDir d;
    const auto [hier, graph] = io::read_geography(d.file("s.csv", "subarea_id,coarse_id\nS1,A\nS2,A\nS3,B\n"),
                                                  d.file("a.csv", "subarea_a,subarea_b\nS1,S2\n"));
    const auto cov = io::read_covariates(d.file("c.csv", "coarse_id,x\nB,2\nA,1\n"), hier);
    EXPECT_TRUE(cov.coarse);
    EXPECT_EQ(cov.values(0, 0), 1.0);
    EXPECT_EQ(cov.values(1, 0), 1.0);
    EXPECT_EQ(cov.values(2, 0), 2.0);
    EXPECT_THROW(io::read_covariates(d.file("m.csv", "coarse_id,x\nA,1\n"), hier), DataError);
    EXPECT_THROW(io::read_covariates(d.file("p.csv", "subarea_id,x\nS1,1\nS1,2\nS2,1\nS3,1\n"), hier), DataError);
    EXPECT_THROW(io::read_covariates(d.file("q.csv", "subarea_id,x\nS1,1\nS2,1\nS4,1\n"), hier), StructuralError);
}

TEST(Writers, QuantileLabels) {
    EXPECT_EQ(io::quantile_label(0.05), "q05");
    EXPECT_EQ(io::quantile_label(0.95), "q95");
    EXPECT_EQ(io::quantile_label(0.025), "q025");
    EXPECT_EQ(io::quantile_label(0.975), "q975");
    EXPECT_EQ(io::quantile_label(0.5), "q50");
}

TEST(Writers, EstimatesTable) {
    AreaHierarchy h = make_hierarchy({{"S1", "A"}, {"S2", "A"}}, std::vector<std::string>{"A"});
    MethodOutput mo;
    mo.method = "direct";
    mo.subareas = {{0.1, 0.1, 0.05, 0.2, 0.02}, nan_summary()};
    mo.valid = {true, false};
    std::ostringstream out;
    io::write_estimates(out, h, mo, 0.10);
    std::istringstream in(out.str());
    const auto t = csv::parse(in);
    EXPECT_EQ(t.header, (std::vector<std::string>{"subarea_id", "group", "mean", "median", "q05", "q95", "sd"}));
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.rows[0][1], "all");
    EXPECT_EQ(std::stod(t.rows[0][4]), 0.05);
    EXPECT_EQ(t.rows[1][2], "NA");
}

TEST(Writers, StudyReportColumns) {
    StudyReport rep;
    ReplicateRow r;
    r.scenario = 2;
    r.replicate = 1;
    r.method = r.metrics.method = "m";
    r.metrics.scenario = 2;
    r.ok = false;
    r.error = "fit failed, badly";
    rep.rows.push_back(r);
    rep.averaged = average_rows(rep.rows);
    rep.truth.push_back({2, 1, "S1", 0.125});
    std::ostringstream a, b, c;
    io::write_study_report(rep, a, b, c);
    std::istringstream ia(a.str()), ib(b.str()), ic(c.str());
    const auto ta = csv::parse(ia), tb = csv::parse(ib), tc = csv::parse(ic);
    EXPECT_EQ(ta.header.front(), "replicate");
    EXPECT_EQ(ta.rows[0][ta.column("status")], "failed");
    EXPECT_EQ(ta.rows[0][ta.column("error")], "fit failed, badly");
    for (const char* col : {"r2", "pearson", "interval_score", "bias", "abs_rel_bias", "coverage", "width"})
        EXPECT_TRUE(tb.has_column(col)) << col;
    EXPECT_EQ(tb.rows[0][tb.column("n_failed")], "1");
    EXPECT_EQ(tc.rows[0], (std::vector<std::string>{"2", "1", "S1", "0.125"}));
}
