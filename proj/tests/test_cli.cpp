#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SAE_CLI_PATH;
const std::string kToy = std::string(SAE_SOURCE_DIR) + "/data/toy/";

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("sae_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    // Exit status of the CLI; stderr is kept in last_err_.
    int run(const std::string& args) {
        const auto err = dir_ / "stderr.txt";
        const std::string cmd = "'" + kCli + "' " + args + " >" + (dir_ / "stdout.txt").string() + " 2>" + err.string();
        const int rc = std::system(cmd.c_str());
        last_err_ = slurp(err);
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    }

    std::string fit_args(const std::string& model, const std::string& survey, const std::string& out) const {
        return "fit --config " + kToy + "models/" + model + " --survey " + kToy + survey + " --subareas " + kToy +
               "subareas.csv --adjacency " + kToy + "adjacency.csv --covariates " + kToy +
               "covariates.csv --population " + kToy + "population.csv --out " + (dir_ / out).string();
    }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path dir_;
    std::string last_err_;
};

std::size_t count_lines_with(const std::string& text, const std::string& needle) {
    std::istringstream in(text);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.find(needle) != std::string::npos;
    return n;
}

} // namespace

TEST_F(CliTest, VersionAndUsage) {
    EXPECT_EQ(run("--version"), 0);
    EXPECT_EQ(run("fit --survey x.csv"), 2);
    EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(CliTest, FitWritesEstimatesAndDiagnostics) {
    ASSERT_EQ(run(fit_args("fh_disagg.json", "survey_coarse.csv", "fh")), 0) << last_err_;
    const auto est = slurp(dir_ / "fh" / "estimates.csv");
    EXPECT_EQ(est.substr(0, est.find('\n')), "subarea_id,group,mean,median,q05,q95,sd");
    EXPECT_EQ(count_lines_with(est, ",all,"), 32u);
    EXPECT_NE(slurp(dir_ / "fh" / "diagnostics.json").find("\"status\": \"ok\""), std::string::npos);
    EXPECT_TRUE(fs::exists(dir_ / "fh" / "manifest.json"));
}

TEST_F(CliTest, EveryToyModelFits) {
    for (const auto& [model, survey] :
         std::vector<std::pair<std::string, std::string>>{{"direct.json", "survey_subarea.csv"},
                                                          {"fh_adm2.json", "survey_subarea.csv"},
                                                          {"fh_mrp_disagg.json", "survey_coarse.csv"},
                                                          {"unit_disagg.json", "survey_coarse.csv"},
                                                          {"unit_mrp_disagg.json", "survey_coarse.csv"}}) {
        EXPECT_EQ(run(fit_args(model, survey, "m")), 0) << model << ": " << last_err_;
        EXPECT_TRUE(fs::exists(dir_ / "m" / "estimates.csv")) << model;
        fs::remove_all(dir_ / "m");
    }
}

TEST_F(CliTest, InvalidModelIsRejectedWithRule) {
    EXPECT_EQ(run(fit_args("invalid_identity_poisson.json", "survey_coarse.csv", "bad")), 2);
    EXPECT_NE(last_err_.find("[identity-link-aggregation]"), std::string::npos) << last_err_;
    EXPECT_FALSE(fs::exists(dir_ / "bad" / "estimates.csv"));
}

TEST_F(CliTest, GeoLevelMismatchIsRejected) {
    EXPECT_EQ(run(fit_args("fh_disagg.json", "survey_subarea.csv", "geo")), 2);
    EXPECT_NE(last_err_.find("[geo-level]"), std::string::npos) << last_err_;
}

TEST_F(CliTest, UnknownSurveyAreaIsRejected) {
    auto survey = slurp(kToy + "survey_subarea.csv");
    const auto at = survey.find(",S02,");
    ASSERT_NE(at, std::string::npos);
    survey.replace(at, 5, ",S77,");
    std::ofstream(dir_ / "survey.csv") << survey;
    EXPECT_EQ(run("fit --config " + kToy + "models/fh_adm2.json --survey " + (dir_ / "survey.csv").string() +
                  " --subareas " + kToy + "subareas.csv --adjacency " + kToy + "adjacency.csv --covariates " + kToy +
                  "covariates.csv --out " + (dir_ / "x").string()),
              2);
    EXPECT_NE(last_err_.find("S77"), std::string::npos) << last_err_;
}

TEST_F(CliTest, MissingInputFileIsAnInputError) {
    EXPECT_EQ(run("fit --config " + kToy + "models/fh_adm2.json --survey /nonexistent.csv --subareas " + kToy +
                  "subareas.csv --adjacency " + kToy + "adjacency.csv --out " + (dir_ / "x").string()),
              2);
}

TEST_F(CliTest, EvaluateAndPlot) {
    ASSERT_EQ(run(fit_args("fh_adm2.json", "survey_subarea.csv", "fit")), 0) << last_err_;
    const auto est = (dir_ / "fit" / "estimates.csv").string();
    ASSERT_EQ(run("evaluate --estimates " + est + " --truth " + kToy + "truth.csv --subareas " + kToy +
                  "subareas.csv --method fh_adm2 --out " + (dir_ / "ev").string()),
              0)
        << last_err_;
    const auto metrics = slurp(dir_ / "ev" / "metrics.csv");
    EXPECT_EQ(metrics.substr(0, metrics.find('\n')),
              "method,scenario,r2,pearson,interval_score,bias,abs_rel_bias,coverage,width,n_evaluated,n_excluded");
    EXPECT_NE(metrics.find("\nfh_adm2,0,"), std::string::npos);

    const auto svg = dir_ / "maps" / "mean.svg";
    ASSERT_EQ(run("plot --estimates " + est + " --polygons " + kToy + "polygons.geojson --out " + svg.string()), 0)
        << last_err_;
    const auto doc = slurp(svg);
    EXPECT_NE(doc.find("<svg"), std::string::npos);
    EXPECT_EQ(count_lines_with(doc, "<path id="), 32u);
    EXPECT_EQ(run("plot --estimates " + est + " --polygons " + kToy + "polygons.geojson --field q95_minus_q05 --out " +
                  (dir_ / "w.svg").string()),
              0)
        << last_err_;

    // a polygon id with no estimate
    auto poly = slurp(kToy + "polygons.geojson");
    const auto at = poly.find("\"S01\"");
    ASSERT_NE(at, std::string::npos);
    poly.replace(at, 5, "\"S99\"");
    std::ofstream(dir_ / "bad.geojson") << poly;
    EXPECT_EQ(run("plot --estimates " + est + " --polygons " + (dir_ / "bad.geojson").string() + " --out " +
                  (dir_ / "bad.svg").string()),
              2);
    EXPECT_NE(last_err_.find("S99"), std::string::npos) << last_err_;
}

TEST_F(CliTest, SimulateIsReproducible) {
    std::ofstream(dir_ / "study.json") << R"({"scenarios": [1], "methods": ["direct", "fh_adm2"], "replicates": 2,
        "geography": {"n_coarse": 4, "children": 4}, "population": {"women_per_subarea": 1500}, "n_draws": 100})";
    const std::string base = "simulate --config " + (dir_ / "study.json").string() + " --out ";
    ASSERT_EQ(run(base + (dir_ / "a").string()), 0) << last_err_;
    ASSERT_EQ(run(base + (dir_ / "b").string() + " --threads 2"), 0) << last_err_;
    for (const char* f : {"replicates.csv", "averaged.csv", "truth.csv"})
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    EXPECT_TRUE(fs::exists(dir_ / "a" / "manifest.json"));

    std::ofstream(dir_ / "bad.json") << R"({"scenarios": [5]})";
    EXPECT_EQ(run("simulate --config " + (dir_ / "bad.json").string() + " --out " + (dir_ / "c").string()), 2);
    EXPECT_NE(last_err_.find("[scenario]"), std::string::npos) << last_err_;
}
