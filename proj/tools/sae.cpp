// Command-line front end: simulate | fit | evaluate | plot.
#include <CLI11.hpp>

#include <iostream>

#include "sae/cli.hpp"

int main(int argc, char** argv) {
    using namespace sae::cli;
    CLI::App app{"Small-area estimation and disaggregation toolkit"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(0, 1);

    std::string toy_dir;
    std::uint64_t toy_seed = 20240601;
    app.add_option("--export-toy", toy_dir, "write the bundled toy dataset to a directory")->group("");
    app.add_option("--toy-seed", toy_seed)->group("");

    SimulateArgs sa;
    auto* sim = app.add_subcommand("simulate", "run the replicated simulation study");
    sim->add_option("--config", sa.config, "study configuration JSON (default: desk-scale study)");
    sim->add_option("--out", sa.out, "output directory")->capture_default_str();
    sim->add_option("--seed", sa.seed, "master seed (overrides the config)");
    sim->add_option("--threads", sa.threads, "worker threads (overrides the config)");
    sim->add_option("--is-variant", sa.variant, "interval-score penalty: paper or standard")
        ->check(CLI::IsMember({"paper", "standard"}));

    FitArgs fa;
    auto* fit = app.add_subcommand("fit", "fit one model to survey data");
    fit->add_option("--config", fa.config, "model JSON")->required();
    fit->add_option("--survey", fa.survey, "survey CSV")->required();
    fit->add_option("--subareas", fa.subareas, "subarea_id,coarse_id CSV")->required();
    fit->add_option("--adjacency", fa.adjacency, "subarea_a,subarea_b CSV")->required();
    fit->add_option("--covariates", fa.covariates, "covariate CSV keyed by subarea_id or coarse_id");
    fit->add_option("--population", fa.population, "subarea_id,group,count CSV");
    fit->add_option("--out", fa.out, "output directory")->capture_default_str();
    fit->add_option("--seed", fa.seed, "posterior draw seed (overrides the model JSON)");
    std::size_t fit_threads = 1;
    fit->add_option("--threads", fit_threads, "accepted for symmetry; fits are single-threaded");

    EvaluateArgs ea;
    std::optional<std::size_t> eval_rep;
    auto* eval = app.add_subcommand("evaluate", "score subarea estimates against the truth");
    eval->add_option("--estimates", ea.estimates, "estimates CSV from fit")->required();
    eval->add_option("--truth", ea.truth, "truth CSV (subarea_id,truth or simulate's truth.csv)")->required();
    eval->add_option("--subareas", ea.subareas, "subarea_id,coarse_id CSV")->required();
    eval->add_option("--out", ea.out, "output directory")->capture_default_str();
    eval->add_option("--method", ea.method, "method label in the metric row")->capture_default_str();
    eval->add_option("--scenario", ea.scenario, "scenario label / truth filter")->capture_default_str();
    eval->add_option("--replicate", eval_rep, "replicate to select from a simulate truth table");
    eval->add_option("--alpha", ea.alpha, "interval level of the estimates")->capture_default_str();
    eval->add_option("--is-variant", ea.variant, "interval-score penalty: paper or standard")
        ->check(CLI::IsMember({"paper", "standard"}))
        ->capture_default_str();

    PlotArgs pa;
    auto* plot = app.add_subcommand("plot", "choropleth SVG of one estimate column");
    plot->add_option("--estimates", pa.estimates, "estimates CSV")->required();
    plot->add_option("--polygons", pa.polygons, "GeoJSON FeatureCollection")->required();
    plot->add_option("--field", pa.field, "column, or qHI_minus_qLO for interval width")->capture_default_str();
    plot->add_option("--out", pa.out, "output SVG")->capture_default_str();
    plot->add_option("--id-key", pa.id_key, "feature property holding the subarea id")->capture_default_str();
    plot->add_option("--title", pa.title, "map title (default: the field name)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kInvalid;
    }

    if (!toy_dir.empty()) {
        try {
            export_toy(toy_dir, toy_seed);
            return kOk;
        } catch (const std::exception& e) {
            std::cerr << "export-toy: " << describe(e) << '\n';
            return exit_code(e);
        }
    }
    if (sim->parsed()) return cmd_simulate(sa);
    if (fit->parsed()) return cmd_fit(fa);
    if (eval->parsed()) {
        ea.replicate = eval_rep;
        return cmd_evaluate(ea);
    }
    if (plot->parsed()) return cmd_plot(pa);
    std::cout << app.help();
    return kInvalid;
}
