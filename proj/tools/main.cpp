#include <CLI11.hpp>

#include <exception>
#include <iostream>

#include "exitbsde/cli.hpp"

namespace {

int run_verb(const std::string& path, const exitbsde::Overrides& overrides) {
    auto config = exitbsde::load_config(path);
    exitbsde::apply_overrides(config, overrides);
    const auto outcome = exitbsde::run_experiment(config, std::cout);
    std::cout << "wrote " << outcome.csv.string() << " and " << outcome.summary.string() << '\n';
    return outcome.accepted ? 0 : 1;
}

int validate_verb(const std::string& path, const exitbsde::Overrides& overrides) {
    auto config = exitbsde::load_config(path);
    exitbsde::apply_overrides(config, overrides);
    return exitbsde::validate_experiment(config, std::cout) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Euler/BSDE exit-time experiments"};
    app.require_subcommand(1);

    exitbsde::Overrides overrides;
    std::uint64_t seed = 0;
    std::size_t paths = 0;
    std::string out_dir;
    auto* seed_opt = app.add_option("--seed", seed, "Override the config seed")->expected(1);
    auto* paths_opt = app.add_option("--paths", paths, "Override the number of paths")->check(CLI::PositiveNumber);
    auto* out_opt = app.add_option("--out-dir", out_dir, "Override the output directory");

    std::string config_path;
    auto* run = app.add_subcommand("run", "Run every ladder entry and write CSV + JSON reports");
    run->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    auto* validate = app.add_subcommand("validate", "Check domain assumptions and the reference solution");
    validate->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    std::vector<std::string> csvs;
    auto* report = app.add_subcommand("report", "Re-fit slopes from saved CSV reports");
    report->add_option("csv", csvs, "Report CSV files")->required()->check(CLI::ExistingFile);

    for (auto* sub : {run, validate, report}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    if (*seed_opt) overrides.seed = seed;
    if (*paths_opt) overrides.paths = paths;
    if (*out_opt) overrides.out_dir = out_dir;

    try {
        if (*run) return run_verb(config_path, overrides);
        if (*validate) return validate_verb(config_path, overrides);
        std::vector<std::filesystem::path> files(csvs.begin(), csvs.end());
        const auto fits = exitbsde::report_csvs(files, overrides.out_dir, std::cout);
        return fits.empty() ? 1 : 0;
    } catch (const exitbsde::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
