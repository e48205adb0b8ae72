#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "exitbsde/analysis.hpp"
#include "exitbsde/benchmarks.hpp"

namespace exitbsde {

inline constexpr int kConfigSchemaVersion = 1;

/// Declared pass condition for a run: either a slope window over the ladder
/// or |value - target| <= tolerance at one ladder entry.
struct AcceptanceRule {
    std::string metric;
    std::string exit_mode = "discrete";
    std::optional<double> slope_lower;
    std::optional<double> slope_upper;
    std::optional<std::size_t> steps;
    std::optional<double> target;
    double tolerance = 0.0;
};

struct PieceConfig {
    std::string kind;
    Point normal;
    double offset = 0.0;
    Point center;
    double radius = 1.0;
    bool complement = false;
    Point semi_axes;
};

/// Inline problem: constant b and sigma, f = 0, g(t, x) = c + <a, x>.
struct InlineProblem {
    std::string name = "inline";
    std::size_t dim = 1;
    Point x0;
    Point drift;
    std::vector<double> diffusion;  // row-major
    double terminal_constant = 0.0;
    Point terminal_linear;
    double horizon = 1.0;
    double domain_lipschitz = 1.0;
    std::vector<PieceConfig> pieces;
};

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    std::string benchmark;
    std::optional<InlineProblem> problem;
    std::vector<std::size_t> ladder;
    std::size_t n_paths = 1000;
    std::size_t m_fine = 64;
    std::uint64_t seed = 1;
    std::string engine = "regression";
    BasisSpec basis;
    PicardOptions picard;
    std::vector<std::string> theta_modes = {"T", "stopped"};
    bool exact_mode = false;
    bool regularity = false;
    bool fine_pass = true;
    std::size_t chunk = 512;
    std::filesystem::path out_dir = "out";
    std::string csv_name = "report.csv";
    std::string summary_name = "summary.json";
    std::vector<AcceptanceRule> acceptance;
    bool benchmark_acceptance = false;
    std::optional<double> validator_lipschitz;
    std::size_t validation_samples = 1000;
    std::uint64_t validation_seed = 1;
};

/// Parses and validates a JSON config; errors are ConfigError naming the field
/// (or the line and column for syntax errors).
ExperimentConfig parse_config(const std::string& text, const std::string& source = "config");
ExperimentConfig load_config(const std::filesystem::path& file);

/// Command-line overrides.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    std::optional<std::filesystem::path> out_dir;
};
void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

/// Benchmark named by the config, or one assembled from the inline problem.
Benchmark resolve_problem(const ExperimentConfig& config);
/// Engine from the config; analytic mode needs the problem's oracle.
CondExpEngine resolve_engine(const ExperimentConfig& config, const Benchmark& problem);
std::string engine_label(const ExperimentConfig& config);

/// Checks Lh < 1 and refinement constraints against the resolved problem.
void check_config(const ExperimentConfig& config, const Benchmark& problem);

struct RunOutcome {
    std::vector<ErrorReport> rows;
    std::vector<SlopeFit> fits;
    bool accepted = true;
    std::filesystem::path csv;
    std::filesystem::path summary;
};

/// `run`: every ladder entry, CSV + JSON summary, acceptance rules.
RunOutcome run_experiment(const ExperimentConfig& config, std::ostream& log);
/// `validate`: assumption validator and registration check; true when all pass.
bool validate_experiment(const ExperimentConfig& config, std::ostream& out);
/// `report`: slope fits per (benchmark, exit mode, engine, seed) over saved CSVs.
/// Writes summary.json into `out_dir` when given.
std::vector<SlopeFit> report_csvs(const std::vector<std::filesystem::path>& files,
                                  const std::optional<std::filesystem::path>& out_dir, std::ostream& out);

}  // namespace exitbsde
