#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exitbsde/bsde.hpp"

namespace exitbsde {

/// Monte Carlo estimate with its standard error.
struct Estimate {
    double value = 0.0;
    double std_error = 0.0;
};

/// Which stopping time bounds the error functional: the horizon T, or
/// theta = tau ^ tau-bar per path.
enum class ThetaMode { Horizon, Stopped };

struct ErrorEstimate {
    double value = 0.0;
    double std_error = 0.0;
    /// max_i E sup_{[t_i, t_{i+1}], t <= theta} |Y_t - Ybar_{t_i}|^2.
    double y_part = 0.0;
    /// E int_0^theta |Z_t - Zbar_{phi(t)}|^2 dt.
    double z_part = 0.0;
    /// Coarse interval attaining the max in y_part.
    std::size_t argmax_step = 0;
};

/// Streaming estimator of the squared strong error
///   max_i E sup_{t in [t_i, t_{i+1}]} 1_{t <= theta} |Y_t - Ybar_{t_i}|^2
///     + E int_0^theta |Z_t - Zbar_{phi(t)}|^2 dt
/// for both theta modes at once. Y and Z come from the reference solution on
/// the fine path stopped at the reference exit; theta = min(reference exit,
/// scheme exit) in Stopped mode. Sup and integral use fine sub-knots (left
/// point rule for the integral).
class StrongErrorAccumulator {
public:
    explicit StrongErrorAccumulator(const Grid& coarse);

    /// `fine` holds paths [offset, offset + fine.size()) of the population
    /// solved in `tables`. `reference` is chunk-local with stop indices in fine
    /// units; `scheme_exit_time` is chunk-local.
    void add(const PathBatch& fine, const BackwardTables& tables, const ProblemSpec& spec,
             const ExitSchedule& reference, std::span<const double> scheme_exit_time, std::size_t offset);

    ErrorEstimate finish(ThetaMode mode) const;
    std::size_t count() const noexcept { return count_; }

private:
    struct Sums {
        std::vector<double> a;
        std::vector<double> aa;
        std::vector<double> ab;
        double b = 0.0;
        double bb = 0.0;
    };
    Grid coarse_;
    Sums horizon_;
    Sums stopped_;
    std::size_t count_ = 0;
};

/// One-shot strong error of `tables` on a refined copy `fine` of the same paths.
ErrorEstimate strong_error(const PathBatch& fine, const BackwardTables& tables, const ProblemSpec& spec,
                           ThetaMode mode, const ExitSchedule& reference, const ExitSchedule& scheme);

struct ExitError {
    Estimate abs;
    Estimate signed_mean;
};

/// E|tau - tau-bar| and E[tau - tau-bar] over paths, with tau taken from
/// `reference` and tau-bar from `scheme`.
ExitError exit_error(const ExitSchedule& scheme, const ExitSchedule& reference);
ExitError exit_error(std::span<const double> scheme_time, std::span<const double> reference_time);

struct SlopePoint {
    double h = 0.0;
    double value = 0.0;
    double std_error = 0.0;
};

/// Least-squares line through (log h, log value).
struct SlopeFit {
    std::vector<SlopePoint> points;
    /// Per input point: excluded because value <= 0 or not finite.
    std::vector<bool> excluded;
    /// The largest-h point was within 3 standard errors of its neighbour and dropped.
    bool dropped_largest_h = false;
    std::size_t used = 0;
    double slope = 0.0;
    double intercept = 0.0;
    double residual_norm = 0.0;
    /// Student-t half-width of the slope at `confidence`.
    double half_width = 0.0;
    double confidence = 0.95;
};

/// Throws InsufficientPoints with fewer than 3 usable points (NonPositiveValue
/// when exclusions caused the shortfall).
SlopeFit fit_slope(std::span<const SlopePoint> points, bool drop_guard = true, double confidence = 0.95);

/// One row of the report table.
struct ErrorReport {
    std::string benchmark;
    std::string exit_mode;
    std::string engine;
    std::size_t steps = 0;
    double h = 0.0;
    std::uint64_t seed = 0;
    std::size_t n_paths = 0;
    std::size_t m_fine = 0;
    Estimate err2_T;
    Estimate err2_stopped;
    Estimate exit_abs_err;
    Estimate exit_signed_err;
    Estimate r_y;
    Estimate r_z;
    Estimate y0;
    double y0_bias = 0.0;
    double max_picard_residual = 0.0;
    std::size_t max_picard_iterations = 0;
};

struct EntryOptions {
    std::size_t steps = 8;
    std::size_t n_paths = 1000;
    std::size_t m_fine = 64;
    std::uint64_t seed = 1;
    PicardOptions picard;
    /// Also solve with exact half-space exit sampling.
    bool exact_mode = false;
    /// Compute R(Y) and R(Z).
    bool regularity = false;
    /// Refine paths and compute exit and strong errors; off leaves them NaN.
    bool fine_pass = true;
    /// Paths per fine-grid chunk.
    std::size_t chunk = 512;
};

struct EntryResult {
    ErrorReport discrete;
    std::optional<ErrorReport> exact;
};

/// simulate -> solve -> refine -> oracle -> error functionals for one grid.
/// Reference-dependent fields are NaN when the problem has no reference.
EntryResult run_entry(const ProblemSpec& spec, const Domain& domain, const CondExpEngine& engine,
                      const EntryOptions& options, const std::string& benchmark, const std::string& engine_label);

/// Frozen CSV column order.
const std::vector<std::string>& report_columns();
void write_report_csv(std::ostream& os, std::span<const ErrorReport> rows);
void write_report_csv(const std::filesystem::path& file, std::span<const ErrorReport> rows);
std::vector<ErrorReport> read_report_csv(const std::filesystem::path& file);

/// Named metric of a report row (column name without the _se suffix).
Estimate report_metric(const ErrorReport& row, const std::string& metric);

}  // namespace exitbsde
