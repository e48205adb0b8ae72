#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "exitbsde/dynamics.hpp"
#include "exitbsde/regression.hpp"

namespace exitbsde {

/// Closed-form conditional expectation at step i given X_{t_i} = x:
/// component -1 returns E[Y_{t_{i+1}}], component k returns E[Y_{t_{i+1}} dW_i^k].
using OracleFn = std::function<double(std::size_t step, const Grid& grid, std::span<const double> x, int component)>;

enum class EngineMode { Regression, Analytic, ExactTree };

/// How the backward sweep evaluates E_i[.].
///
/// Regression fits one model per response on the alive paths; Analytic calls
/// the oracle and never looks at the sample; ExactTree averages over paths
/// whose predictors are exactly equal (enumerated trees, tiny samples).
class CondExpEngine {
public:
    static CondExpEngine regression(BasisSpec basis = BasisSpec::hypercube());
    static CondExpEngine analytic(OracleFn oracle);
    static CondExpEngine exact_tree();

    EngineMode mode() const noexcept { return mode_; }
    const BasisSpec& basis() const noexcept { return basis_; }
    const OracleFn& oracle() const noexcept { return oracle_; }

    /// Sample-based estimate of E[response | predictor] at every sample
    /// (regression or group means; Analytic mode uses the default hypercube).
    /// Identical predictors collapse to the plain sample mean.
    std::vector<double> project(std::span<const double> predictors, std::size_t dim,
                                std::span<const double> responses) const;

private:
    EngineMode mode_ = EngineMode::Regression;
    BasisSpec basis_;
    OracleFn oracle_;
};

struct PicardOptions {
    std::size_t max_iter = 20;
    double tol = 1e-12;
};

/// Per-step Picard diagnostics, aggregated over alive paths.
struct StepDiagnostics {
    std::size_t alive = 0;
    std::size_t max_iterations = 0;
    double max_residual = 0.0;
};

/// Ybar (n+1 values per path), Zbar (n rows of d per path) and the stopping
/// index; index i is alive iff i < stop_index.
class BackwardTables {
public:
    BackwardTables() = default;
    BackwardTables(std::size_t steps, std::size_t dim, std::size_t n_paths);

    std::size_t steps() const noexcept { return steps_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return n_paths_; }

    double y(std::size_t path, std::size_t i) const noexcept { return y_[path * (steps_ + 1) + i]; }
    double& y(std::size_t path, std::size_t i) noexcept { return y_[path * (steps_ + 1) + i]; }
    std::span<const double> z(std::size_t path, std::size_t i) const noexcept {
        return {z_.data() + (path * steps_ + i) * dim_, dim_};
    }
    std::span<double> z(std::size_t path, std::size_t i) noexcept {
        return {z_.data() + (path * steps_ + i) * dim_, dim_};
    }
    bool alive(std::size_t path, std::size_t i) const noexcept { return i < stop_index_[path]; }
    std::size_t stop_index(std::size_t path) const noexcept { return stop_index_[path]; }
    void set_stop_index(std::size_t path, std::size_t i) noexcept { stop_index_[path] = i; }

    /// Mean of Ybar_0 over paths.
    double y0() const;
    /// Standard error of y0 (sample std of Ybar_{t_1} over sqrt(N)).
    double y0_stderr() const;

    std::vector<StepDiagnostics>& diagnostics() noexcept { return diagnostics_; }
    const std::vector<StepDiagnostics>& diagnostics() const noexcept { return diagnostics_; }

    const std::vector<double>& raw_y() const noexcept { return y_; }
    const std::vector<double>& raw_z() const noexcept { return z_; }
    std::vector<double>& raw_y() noexcept { return y_; }
    std::vector<double>& raw_z() noexcept { return z_; }

private:
    std::size_t steps_ = 0;
    std::size_t dim_ = 0;
    std::size_t n_paths_ = 0;
    std::vector<double> y_;
    std::vector<double> z_;
    std::vector<std::size_t> stop_index_;
    std::vector<StepDiagnostics> diagnostics_;
};

/// Backward scheme on `batch`, stopped according to `exits` (defaults to the
/// batch's discrete exits). Ybar = g(tau, X_tau) and Zbar = 0 from the stop
/// index on; on alive indices
///   Zbar_i = E_i[(Ybar_{i+1} - E_i[Ybar_{i+1}]) dW_i] / h,
///   Ybar_i = E_i[Ybar_{i+1}] + h f(t_i, X_i, Ybar_i, Zbar_i)  (Picard).
/// E_i is computed on the alive paths with predictor X_{t_i}; at i = 0 the
/// plain sample mean is used.
BackwardTables backward_solve(const PathBatch& batch, const ProblemSpec& spec, const CondExpEngine& engine,
                              const PicardOptions& picard = {}, const ExitSchedule* exits = nullptr);

/// Little-endian dump: "XBBT" magic, u32 version, u64 n, u64 n_paths, u64 d;
/// then per path (n+1) f64 Ybar, n*d f64 Zbar, u64 stop index.
void write_backward_tables(const std::filesystem::path& file, const BackwardTables& tables);
BackwardTables read_backward_tables(const std::filesystem::path& file);

/// Reference solution along fine path `path`: y[j] = u(t_j ^ tau, X_{t_j ^ tau})
/// for j = 0..n_f and z[j*d + k] = 1_{j < stop} (Du sigma)(t_j, X_{t_j})_k for
/// j < n_f, where the path stops at fine index `stop` with exit data
/// (exit_time, exit_state).
void reference_solution(const PathBatch& fine, std::size_t path, const ProblemSpec& spec, std::size_t stop,
                        double exit_time, std::span<const double> exit_state, std::span<double> y,
                        std::span<double> z);

struct RegularityEstimate {
    double r_y = 0.0;
    double r_y_stderr = 0.0;
    double r_z = 0.0;
    double r_z_stderr = 0.0;
    /// Contribution of each coarse interval to r_z.
    std::vector<double> r_z_per_step;
};

/// Streaming estimator of
///   R(Y) = max_i E sup_{[t_i, t_{i+1}]} |Y_t - Y_{t_i}|^2,
///   R(Z) = E int_0^T |Z_t - hatZ_{phi(t)}|^2 dt,
/// with Y_t = u(t ^ tau, X_{t ^ tau}) and Z_t = 1_{t < tau} Du sigma(X_t) on a
/// fine grid, and hatZ_i = h^{-1} E_i[int_{t_i}^{t_{i+1}} Z ds] by the engine's
/// projection over paths with tau > t_i. Fine chunks of the same population are
/// fed with `add`; `finish` does the projections.
class RegularityAccumulator {
public:
    RegularityAccumulator(const Grid& coarse, std::size_t dim, std::size_t n_paths, CondExpEngine engine);

    /// `fine` covers paths [offset, offset + fine.size()); `exits` are its
    /// fine-grid exit data (stop index in fine units).
    void add(const PathBatch& fine, const ProblemSpec& spec, const ExitSchedule& exits, std::size_t offset);

    RegularityEstimate finish() const;

private:
    Grid coarse_;
    std::size_t dim_;
    std::size_t n_paths_;
    CondExpEngine engine_;
    std::vector<double> sup_sum_;
    std::vector<double> sup_sumsq_;
    std::vector<double> within_step_;
    std::vector<double> within_;      // per path, sum over intervals of the within-interval term
    std::vector<double> average_;     // (path, i, k) interval averages of Z
    std::vector<double> predictor_;   // (path, i, k) X at t_i
    std::vector<std::uint8_t> alive_; // (path, i) tau > t_i
    std::size_t added_ = 0;
};

/// R(Y) and R(Z) for a fine batch with fine exit data. Needs reference u and Du.
RegularityEstimate hatz_diagnostic(const PathBatch& fine, const ProblemSpec& spec, const ExitSchedule& fine_exits,
                                   const Grid& coarse, const CondExpEngine& engine);

}  // namespace exitbsde
