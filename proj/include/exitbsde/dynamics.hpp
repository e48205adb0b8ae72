#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "exitbsde/geometry.hpp"
#include "exitbsde/problem.hpp"

namespace exitbsde {

/// Euler paths on a uniform grid: states X_{t_i} (i = 0..n), Brownian
/// increments dW_i (i = 0..n-1) and the discrete exit index, i.e. the first
/// i with X_{t_i} outside O (n when the path stays inside).
///
/// `first_path` is the global index of path 0; all random draws are keyed by
/// global index, so a slice of a batch is bit-identical to simulating the
/// slice alone. `refinement` is 1 for a coarse batch and m for a batch
/// produced by refine_bridge with factor m.
class PathBatch {
public:
    PathBatch(Grid grid, std::size_t dim, std::size_t n_paths, std::uint64_t seed, std::size_t first_path = 0,
              std::size_t refinement = 1);

    const Grid& grid() const noexcept { return grid_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return n_paths_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t first_path() const noexcept { return first_path_; }
    std::size_t refinement() const noexcept { return refinement_; }

    std::span<const double> state(std::size_t path, std::size_t i) const noexcept {
        return {states_.data() + (path * (grid_.steps() + 1) + i) * dim_, dim_};
    }
    std::span<double> state(std::size_t path, std::size_t i) noexcept {
        return {states_.data() + (path * (grid_.steps() + 1) + i) * dim_, dim_};
    }
    std::span<const double> increment(std::size_t path, std::size_t i) const noexcept {
        return {increments_.data() + (path * grid_.steps() + i) * dim_, dim_};
    }
    std::span<double> increment(std::size_t path, std::size_t i) noexcept {
        return {increments_.data() + (path * grid_.steps() + i) * dim_, dim_};
    }
    std::size_t exit_index(std::size_t path) const noexcept { return exit_index_[path]; }
    void set_exit_index(std::size_t path, std::size_t i) noexcept { exit_index_[path] = i; }
    double exit_time(std::size_t path) const noexcept { return grid_.time(exit_index_[path]); }

    /// Copy of paths [first, first + count).
    PathBatch slice(std::size_t first, std::size_t count) const;

    const std::vector<double>& raw_states() const noexcept { return states_; }
    const std::vector<double>& raw_increments() const noexcept { return increments_; }
    std::vector<double>& raw_states() noexcept { return states_; }
    std::vector<double>& raw_increments() noexcept { return increments_; }
    const std::vector<std::size_t>& raw_exit_indices() const noexcept { return exit_index_; }

private:
    Grid grid_;
    std::size_t dim_;
    std::size_t n_paths_;
    std::uint64_t seed_;
    std::size_t first_path_;
    std::size_t refinement_;
    std::vector<double> states_;
    std::vector<double> increments_;
    std::vector<std::size_t> exit_index_;
};

/// Per-path stopping data consumed by the backward scheme and the error
/// functionals: exit time, exit state and the first grid index at or after
/// the exit time.
struct ExitSchedule {
    std::size_t dim = 0;
    std::vector<double> time;
    std::vector<std::size_t> stop_index;
    std::vector<double> state;
    /// Exit located strictly inside a step by a sampled bridge crossing.
    std::vector<std::uint8_t> interior_crossing;

    std::size_t size() const noexcept { return time.size(); }
    std::span<const double> exit_state(std::size_t path) const noexcept {
        return {state.data() + path * dim, dim};
    }
};

/// Euler scheme X_{i+1} = X_i + b(X_i) h + sigma(X_i) dW_i for paths
/// [first_path, first_path + n_paths) of experiment `seed`.
PathBatch simulate_euler(const ProblemSpec& spec, const Domain& domain, const Grid& grid, std::size_t n_paths,
                         std::uint64_t seed, std::size_t first_path = 0);

/// Inserts factor - 1 Brownian-bridge points inside every coarse step and
/// reruns Euler on the fine grid. The coarse Brownian path is kept: fine
/// increments of a step sum to the coarse increment (to round-off). With
/// constant coefficients the fine states at coarse knots equal the coarse
/// states exactly.
PathBatch refine_bridge(const PathBatch& coarse, const ProblemSpec& spec, const Domain& domain, std::size_t factor,
                        std::uint64_t seed);

/// tau-bar = t_{k} with k the batch exit index; state X_{tau-bar}.
ExitSchedule discrete_exits(const PathBatch& batch);

/// Fine-grid exit time used as ground truth for tau. Needs refinement >= 16.
ExitSchedule exit_oracle(const PathBatch& fine_batch, const Domain& domain);

/// exp(-2 d0 d1 / (h s2)) for endpoints inside (d0, d1 > 0), 1 otherwise.
double bridge_crossing_probability(double d0, double d1, double h, double s2) noexcept;

/// Exit of the continuous Euler path for half-space (or 1D interval) domains:
/// per step, crossing is sampled with the Brownian-bridge probability using
/// the normal variance n a(X_{t_i}) n^T. Endpoint exits are placed at the right
/// knot, sampled interior crossings at mid-step; the exit state is the
/// boundary point of the crossed face.
ExitSchedule exact_exit_halfspace(const PathBatch& batch, const ProblemSpec& spec, const Domain& domain,
                                  std::uint64_t seed);

/// Every +/- sqrt(h) sign sequence of a 1D walk on `grid` (2^n paths, equal
/// weight). Small-n testing only.
PathBatch enumerate_binary_tree(const ProblemSpec& spec, const Domain& domain, const Grid& grid);

/// Little-endian dump: "XBPB" magic, u32 version, u64 n, u64 n_paths, u64 d,
/// u64 seed, u64 first_path, u64 refinement, f64 T; then per path
/// (n+1)*d f64 states, n*d f64 increments, u64 exit index.
void write_path_batch(const std::filesystem::path& file, const PathBatch& batch);
PathBatch read_path_batch(const std::filesystem::path& file);

}  // namespace exitbsde
