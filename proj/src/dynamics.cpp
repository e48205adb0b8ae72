#include "exitbsde/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "exitbsde/binary_io.hpp"
#include "exitbsde/parallel.hpp"
#include "exitbsde/rng.hpp"

namespace exitbsde {

namespace {

constexpr char kBatchMagic[4] = {'X', 'B', 'P', 'B'};
constexpr std::uint32_t kBatchVersion = 1;

/// One Euler step x += b(x) h + sigma(x) dw using caller-owned scratch.
struct EulerStepper {
    const ProblemSpec& spec;
    std::vector<double> b;
    std::vector<double> sigma;
    std::vector<double> next;

    explicit EulerStepper(const ProblemSpec& s)
        : spec(s), b(s.dim), sigma(s.dim * s.dim), next(s.dim) {
        if (spec.drift.is_constant()) b = spec.drift.constant_value();
        if (spec.diffusion.is_constant()) sigma = spec.diffusion.constant_value();
    }

    void step(std::span<const double> x, double h, std::span<const double> dw, std::span<double> out) {
        const std::size_t d = spec.dim;
        if (!spec.drift.is_constant()) spec.drift(x, b);
        if (!spec.diffusion.is_constant()) spec.diffusion(x, sigma);
        for (std::size_t r = 0; r < d; ++r) {
            double v = x[r] + b[r] * h;
            for (std::size_t c = 0; c < d; ++c) v += sigma[r * d + c] * dw[c];
            next[r] = v;
        }
        for (std::size_t r = 0; r < d; ++r) {
            if (!std::isfinite(next[r])) {
                throw Error(ErrorCode::NonFiniteState, "Euler state became non-finite in problem '" + spec.name + "'");
            }
            out[r] = next[r];
        }
    }
};

void check_x0(const ProblemSpec& spec, const Domain& domain) {
    spec.validate();
    require(domain.dim() == spec.dim, ErrorCode::InvalidArgument, "domain and problem dimensions differ");
    for (double v : spec.x0) require(std::isfinite(v), ErrorCode::NonFiniteState, "x0 must be finite");
}

}  // namespace

PathBatch::PathBatch(Grid grid, std::size_t dim, std::size_t n_paths, std::uint64_t seed, std::size_t first_path,
                     std::size_t refinement)
    : grid_(grid),
      dim_(dim),
      n_paths_(n_paths),
      seed_(seed),
      first_path_(first_path),
      refinement_(refinement),
      states_(n_paths * (grid.steps() + 1) * dim),
      increments_(n_paths * grid.steps() * dim),
      exit_index_(n_paths, grid.steps()) {
    require(dim >= 1, ErrorCode::InvalidArgument, "batch dimension must be >= 1");
    require(refinement >= 1, ErrorCode::InvalidArgument, "refinement must be >= 1");
}

PathBatch PathBatch::slice(std::size_t first, std::size_t count) const {
    require(first + count <= n_paths_, ErrorCode::InvalidArgument, "slice out of range");
    PathBatch out(grid_, dim_, count, seed_, first_path_ + first, refinement_);
    const std::size_t sw = (grid_.steps() + 1) * dim_;
    const std::size_t iw = grid_.steps() * dim_;
    std::copy_n(states_.begin() + static_cast<std::ptrdiff_t>(first * sw), count * sw, out.states_.begin());
    std::copy_n(increments_.begin() + static_cast<std::ptrdiff_t>(first * iw), count * iw, out.increments_.begin());
    std::copy_n(exit_index_.begin() + static_cast<std::ptrdiff_t>(first), count, out.exit_index_.begin());
    return out;
}

PathBatch simulate_euler(const ProblemSpec& spec, const Domain& domain, const Grid& grid, std::size_t n_paths,
                         std::uint64_t seed, std::size_t first_path) {
    require(n_paths >= 1, ErrorCode::InvalidArgument, "n_paths must be >= 1");
    check_x0(spec, domain);
    const std::size_t d = spec.dim;
    const std::size_t n = grid.steps();
    const double h = grid.step();
    const double sqrt_h = std::sqrt(h);
    PathBatch batch(grid, d, n_paths, seed, first_path, 1);

    parallel_blocks(n_paths, [&](std::size_t begin, std::size_t end) {
        EulerStepper stepper(spec);
        for (std::size_t p = begin; p < end; ++p) {
            NormalStream normal(CounterRng(seed, first_path + p, Substream::Coarse));
            auto x0 = batch.state(p, 0);
            std::copy(spec.x0.begin(), spec.x0.end(), x0.begin());
            std::size_t exit = domain.contains(x0) ? n : 0;
            for (std::size_t i = 0; i < n; ++i) {
                auto dw = batch.increment(p, i);
                for (std::size_t k = 0; k < d; ++k) dw[k] = sqrt_h * normal();
                stepper.step(batch.state(p, i), h, dw, batch.state(p, i + 1));
                if (exit == n && i + 1 < n && !domain.contains(batch.state(p, i + 1))) exit = i + 1;
            }
            batch.set_exit_index(p, exit);
        }
    });
    return batch;
}

PathBatch refine_bridge(const PathBatch& coarse, const ProblemSpec& spec, const Domain& domain, std::size_t factor,
                        std::uint64_t seed) {
    require(factor >= 2 && (factor & (factor - 1)) == 0, ErrorCode::InvalidArgument,
            "refinement factor must be a power of two >= 2");
    require(coarse.refinement() == 1, ErrorCode::InvalidArgument, "refine_bridge expects a coarse batch");
    check_x0(spec, domain);
    const std::size_t d = coarse.dim();
    const std::size_t n = coarse.grid().steps();
    const Grid fine_grid = coarse.grid().refined(factor);
    const double hf = fine_grid.step();
    const std::size_t nf = fine_grid.steps();
    const bool constant_coefficients = spec.drift.is_constant() && spec.diffusion.is_constant();
    PathBatch fine(fine_grid, d, coarse.size(), coarse.seed(), coarse.first_path(), factor);

    parallel_blocks(coarse.size(), [&](std::size_t begin, std::size_t end) {
        EulerStepper stepper(spec);
        std::vector<double> w(d);
        // Sub-step j of a coarse step: W_j = W_{j-1} + (dW - W_{j-1}) / (m - j + 1) + sd_j * xi.
        std::vector<double> weight(factor), sd(factor);
        for (std::size_t j = 1; j < factor; ++j) {
            const double remaining = static_cast<double>(factor - j + 1);
            weight[j] = 1.0 / remaining;
            sd[j] = std::sqrt(hf * (remaining - 1.0) / remaining);
        }
        for (std::size_t p = begin; p < end; ++p) {
            NormalStream normal(CounterRng(seed, coarse.first_path() + p, Substream::Bridge));
            // Brownian bridge increments, conditioned on each coarse increment.
            for (std::size_t i = 0; i < n; ++i) {
                const auto dw = coarse.increment(p, i);
                double* inc = fine.increment(p, i * factor).data();
                std::fill(w.begin(), w.end(), 0.0);
                for (std::size_t j = 1; j < factor; ++j) {
                    for (std::size_t k = 0; k < d; ++k) {
                        const double step = (dw[k] - w[k]) * weight[j] + sd[j] * normal();
                        inc[(j - 1) * d + k] = step;
                        w[k] += step;
                    }
                }
                for (std::size_t k = 0; k < d; ++k) inc[(factor - 1) * d + k] = dw[k] - w[k];
            }
            auto x0 = fine.state(p, 0);
            std::copy(spec.x0.begin(), spec.x0.end(), x0.begin());
            std::size_t exit = domain.contains(x0) ? nf : 0;
            if (constant_coefficients) {
                const double* bv = spec.drift.constant_value().data();
                const double* sv = spec.diffusion.constant_value().data();
                double* xs = fine.state(p, 0).data();
                const double* dws = fine.increment(p, 0).data();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = i * factor; j < (i + 1) * factor; ++j) {
                        const double* x = xs + j * d;
                        double* next = xs + (j + 1) * d;
                        if (j + 1 == (i + 1) * factor) {
                            const auto knot = coarse.state(p, i + 1);
                            std::copy(knot.begin(), knot.end(), next);
                        } else {
                            const double* dwj = dws + j * d;
                            for (std::size_t r = 0; r < d; ++r) {
                                double v = x[r] + bv[r] * hf;
                                for (std::size_t c = 0; c < d; ++c) v += sv[r * d + c] * dwj[c];
                                next[r] = v;
                            }
                        }
                        if (exit == nf && j + 1 < nf && !domain.contains({next, d})) exit = j + 1;
                    }
                }
            } else {
                for (std::size_t j = 0; j < nf; ++j) {
                    stepper.step(fine.state(p, j), hf, fine.increment(p, j), fine.state(p, j + 1));
                    if (exit == nf && j + 1 < nf && !domain.contains(fine.state(p, j + 1))) exit = j + 1;
                }
            }
            fine.set_exit_index(p, exit);
        }
    });
    return fine;
}

ExitSchedule discrete_exits(const PathBatch& batch) {
    ExitSchedule out;
    out.dim = batch.dim();
    const std::size_t np = batch.size();
    out.time.resize(np);
    out.stop_index.resize(np);
    out.state.resize(np * batch.dim());
    out.interior_crossing.assign(np, 0);
    for (std::size_t p = 0; p < np; ++p) {
        const std::size_t k = batch.exit_index(p);
        out.time[p] = batch.grid().time(k);
        out.stop_index[p] = k;
        const auto x = batch.state(p, k);
        std::copy(x.begin(), x.end(), out.state.begin() + static_cast<std::ptrdiff_t>(p * batch.dim()));
    }
    return out;
}

ExitSchedule exit_oracle(const PathBatch& fine_batch, const Domain& domain) {
    require(fine_batch.refinement() >= 16, ErrorCode::InvalidArgument, "exit oracle needs refinement >= 16");
    require(domain.dim() == fine_batch.dim(), ErrorCode::InvalidArgument, "domain dimension mismatch");
    return discrete_exits(fine_batch);
}

double bridge_crossing_probability(double d0, double d1, double h, double s2) noexcept {
    if (!(d0 > 0.0) || !(d1 > 0.0)) return 1.0;
    if (!(s2 > 0.0)) return 0.0;
    return std::exp(-2.0 * d0 * d1 / (h * s2));
}

ExitSchedule exact_exit_halfspace(const PathBatch& batch, const ProblemSpec& spec, const Domain& domain,
                                  std::uint64_t seed) {
    for (const auto& piece : domain.pieces()) {
        if (piece.kind() != PieceKind::HalfSpace) {
            throw Error(ErrorCode::UnsupportedDomain, "exact exit sampling needs half-space pieces");
        }
    }
    if (domain.dim() > 1 && domain.pieces().size() > 1) {
        throw Error(ErrorCode::UnsupportedDomain, "exact exit sampling supports one half-space or a 1D interval");
    }
    require(spec.dim == batch.dim() && domain.dim() == batch.dim(), ErrorCode::InvalidArgument,
            "dimension mismatch in exact exit sampling");

    const std::size_t d = batch.dim();
    const std::size_t n = batch.grid().steps();
    const double h = batch.grid().step();
    const std::size_t m = domain.pieces().size();
    ExitSchedule out;
    out.dim = d;
    out.time.resize(batch.size());
    out.stop_index.resize(batch.size());
    out.state.resize(batch.size() * d);
    out.interior_crossing.assign(batch.size(), 0);

    parallel_blocks(batch.size(), [&](std::size_t begin, std::size_t end) {
        std::vector<double> sigma(d * d), a(d * d), mid(d);
        for (std::size_t p = begin; p < end; ++p) {
            const CounterRng rng(seed, batch.first_path() + p, Substream::ExactExit);
            auto state = std::span<double>(out.state.data() + p * d, d);
            const auto project = [&](std::span<const double> x, std::size_t piece) {
                const auto& hs = domain.pieces()[piece];
                const double dist = hs.distance(x);
                for (std::size_t k = 0; k < d; ++k) state[k] = x[k] - dist * hs.normal()[k];
            };

            double tau = batch.grid().horizon();
            std::size_t stop = n;
            const auto x0 = batch.state(p, 0);
            std::copy(x0.begin(), x0.end(), state.begin());
            if (!domain.contains(x0)) {
                tau = 0.0;
                stop = 0;
            } else {
                const auto xn = batch.state(p, n);
                std::copy(xn.begin(), xn.end(), state.begin());
                for (std::size_t i = 0; i < n; ++i) {
                    const auto left = batch.state(p, i);
                    const auto right = batch.state(p, i + 1);
                    if (!domain.contains(right)) {
                        tau = batch.grid().time(i + 1);
                        stop = i + 1;
                        project(right, domain.active_piece(right));
                        break;
                    }
                    spec.diffusion(left, sigma);
                    diffusion_matrix(sigma, d, a);
                    std::size_t crossed = m;
                    double best = -1.0;
                    for (std::size_t l = 0; l < m; ++l) {
                        const auto& hs = domain.pieces()[l];
                        const double s2 = quadratic_form(a, hs.normal(), d);
                        const double prob = bridge_crossing_probability(hs.distance(left), hs.distance(right), h, s2);
                        if (rng.uniform(i * m + l) < prob && prob > best) {
                            best = prob;
                            crossed = l;
                        }
                    }
                    if (crossed < m) {
                        tau = batch.grid().time(i) + 0.5 * h;
                        stop = i + 1;
                        for (std::size_t k = 0; k < d; ++k) mid[k] = 0.5 * (left[k] + right[k]);
                        project(mid, crossed);
                        out.interior_crossing[p] = 1;
                        break;
                    }
                }
            }
            out.time[p] = tau;
            out.stop_index[p] = stop;
        }
    });
    return out;
}

PathBatch enumerate_binary_tree(const ProblemSpec& spec, const Domain& domain, const Grid& grid) {
    check_x0(spec, domain);
    require(spec.dim == 1, ErrorCode::InvalidArgument, "binary tree enumeration is 1D only");
    const std::size_t n = grid.steps();
    require(n <= 20, ErrorCode::InvalidArgument, "binary tree enumeration limited to n <= 20");
    const std::size_t count = std::size_t{1} << n;
    const double h = grid.step();
    const double s = std::sqrt(h);
    PathBatch batch(grid, 1, count, 0, 0, 1);
    EulerStepper stepper(spec);
    for (std::size_t p = 0; p < count; ++p) {
        batch.state(p, 0)[0] = spec.x0[0];
        std::size_t exit = domain.contains(batch.state(p, 0)) ? n : 0;
        for (std::size_t i = 0; i < n; ++i) {
            batch.increment(p, i)[0] = ((p >> (n - 1 - i)) & 1U) ? s : -s;
            stepper.step(batch.state(p, i), h, batch.increment(p, i), batch.state(p, i + 1));
            if (exit == n && i + 1 < n && !domain.contains(batch.state(p, i + 1))) exit = i + 1;
        }
        batch.set_exit_index(p, exit);
    }
    return batch;
}

void write_path_batch(const std::filesystem::path& file, const PathBatch& batch) {
    std::ofstream os(file, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::IoError, "cannot open " + file.string());
    os.write(kBatchMagic, 4);
    binary::put_u32(os, kBatchVersion);
    binary::put_u64(os, batch.grid().steps());
    binary::put_u64(os, batch.size());
    binary::put_u64(os, batch.dim());
    binary::put_u64(os, batch.seed());
    binary::put_u64(os, batch.first_path());
    binary::put_u64(os, batch.refinement());
    binary::put_f64(os, batch.grid().horizon());
    const std::size_t n = batch.grid().steps();
    for (std::size_t p = 0; p < batch.size(); ++p) {
        binary::put_f64s(os, {batch.raw_states().data() + p * (n + 1) * batch.dim(), (n + 1) * batch.dim()});
        binary::put_f64s(os, {batch.raw_increments().data() + p * n * batch.dim(), n * batch.dim()});
        binary::put_u64(os, batch.exit_index(p));
    }
    require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + file.string());
}

PathBatch read_path_batch(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::IoError, "cannot open " + file.string());
    char magic[4];
    is.read(magic, 4);
    require(static_cast<bool>(is) && std::equal(magic, magic + 4, kBatchMagic), ErrorCode::IoError,
            "not a path batch file: " + file.string());
    require(binary::get_u32(is) == kBatchVersion, ErrorCode::IoError, "unsupported path batch version");
    const auto n = binary::get_u64(is);
    const auto n_paths = binary::get_u64(is);
    const auto d = binary::get_u64(is);
    const auto seed = binary::get_u64(is);
    const auto first = binary::get_u64(is);
    const auto refinement = binary::get_u64(is);
    const double horizon = binary::get_f64(is);
    PathBatch batch(Grid(n, horizon), d, n_paths, seed, first, refinement);
    for (std::size_t p = 0; p < n_paths; ++p) {
        binary::get_f64s(is, {batch.raw_states().data() + p * (n + 1) * d, (n + 1) * d});
        binary::get_f64s(is, {batch.raw_increments().data() + p * n * d, n * d});
        batch.set_exit_index(p, binary::get_u64(is));
    }
    return batch;
}

}  // namespace exitbsde
