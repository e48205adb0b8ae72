#include "exitbsde/bsde.hpp"

#include "exitbsde/binary_io.hpp"
#include "exitbsde/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace exitbsde {

namespace {

constexpr char kTablesMagic[4] = {'X', 'B', 'B', 'T'};
constexpr std::uint32_t kTablesVersion = 1;

bool all_equal(std::span<const double> predictors, std::size_t dim) {
    const std::size_t count = predictors.size() / dim;
    for (std::size_t s = 1; s < count; ++s) {
        for (std::size_t k = 0; k < dim; ++k) {
            if (predictors[s * dim + k] != predictors[k]) return false;
        }
    }
    return true;
}

std::vector<double> group_means(std::span<const double> predictors, std::size_t dim,
                                std::span<const double> responses) {
    const std::size_t count = responses.size();
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto less = [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(predictors.begin() + static_cast<std::ptrdiff_t>(a * dim),
                                            predictors.begin() + static_cast<std::ptrdiff_t>((a + 1) * dim),
                                            predictors.begin() + static_cast<std::ptrdiff_t>(b * dim),
                                            predictors.begin() + static_cast<std::ptrdiff_t>((b + 1) * dim));
    };
    std::stable_sort(order.begin(), order.end(), less);
    std::vector<double> out(count);
    std::size_t start = 0;
    while (start < count) {
        std::size_t stop = start + 1;
        while (stop < count && !less(order[start], order[stop])) ++stop;
        double sum = 0.0;
        for (std::size_t j = start; j < stop; ++j) sum += responses[order[j]];
        const double mean = sum / static_cast<double>(stop - start);
        for (std::size_t j = start; j < stop; ++j) out[order[j]] = mean;
        start = stop;
    }
    return out;
}

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

CondExpEngine CondExpEngine::regression(BasisSpec basis) {
    CondExpEngine e;
    e.mode_ = EngineMode::Regression;
    e.basis_ = std::move(basis);
    return e;
}

CondExpEngine CondExpEngine::analytic(OracleFn oracle) {
    require(static_cast<bool>(oracle), ErrorCode::InvalidArgument, "analytic engine needs an oracle");
    CondExpEngine e;
    e.mode_ = EngineMode::Analytic;
    e.oracle_ = std::move(oracle);
    return e;
}

CondExpEngine CondExpEngine::exact_tree() {
    CondExpEngine e;
    e.mode_ = EngineMode::ExactTree;
    return e;
}

std::vector<double> CondExpEngine::project(std::span<const double> predictors, std::size_t dim,
                                           std::span<const double> responses) const {
    if (responses.empty()) throw Error(ErrorCode::EmptySample, "conditional expectation of an empty sample");
    require(predictors.size() == responses.size() * dim, ErrorCode::InvalidArgument,
            "predictors and responses have different lengths");
    if (all_equal(predictors, dim)) return std::vector<double>(responses.size(), mean_of(responses));
    if (mode_ == EngineMode::ExactTree) return group_means(predictors, dim, responses);
    const RegressionModel model = fit(predictors, responses, dim, mode_ == EngineMode::Regression ? basis_ : BasisSpec{});
    std::vector<double> out(responses.size());
    for (std::size_t s = 0; s < responses.size(); ++s) out[s] = model.predict(predictors.subspan(s * dim, dim));
    return out;
}

BackwardTables::BackwardTables(std::size_t steps, std::size_t dim, std::size_t n_paths)
    : steps_(steps),
      dim_(dim),
      n_paths_(n_paths),
      y_(n_paths * (steps + 1), 0.0),
      z_(n_paths * steps * dim, 0.0),
      stop_index_(n_paths, steps),
      diagnostics_(steps) {}

double BackwardTables::y0() const {
    require(n_paths_ > 0, ErrorCode::EmptySample, "no paths in backward tables");
    double s = 0.0;
    for (std::size_t p = 0; p < n_paths_; ++p) s += y(p, 0);
    return s / static_cast<double>(n_paths_);
}

double BackwardTables::y0_stderr() const {
    if (n_paths_ < 2) return 0.0;
    double s = 0.0;
    double s2 = 0.0;
    for (std::size_t p = 0; p < n_paths_; ++p) {
        const double v = y(p, 1);
        s += v;
        s2 += v * v;
    }
    const double N = static_cast<double>(n_paths_);
    const double var = std::max(0.0, (s2 - s * s / N) / (N - 1.0));
    return std::sqrt(var / N);
}

BackwardTables backward_solve(const PathBatch& batch, const ProblemSpec& spec, const CondExpEngine& engine,
                              const PicardOptions& picard, const ExitSchedule* exits) {
    spec.validate();
    require(spec.dim == batch.dim(), ErrorCode::InvalidArgument, "batch and problem dimensions differ");
    require(picard.max_iter >= 1 && picard.tol > 0.0, ErrorCode::InvalidArgument, "invalid Picard options");
    const Grid& grid = batch.grid();
    const std::size_t n = grid.steps();
    const std::size_t d = batch.dim();
    const double h = grid.step();
    if (!(spec.lipschitz * h < 1.0)) {
        throw Error(ErrorCode::ContractionViolated, "L*h >= 1: refine the time grid");
    }

    ExitSchedule own;
    if (exits == nullptr) {
        own = discrete_exits(batch);
        exits = &own;
    }
    require(exits->size() == batch.size() && exits->dim == d, ErrorCode::InvalidArgument,
            "exit schedule does not match the batch");

    const std::size_t N = batch.size();
    BackwardTables tables(n, d, N);
    for (std::size_t p = 0; p < N; ++p) {
        const std::size_t stop = std::min(exits->stop_index[p], n);
        tables.set_stop_index(p, stop);
        const double gval = spec.terminal(exits->time[p], exits->exit_state(p));
        for (std::size_t i = stop; i <= n; ++i) tables.y(p, i) = gval;
    }

    std::vector<std::size_t> alive;
    std::vector<double> predictors;
    std::vector<double> responses;
    std::vector<double> cond_y;
    std::vector<double> cond_z;
    for (std::size_t step = n; step-- > 0;) {
        alive.clear();
        for (std::size_t p = 0; p < N; ++p) {
            if (step < tables.stop_index(p)) alive.push_back(p);
        }
        StepDiagnostics& diag = tables.diagnostics()[step];
        diag.alive = alive.size();
        if (alive.empty()) continue;
        const std::size_t A = alive.size();
        cond_y.assign(A, 0.0);
        cond_z.assign(A * d, 0.0);

        if (engine.mode() == EngineMode::Analytic) {
            const auto& oracle = engine.oracle();
            parallel_blocks(A, [&](std::size_t begin, std::size_t end) {
                for (std::size_t a = begin; a < end; ++a) {
                    const auto x = batch.state(alive[a], step);
                    cond_y[a] = oracle(step, grid, x, -1);
                    for (std::size_t k = 0; k < d; ++k) cond_z[a * d + k] = oracle(step, grid, x, static_cast<int>(k));
                }
            });
        } else {
            predictors.resize(A * d);
            for (std::size_t a = 0; a < A; ++a) {
                const auto x = batch.state(alive[a], step);
                std::copy(x.begin(), x.end(), predictors.begin() + static_cast<std::ptrdiff_t>(a * d));
            }
            responses.resize(A);
            for (std::size_t a = 0; a < A; ++a) responses[a] = tables.y(alive[a], step + 1);
            const bool plain_mean = step == 0 || all_equal(predictors, d);
            if (plain_mean) {
                std::fill(cond_y.begin(), cond_y.end(), mean_of(responses));
            } else {
                cond_y = engine.project(predictors, d, responses);
            }
            for (std::size_t k = 0; k < d; ++k) {
                for (std::size_t a = 0; a < A; ++a) {
                    responses[a] = (tables.y(alive[a], step + 1) - cond_y[a]) * batch.increment(alive[a], step)[k];
                }
                std::vector<double> fitted =
                    plain_mean ? std::vector<double>(A, mean_of(responses)) : engine.project(predictors, d, responses);
                for (std::size_t a = 0; a < A; ++a) cond_z[a * d + k] = fitted[a];
            }
        }

        const double t = grid.time(step);
        std::vector<std::size_t> iterations(A, 0);
        std::vector<double> residuals(A, 0.0);
        parallel_blocks(A, [&](std::size_t begin, std::size_t end) {
            for (std::size_t a = begin; a < end; ++a) {
                const std::size_t p = alive[a];
                auto z = tables.z(p, step);
                for (std::size_t k = 0; k < d; ++k) z[k] = cond_z[a * d + k] / h;
                const double e = cond_y[a];
                if (spec.zero_driver) {
                    tables.y(p, step) = e;
                    continue;
                }
                const auto x = batch.state(p, step);
                double y = e;
                double first = -1.0;
                double last = 0.0;
                bool converged = false;
                std::size_t it = 0;
                while (it < picard.max_iter) {
                    ++it;
                    const double next = e + h * spec.driver(t, x, y, z);
                    last = std::abs(next - y);
                    if (first < 0.0) first = last;
                    y = next;
                    if (last <= picard.tol) {
                        converged = true;
                        break;
                    }
                }
                if (!std::isfinite(y)) throw Error(ErrorCode::NonFiniteState, "non-finite Ybar in backward sweep");
                if (!converged && last > first) {
                    throw Error(ErrorCode::PicardDiverged, "Picard iteration diverged at step " + std::to_string(step));
                }
                tables.y(p, step) = y;
                iterations[a] = it;
                residuals[a] = std::abs(y - (e + h * spec.driver(t, x, y, z)));
            }
        });
        diag.max_iterations = *std::max_element(iterations.begin(), iterations.end());
        diag.max_residual = *std::max_element(residuals.begin(), residuals.end());
    }
    return tables;
}

void write_backward_tables(const std::filesystem::path& file, const BackwardTables& tables) {
    std::ofstream os(file, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::IoError, "cannot open " + file.string());
    os.write(kTablesMagic, 4);
    binary::put_u32(os, kTablesVersion);
    const std::size_t n = tables.steps();
    const std::size_t d = tables.dim();
    binary::put_u64(os, n);
    binary::put_u64(os, tables.size());
    binary::put_u64(os, d);
    for (std::size_t p = 0; p < tables.size(); ++p) {
        binary::put_f64s(os, {tables.raw_y().data() + p * (n + 1), n + 1});
        binary::put_f64s(os, {tables.raw_z().data() + p * n * d, n * d});
        binary::put_u64(os, tables.stop_index(p));
    }
    require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + file.string());
}

BackwardTables read_backward_tables(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::IoError, "cannot open " + file.string());
    char magic[4];
    is.read(magic, 4);
    require(static_cast<bool>(is) && std::equal(magic, magic + 4, kTablesMagic), ErrorCode::IoError,
            "not a backward table file: " + file.string());
    require(binary::get_u32(is) == kTablesVersion, ErrorCode::IoError, "unsupported backward table version");
    const auto n = binary::get_u64(is);
    const auto n_paths = binary::get_u64(is);
    const auto d = binary::get_u64(is);
    BackwardTables tables(n, d, n_paths);
    for (std::size_t p = 0; p < n_paths; ++p) {
        binary::get_f64s(is, {tables.raw_y().data() + p * (n + 1), n + 1});
        binary::get_f64s(is, {tables.raw_z().data() + p * n * d, n * d});
        tables.set_stop_index(p, binary::get_u64(is));
    }
    return tables;
}

void reference_solution(const PathBatch& fine, std::size_t path, const ProblemSpec& spec, std::size_t stop,
                        double exit_time, std::span<const double> exit_state, std::span<double> y,
                        std::span<double> z) {
    const std::size_t nf = fine.grid().steps();
    const std::size_t d = fine.dim();
    stop = std::min(stop, nf);
    const double y_stop = spec.reference(exit_time, exit_state);
    double grad_buf[8];
    double sigma_buf[64];
    std::vector<double> grad_heap;
    std::vector<double> sigma_heap;
    std::span<double> grad(grad_buf, d);
    std::span<double> sigma(sigma_buf, d * d);
    if (d > 8) {
        grad_heap.resize(d);
        sigma_heap.resize(d * d);
        grad = grad_heap;
        sigma = sigma_heap;
    }
    const bool constant_sigma = spec.diffusion.is_constant();
    if (constant_sigma) spec.diffusion(fine.state(path, 0), sigma);
    for (std::size_t j = 0; j <= nf; ++j) {
        y[j] = j < stop ? spec.reference(fine.grid().time(j), fine.state(path, j)) : y_stop;
    }
    std::fill(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(nf * d), 0.0);
    for (std::size_t j = 0; j < stop; ++j) {
        const auto x = fine.state(path, j);
        spec.reference_gradient(fine.grid().time(j), x, grad);
        if (!constant_sigma) spec.diffusion(x, sigma);
        for (std::size_t k = 0; k < d; ++k) {
            double s = 0.0;
            for (std::size_t r = 0; r < d; ++r) s += grad[r] * sigma[r * d + k];
            z[j * d + k] = s;
        }
    }
}

RegularityAccumulator::RegularityAccumulator(const Grid& coarse, std::size_t dim, std::size_t n_paths,
                                             CondExpEngine engine)
    : coarse_(coarse),
      dim_(dim),
      n_paths_(n_paths),
      engine_(std::move(engine)),
      sup_sum_(coarse.steps(), 0.0),
      sup_sumsq_(coarse.steps(), 0.0),
      within_step_(coarse.steps(), 0.0),
      within_(n_paths, 0.0),
      average_(n_paths * coarse.steps() * dim, 0.0),
      predictor_(n_paths * coarse.steps() * dim, 0.0),
      alive_(n_paths * coarse.steps(), 0) {
    require(n_paths >= 1, ErrorCode::EmptySample, "regularity estimate needs at least one path");
}

void RegularityAccumulator::add(const PathBatch& fine, const ProblemSpec& spec, const ExitSchedule& exits,
                                std::size_t offset) {
    if (!spec.has_reference()) throw Error(ErrorCode::MissingReference, "regularity diagnostics need u and Du");
    require(fine.dim() == dim_ && exits.size() == fine.size(), ErrorCode::InvalidArgument,
            "fine chunk does not match the accumulator");
    require(offset + fine.size() <= n_paths_, ErrorCode::InvalidArgument, "fine chunk out of range");
    const std::size_t n = coarse_.steps();
    require(fine.grid().steps() % n == 0 && std::abs(fine.grid().horizon() - coarse_.horizon()) < 1e-12,
            ErrorCode::InvalidArgument, "fine grid is not a refinement of the coarse grid");
    const std::size_t m = fine.grid().steps() / n;
    const std::size_t nf = fine.grid().steps();
    const double hf = fine.grid().step();
    const std::size_t d = dim_;

    std::vector<double> local_sup(n * fine.size(), 0.0);
    std::vector<double> local_within(n * fine.size(), 0.0);
    parallel_blocks(fine.size(), [&](std::size_t begin, std::size_t end) {
        std::vector<double> yv(nf + 1), zv(nf * d, 0.0);
        for (std::size_t q = begin; q < end; ++q) {
            const std::size_t p = offset + q;
            const std::size_t stop = std::min(exits.stop_index[q], nf);
            reference_solution(fine, q, spec, stop, exits.time[q], exits.exit_state(q), yv, zv);
            double within = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double sup = 0.0;
                for (std::size_t j = i * m; j <= (i + 1) * m; ++j) {
                    const double diff = yv[j] - yv[i * m];
                    sup = std::max(sup, diff * diff);
                }
                local_sup[q * n + i] = sup;
                const auto x = fine.state(q, i * m);
                for (std::size_t k = 0; k < d; ++k) {
                    double avg = 0.0;
                    for (std::size_t j = i * m; j < (i + 1) * m; ++j) avg += zv[j * d + k];
                    avg /= static_cast<double>(m);
                    for (std::size_t j = i * m; j < (i + 1) * m; ++j) {
                        const double diff = zv[j * d + k] - avg;
                        local_within[q * n + i] += hf * diff * diff;
                    }
                    average_[(p * n + i) * d + k] = avg;
                    predictor_[(p * n + i) * d + k] = x[k];
                }
                alive_[p * n + i] = stop > i * m ? 1 : 0;
                within += local_within[q * n + i];
            }
            within_[p] = within;
        }
    });
    for (std::size_t q = 0; q < fine.size(); ++q) {
        for (std::size_t i = 0; i < n; ++i) {
            sup_sum_[i] += local_sup[q * n + i];
            sup_sumsq_[i] += local_sup[q * n + i] * local_sup[q * n + i];
            within_step_[i] += local_within[q * n + i];
        }
    }
    added_ += fine.size();
}

RegularityEstimate RegularityAccumulator::finish() const {
    require(added_ == n_paths_, ErrorCode::InvalidArgument, "regularity accumulator is missing paths");
    const std::size_t n = coarse_.steps();
    const std::size_t d = dim_;
    const double h = coarse_.step();
    const double N = static_cast<double>(n_paths_);
    RegularityEstimate out;

    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (sup_sum_[i] > sup_sum_[arg]) arg = i;
    }
    out.r_y = sup_sum_[arg] / N;
    if (n_paths_ > 1) {
        const double var = std::max(0.0, (sup_sumsq_[arg] - sup_sum_[arg] * sup_sum_[arg] / N) / (N - 1.0));
        out.r_y_stderr = std::sqrt(var / N);
    }

    std::vector<double> per_path(within_);
    out.r_z_per_step.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) out.r_z_per_step[i] = within_step_[i] / N;
    std::vector<std::size_t> members;
    std::vector<double> predictors;
    std::vector<double> responses;
    for (std::size_t i = 0; i < n; ++i) {
        members.clear();
        for (std::size_t p = 0; p < n_paths_; ++p) {
            if (alive_[p * n + i]) members.push_back(p);
        }
        if (members.empty()) continue;
        predictors.resize(members.size() * d);
        for (std::size_t a = 0; a < members.size(); ++a) {
            for (std::size_t k = 0; k < d; ++k) predictors[a * d + k] = predictor_[(members[a] * n + i) * d + k];
        }
        for (std::size_t k = 0; k < d; ++k) {
            responses.resize(members.size());
            for (std::size_t a = 0; a < members.size(); ++a) responses[a] = average_[(members[a] * n + i) * d + k];
            const std::vector<double> fitted = engine_.project(predictors, d, responses);
            for (std::size_t a = 0; a < members.size(); ++a) {
                const double diff = responses[a] - fitted[a];
                per_path[members[a]] += h * diff * diff;
                out.r_z_per_step[i] += h * diff * diff / N;
            }
        }
    }
    double s = 0.0;
    double s2 = 0.0;
    for (double v : per_path) {
        s += v;
        s2 += v * v;
    }
    out.r_z = s / N;
    if (n_paths_ > 1) {
        const double var = std::max(0.0, (s2 - s * s / N) / (N - 1.0));
        out.r_z_stderr = std::sqrt(var / N);
    }
    return out;
}

RegularityEstimate hatz_diagnostic(const PathBatch& fine, const ProblemSpec& spec, const ExitSchedule& fine_exits,
                                   const Grid& coarse, const CondExpEngine& engine) {
    if (!spec.has_reference()) throw Error(ErrorCode::MissingReference, "regularity diagnostics need u and Du");
    RegularityAccumulator acc(coarse, fine.dim(), fine.size(), engine);
    acc.add(fine, spec, fine_exits, 0);
    return acc.finish();
}

}  // namespace exitbsde
