#include "exitbsde/analysis.hpp"

#include "exitbsde/parallel.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace exitbsde {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Estimate mean_and_error(double sum, double sumsq, double count) {
    Estimate e;
    e.value = sum / count;
    if (count > 1.0) {
        const double var = std::max(0.0, (sumsq - sum * sum / count) / (count - 1.0));
        e.std_error = std::sqrt(var / count);
    }
    return e;
}

std::size_t fine_index(double time, double fine_step, std::size_t fine_steps) {
    const long long k = std::llround(time / fine_step);
    return static_cast<std::size_t>(std::clamp<long long>(k, 0, static_cast<long long>(fine_steps)));
}

}  // namespace

StrongErrorAccumulator::StrongErrorAccumulator(const Grid& coarse) : coarse_(coarse) {
    for (Sums* s : {&horizon_, &stopped_}) {
        s->a.assign(coarse.steps(), 0.0);
        s->aa.assign(coarse.steps(), 0.0);
        s->ab.assign(coarse.steps(), 0.0);
    }
}

void StrongErrorAccumulator::add(const PathBatch& fine, const BackwardTables& tables, const ProblemSpec& spec,
                                 const ExitSchedule& reference, std::span<const double> scheme_exit_time,
                                 std::size_t offset) {
    if (!spec.has_reference()) throw Error(ErrorCode::MissingReference, "strong error needs reference u and Du");
    const std::size_t n = coarse_.steps();
    require(tables.steps() == n && fine.grid().steps() % n == 0, ErrorCode::InvalidArgument,
            "fine batch is not a refinement of the solved grid");
    require(fine.grid().steps() / n >= 2, ErrorCode::InvalidArgument, "strong error needs a refined batch");
    require(reference.size() == fine.size() && scheme_exit_time.size() == fine.size(), ErrorCode::InvalidArgument,
            "exit data do not match the fine chunk");
    require(offset + fine.size() <= tables.size(), ErrorCode::InvalidArgument, "fine chunk out of range");
    const std::size_t m = fine.grid().steps() / n;
    const std::size_t nf = fine.grid().steps();
    const double hf = fine.grid().step();
    const std::size_t d = fine.dim();
    const std::size_t P = fine.size();

    // per path: a_i for both modes, then b for both modes
    std::vector<double> a_h(P * n), a_s(P * n), b_h(P), b_s(P);
    parallel_blocks(P, [&](std::size_t begin, std::size_t end) {
        std::vector<double> yv(nf + 1), zv(nf * d);
        for (std::size_t q = begin; q < end; ++q) {
            const std::size_t p = offset + q;
            const std::size_t stop = std::min(reference.stop_index[q], nf);
            reference_solution(fine, q, spec, stop, reference.time[q], reference.exit_state(q), yv, zv);
            const std::size_t theta = std::min(stop, fine_index(scheme_exit_time[q], hf, nf));
            for (std::size_t i = 0; i < n; ++i) {
                const double ybar = tables.y(p, i);
                double sup_all = 0.0;
                double sup_stopped = 0.0;
                for (std::size_t j = i * m; j <= (i + 1) * m; ++j) {
                    const double diff = yv[j] - ybar;
                    const double sq = diff * diff;
                    sup_all = std::max(sup_all, sq);
                    if (j <= theta) sup_stopped = std::max(sup_stopped, sq);
                }
                a_h[q * n + i] = sup_all;
                a_s[q * n + i] = sup_stopped;
            }
            double bh = 0.0;
            double bs = 0.0;
            for (std::size_t j = 0; j < nf; ++j) {
                const auto zbar = tables.z(p, j / m);
                double sq = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = zv[j * d + k] - zbar[k];
                    sq += diff * diff;
                }
                bh += hf * sq;
                if (j < theta) bs += hf * sq;
            }
            b_h[q] = bh;
            b_s[q] = bs;
        }
    });
    const auto accumulate = [&](Sums& s, const std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t q = 0; q < P; ++q) {
            for (std::size_t i = 0; i < n; ++i) {
                const double v = a[q * n + i];
                s.a[i] += v;
                s.aa[i] += v * v;
                s.ab[i] += v * b[q];
            }
            s.b += b[q];
            s.bb += b[q] * b[q];
        }
    };
    accumulate(horizon_, a_h, b_h);
    accumulate(stopped_, a_s, b_s);
    count_ += P;
}

ErrorEstimate StrongErrorAccumulator::finish(ThetaMode mode) const {
    if (count_ == 0) throw Error(ErrorCode::EmptySample, "strong error of an empty sample");
    const Sums& s = mode == ThetaMode::Horizon ? horizon_ : stopped_;
    const double N = static_cast<double>(count_);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < s.a.size(); ++i) {
        if (s.a[i] > s.a[arg]) arg = i;
    }
    ErrorEstimate e;
    e.argmax_step = arg;
    e.y_part = s.a[arg] / N;
    e.z_part = s.b / N;
    e.value = e.y_part + e.z_part;
    if (count_ > 1) {
        const double sum = s.a[arg] + s.b;
        const double sumsq = s.aa[arg] + 2.0 * s.ab[arg] + s.bb;
        e.std_error = mean_and_error(sum, sumsq, N).std_error;
    }
    return e;
}

ErrorEstimate strong_error(const PathBatch& fine, const BackwardTables& tables, const ProblemSpec& spec,
                           ThetaMode mode, const ExitSchedule& reference, const ExitSchedule& scheme) {
    StrongErrorAccumulator acc(Grid(tables.steps(), fine.grid().horizon()));
    acc.add(fine, tables, spec, reference, scheme.time, 0);
    return acc.finish(mode);
}

ExitError exit_error(const ExitSchedule& scheme, const ExitSchedule& reference) {
    return exit_error(scheme.time, reference.time);
}

ExitError exit_error(std::span<const double> scheme_time, std::span<const double> reference_time) {
    require(scheme_time.size() == reference_time.size(), ErrorCode::InvalidArgument, "exit samples differ in size");
    if (scheme_time.empty()) throw Error(ErrorCode::EmptySample, "exit error of an empty sample");
    double sa = 0.0, saa = 0.0, ss = 0.0, sss = 0.0;
    for (std::size_t p = 0; p < scheme_time.size(); ++p) {
        const double diff = reference_time[p] - scheme_time[p];
        sa += std::abs(diff);
        saa += diff * diff;
        ss += diff;
        sss += diff * diff;
    }
    const double N = static_cast<double>(scheme_time.size());
    return {mean_and_error(sa, saa, N), mean_and_error(ss, sss, N)};
}

SlopeFit fit_slope(std::span<const SlopePoint> points, bool drop_guard, double confidence) {
    require(confidence > 0.0 && confidence < 1.0, ErrorCode::InvalidArgument, "confidence must be in (0, 1)");
    SlopeFit fit;
    fit.points.assign(points.begin(), points.end());
    fit.confidence = confidence;
    fit.excluded.assign(points.size(), false);
    std::vector<std::size_t> usable;
    for (std::size_t k = 0; k < points.size(); ++k) {
        const auto& pt = points[k];
        require(pt.h > 0.0 && std::isfinite(pt.h), ErrorCode::InvalidArgument, "step sizes must be positive");
        if (!(pt.value > 0.0) || !std::isfinite(pt.value)) {
            fit.excluded[k] = true;
        } else {
            usable.push_back(k);
        }
    }
    if (usable.size() < 3) {
        if (points.size() >= 3) throw Error(ErrorCode::NonPositiveValue, "too many non-positive values for a slope fit");
        throw Error(ErrorCode::InsufficientPoints, "slope fit needs at least 3 points");
    }
    std::sort(usable.begin(), usable.end(), [&](std::size_t a, std::size_t b) { return points[a].h > points[b].h; });
    if (drop_guard && usable.size() >= 4) {
        const auto& first = points[usable[0]];
        const auto& second = points[usable[1]];
        const double band = 3.0 * std::hypot(first.std_error, second.std_error);
        if (std::abs(first.value - second.value) <= band) {
            usable.erase(usable.begin());
            fit.dropped_largest_h = true;
        }
    }
    const std::size_t k = usable.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t idx : usable) {
        mx += std::log(points[idx].h);
        my += std::log(points[idx].value);
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t idx : usable) {
        const double dx = std::log(points[idx].h) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(points[idx].value) - my);
    }
    require(sxx > 0.0, ErrorCode::InsufficientPoints, "slope fit needs distinct step sizes");
    fit.used = k;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ssr = 0.0;
    for (std::size_t idx : usable) {
        const double r = std::log(points[idx].value) - (fit.intercept + fit.slope * std::log(points[idx].h));
        ssr += r * r;
    }
    fit.residual_norm = std::sqrt(ssr);
    const double dof = static_cast<double>(k - 2);
    const boost::math::students_t dist(dof);
    const double tq = boost::math::quantile(dist, 0.5 + confidence / 2.0);
    fit.half_width = tq * std::sqrt(ssr / dof / sxx);
    return fit;
}

EntryResult run_entry(const ProblemSpec& spec, const Domain& domain, const CondExpEngine& engine,
                      const EntryOptions& options, const std::string& benchmark, const std::string& engine_label) {
    spec.validate();
    require(options.steps >= 1 && options.n_paths >= 1 && options.chunk >= 1, ErrorCode::InvalidArgument,
            "entry counts must be >= 1");
    const Grid grid(options.steps, domain.horizon());
    const std::size_t N = options.n_paths;
    const std::size_t m = options.m_fine;
    const std::size_t d = spec.dim;
    const bool reference = spec.has_reference();

    const PathBatch coarse = simulate_euler(spec, domain, grid, N, options.seed);
    const ExitSchedule discrete = discrete_exits(coarse);
    const BackwardTables tables = backward_solve(coarse, spec, engine, options.picard, &discrete);

    std::optional<ExitSchedule> exact;
    std::optional<BackwardTables> exact_tables;
    if (options.exact_mode) {
        exact = exact_exit_halfspace(coarse, spec, domain, options.seed);
        exact_tables = backward_solve(coarse, spec, engine, options.picard, &*exact);
    }

    StrongErrorAccumulator discrete_error(grid);
    StrongErrorAccumulator exact_error(grid);
    std::optional<RegularityAccumulator> regularity;
    if (options.fine_pass && options.regularity && reference) regularity.emplace(grid, d, N, engine);
    std::vector<double> oracle_time(N, kNaN);
    const bool errors = options.fine_pass && reference;

    const std::size_t nf = grid.steps() * m;
    const double hf = grid.step() / static_cast<double>(m);
    for (std::size_t first = 0; options.fine_pass && first < N; first += options.chunk) {
        const std::size_t count = std::min(options.chunk, N - first);
        const PathBatch part = coarse.slice(first, count);
        const PathBatch fine = refine_bridge(part, spec, domain, m, options.seed);
        const ExitSchedule oracle = exit_oracle(fine, domain);
        std::copy(oracle.time.begin(), oracle.time.end(), oracle_time.begin() + static_cast<std::ptrdiff_t>(first));
        if (!reference) continue;
        const std::span<const double> scheme_time(discrete.time.data() + first, count);
        discrete_error.add(fine, tables, spec, oracle, scheme_time, first);
        if (exact) {
            ExitSchedule ref;
            ref.dim = d;
            ref.time.assign(exact->time.begin() + static_cast<std::ptrdiff_t>(first),
                            exact->time.begin() + static_cast<std::ptrdiff_t>(first + count));
            ref.state.assign(exact->state.begin() + static_cast<std::ptrdiff_t>(first * d),
                             exact->state.begin() + static_cast<std::ptrdiff_t>((first + count) * d));
            ref.interior_crossing.assign(exact->interior_crossing.begin() + static_cast<std::ptrdiff_t>(first),
                                         exact->interior_crossing.begin() + static_cast<std::ptrdiff_t>(first + count));
            ref.stop_index.resize(count);
            for (std::size_t q = 0; q < count; ++q) ref.stop_index[q] = fine_index(ref.time[q], hf, nf);
            exact_error.add(fine, *exact_tables, spec, ref, ref.time, first);
        }
        if (regularity) regularity->add(fine, spec, oracle, first);
    }

    const auto make_report = [&](const BackwardTables& t, const std::vector<double>& scheme_time,
                                 const StrongErrorAccumulator& acc, const char* mode) {
        ErrorReport r;
        r.benchmark = benchmark;
        r.exit_mode = mode;
        r.engine = engine_label;
        r.steps = grid.steps();
        r.h = grid.step();
        r.seed = options.seed;
        r.n_paths = N;
        r.m_fine = m;
        if (options.fine_pass) {
            const ExitError ex = exit_error(scheme_time, oracle_time);
            r.exit_abs_err = ex.abs;
            r.exit_signed_err = ex.signed_mean;
        } else {
            r.exit_abs_err = {kNaN, kNaN};
            r.exit_signed_err = {kNaN, kNaN};
        }
        r.y0 = {t.y0(), t.y0_stderr()};
        r.y0_bias = reference ? std::abs(r.y0.value - spec.reference(0.0, spec.x0)) : kNaN;
        if (errors) {
            const ErrorEstimate eT = acc.finish(ThetaMode::Horizon);
            const ErrorEstimate eS = acc.finish(ThetaMode::Stopped);
            r.err2_T = {eT.value, eT.std_error};
            r.err2_stopped = {eS.value, eS.std_error};
        } else {
            r.err2_T = {kNaN, kNaN};
            r.err2_stopped = {kNaN, kNaN};
        }
        r.r_y = {kNaN, kNaN};
        r.r_z = {kNaN, kNaN};
        for (const auto& diag : t.diagnostics()) {
            r.max_picard_residual = std::max(r.max_picard_residual, diag.max_residual);
            r.max_picard_iterations = std::max(r.max_picard_iterations, diag.max_iterations);
        }
        return r;
    };

    EntryResult result;
    result.discrete = make_report(tables, discrete.time, discrete_error, "discrete");
    if (exact) result.exact = make_report(*exact_tables, exact->time, exact_error, "exact");
    if (regularity) {
        const RegularityEstimate reg = regularity->finish();
        for (ErrorReport* r : {&result.discrete, result.exact ? &*result.exact : nullptr}) {
            if (r == nullptr) continue;
            r->r_y = {reg.r_y, reg.r_y_stderr};
            r->r_z = {reg.r_z, reg.r_z_stderr};
        }
    }
    return result;
}

const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> columns = {
        "benchmark",        "exit_mode",       "engine",        "n",
        "h",                "seed",            "n_paths",       "m_fine",
        "err2_T",           "err2_T_se",       "err2_stopped",  "err2_stopped_se",
        "exit_abs_err",     "exit_abs_err_se", "exit_signed_err", "exit_signed_err_se",
        "r_y",              "r_y_se",          "r_z",           "r_z_se",
        "y0",               "y0_se",           "y0_bias",       "max_picard_residual",
        "max_picard_iterations"};
    return columns;
}

namespace {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s) {
    if (s == "nan") return kNaN;
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == s.size() && !s.empty(), ErrorCode::IoError, "bad number in report: '" + s + "'");
    return v;
}

std::uint64_t parse_count(const std::string& s) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == s.size() && !s.empty(), ErrorCode::IoError, "bad integer in report: '" + s + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void write_report_csv(std::ostream& os, std::span<const ErrorReport> rows) {
    const auto& columns = report_columns();
    for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
    os << '\n';
    for (const auto& r : rows) {
        for (const std::string* s : {&r.benchmark, &r.exit_mode, &r.engine}) {
            require(s->find_first_of(",\n") == std::string::npos, ErrorCode::IoError,
                    "report text fields must not contain commas or newlines");
        }
        os << r.benchmark << ',' << r.exit_mode << ',' << r.engine << ',' << r.steps << ',' << format_double(r.h)
           << ',' << r.seed << ',' << r.n_paths << ',' << r.m_fine;
        for (const Estimate* e : {&r.err2_T, &r.err2_stopped, &r.exit_abs_err, &r.exit_signed_err, &r.r_y, &r.r_z,
                                  &r.y0}) {
            os << ',' << format_double(e->value) << ',' << format_double(e->std_error);
        }
        os << ',' << format_double(r.y0_bias) << ',' << format_double(r.max_picard_residual) << ','
           << r.max_picard_iterations << '\n';
    }
}

void write_report_csv(const std::filesystem::path& file, std::span<const ErrorReport> rows) {
    std::ofstream os(file, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::IoError, "cannot open " + file.string());
    write_report_csv(os, rows);
    require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + file.string());
}

std::vector<ErrorReport> read_report_csv(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::IoError, "cannot open " + file.string());
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), ErrorCode::IoError, "empty report " + file.string());
    const auto& columns = report_columns();
    require(split_csv(line) == columns, ErrorCode::IoError, "unexpected report header in " + file.string());
    std::vector<ErrorReport> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        require(cells.size() == columns.size(), ErrorCode::IoError, "wrong column count in " + file.string());
        ErrorReport r;
        r.benchmark = cells[0];
        r.exit_mode = cells[1];
        r.engine = cells[2];
        r.steps = parse_count(cells[3]);
        r.h = parse_double(cells[4]);
        r.seed = parse_count(cells[5]);
        r.n_paths = parse_count(cells[6]);
        r.m_fine = parse_count(cells[7]);
        std::size_t c = 8;
        for (Estimate* e : {&r.err2_T, &r.err2_stopped, &r.exit_abs_err, &r.exit_signed_err, &r.r_y, &r.r_z, &r.y0}) {
            e->value = parse_double(cells[c++]);
            e->std_error = parse_double(cells[c++]);
        }
        r.y0_bias = parse_double(cells[c++]);
        r.max_picard_residual = parse_double(cells[c++]);
        r.max_picard_iterations = parse_count(cells[c++]);
        rows.push_back(std::move(r));
    }
    return rows;
}

Estimate report_metric(const ErrorReport& row, const std::string& metric) {
    if (metric == "err2_T") return row.err2_T;
    if (metric == "err2_stopped") return row.err2_stopped;
    if (metric == "exit_abs_err") return row.exit_abs_err;
    if (metric == "exit_signed_err") return row.exit_signed_err;
    if (metric == "r_y") return row.r_y;
    if (metric == "r_z") return row.r_z;
    if (metric == "r_y_plus_r_z") {
        return {row.r_y.value + row.r_z.value, std::hypot(row.r_y.std_error, row.r_z.std_error)};
    }
    if (metric == "y0") return row.y0;
    if (metric == "y0_bias") return {row.y0_bias, row.y0.std_error};
    throw Error(ErrorCode::InvalidArgument, "unknown report metric '" + metric + "'");
}

}  // namespace exitbsde
