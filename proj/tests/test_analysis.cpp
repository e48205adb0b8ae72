#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "exitbsde/analysis.hpp"

using namespace exitbsde;

namespace {

ProblemSpec stopped_brownian() {
    ProblemSpec spec;
    spec.name = "sbm";
    spec.dim = 1;
    spec.x0 = {0.0};
    spec.drift = VectorCoefficient::zero(1);
    spec.diffusion = MatrixCoefficient::identity(1);
    spec.driver = zero_driver();
    spec.zero_driver = true;
    spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    spec.reference = [](double, std::span<const double> x) { return x[0]; };
    spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    return spec;
}

Domain interval() {
    return Domain({SmoothPiece::half_space({1.0}, -1.0), SmoothPiece::half_space({-1.0}, -1.0)}, 2.0, 1.0);
}

CondExpEngine martingale_engine() {
    return CondExpEngine::analytic([](std::size_t, const Grid& grid, std::span<const double> x, int c) {
        return c < 0 ? x[0] : grid.step();
    });
}

EntryOptions options(std::size_t n, std::size_t paths, std::uint64_t seed) {
    EntryOptions o;
    o.steps = n;
    o.n_paths = paths;
    o.m_fine = 16;
    o.seed = seed;
    return o;
}

PathBatch permuted(const PathBatch& b, const std::vector<std::size_t>& perm) {
    PathBatch out(b.grid(), b.dim(), b.size(), b.seed(), 0, b.refinement());
    const std::size_t n = b.grid().steps();
    for (std::size_t p = 0; p < b.size(); ++p) {
        for (std::size_t i = 0; i <= n; ++i) {
            std::copy(b.state(perm[p], i).begin(), b.state(perm[p], i).end(), out.state(p, i).begin());
        }
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(b.increment(perm[p], i).begin(), b.increment(perm[p], i).end(), out.increment(p, i).begin());
        }
        out.set_exit_index(p, b.exit_index(perm[p]));
    }
    return out;
}

BackwardTables permuted(const BackwardTables& t, const std::vector<std::size_t>& perm) {
    BackwardTables out(t.steps(), t.dim(), t.size());
    for (std::size_t p = 0; p < t.size(); ++p) {
        for (std::size_t i = 0; i <= t.steps(); ++i) out.y(p, i) = t.y(perm[p], i);
        for (std::size_t i = 0; i < t.steps(); ++i) {
            std::copy(t.z(perm[p], i).begin(), t.z(perm[p], i).end(), out.z(p, i).begin());
        }
        out.set_stop_index(p, t.stop_index(perm[p]));
    }
    return out;
}

ExitSchedule permuted(const ExitSchedule& e, const std::vector<std::size_t>& perm) {
    ExitSchedule out = e;
    for (std::size_t p = 0; p < perm.size(); ++p) {
        out.time[p] = e.time[perm[p]];
        out.stop_index[p] = e.stop_index[perm[p]];
        out.interior_crossing[p] = e.interior_crossing[perm[p]];
        for (std::size_t k = 0; k < e.dim; ++k) out.state[p * e.dim + k] = e.state[perm[p] * e.dim + k];
    }
    return out;
}

}  // namespace

TEST_CASE("self comparison: only the within-step oscillation remains") {
    const ProblemSpec spec = stopped_brownian();
    const Domain domain = interval();
    const Grid grid(16, 1.0);
    const std::size_t m = 16;
    const PathBatch batch = simulate_euler(spec, domain, grid, 3000, 5);
    const BackwardTables tables = backward_solve(batch, spec, martingale_engine());
    const PathBatch fine = refine_bridge(batch, spec, domain, m, 5);
    const ExitSchedule scheme = discrete_exits(batch);
    // Reference exit = tau-bar itself, on the fine grid.
    ExitSchedule reference = scheme;
    for (auto& s : reference.stop_index) s *= m;
    const ErrorEstimate e = strong_error(fine, tables, spec, ThetaMode::Horizon, reference, scheme);
    CHECK(e.z_part == 0.0);

    std::vector<double> sup(grid.steps(), 0.0);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        const std::size_t stop = reference.stop_index[p];
        for (std::size_t i = 0; i < grid.steps(); ++i) {
            const double left = fine.state(p, std::min(i * m, stop))[0];
            double s = 0.0;
            for (std::size_t j = i * m; j <= (i + 1) * m; ++j) {
                const double v = fine.state(p, std::min(j, stop))[0] - left;
                s = std::max(s, v * v);
            }
            sup[i] += s / batch.size();
        }
    }
    CHECK(e.y_part == doctest::Approx(*std::max_element(sup.begin(), sup.end())).epsilon(1e-12));
    CHECK(e.y_part <= 4.0 * grid.step());
}

TEST_CASE("stopped error never exceeds the horizon error") {
    const ProblemSpec spec = stopped_brownian();
    for (std::uint64_t seed : {1, 2, 3}) {
        for (std::size_t n : {8, 32}) {
            const EntryResult r = run_entry(spec, interval(), martingale_engine(), options(n, 2000, seed), "sbm", "analytic");
            const ErrorReport& row = r.discrete;
            CHECK(row.err2_stopped.value <= row.err2_T.value + 3.0 * (row.err2_stopped.std_error + row.err2_T.std_error));
        }
    }
}

TEST_CASE("horizon error decreases along the ladder") {
    const ProblemSpec spec = stopped_brownian();
    const EntryResult coarse = run_entry(spec, interval(), martingale_engine(), options(32, 4000, 9), "sbm", "analytic");
    const EntryResult fine = run_entry(spec, interval(), martingale_engine(), options(128, 4000, 9), "sbm", "analytic");
    CHECK(fine.discrete.err2_T.value < coarse.discrete.err2_T.value);
}

TEST_CASE("exit error vanishes without exits and for immediate exits") {
    ProblemSpec spec = stopped_brownian();
    const Domain huge({SmoothPiece::ball({0.0}, 1e3)}, 1.0, 1.0);
    const EntryResult none = run_entry(spec, huge, martingale_engine(), options(8, 200, 1), "sbm", "analytic");
    CHECK(none.discrete.exit_abs_err.value == 0.0);
    CHECK(none.discrete.exit_signed_err.value == 0.0);
    spec.x0 = {2.0};
    const EntryResult outside = run_entry(spec, interval(), martingale_engine(), options(8, 200, 1), "sbm", "analytic");
    CHECK(outside.discrete.exit_abs_err.value == 0.0);
    CHECK(outside.discrete.err2_T.value == 0.0);

    const std::vector<double> a{0.5, 1.0, 0.25}, b{0.25, 1.0, 0.5};
    const ExitError e = exit_error(a, b);
    CHECK(e.abs.value == doctest::Approx(1.0 / 6.0));
    CHECK(e.signed_mean.value == doctest::Approx(0.0));
}

TEST_CASE("exit error decays like sqrt(h)") {
    const ProblemSpec spec = stopped_brownian();
    std::vector<SlopePoint> points;
    for (std::size_t n : {8, 16, 32, 64, 128}) {
        EntryOptions o = options(n, 6000, 44);
        o.m_fine = 64;
        const EntryResult r = run_entry(spec, interval(), martingale_engine(), o, "sbm", "analytic");
        points.push_back({r.discrete.h, r.discrete.exit_abs_err.value, r.discrete.exit_abs_err.std_error});
    }
    const SlopeFit fit = fit_slope(points);
    CHECK(fit.slope >= 0.35);
    CHECK(fit.slope <= 0.65);
}

TEST_CASE("fit_slope is exact on power laws") {
    std::vector<SlopePoint> lin, root;
    for (double h : {1.0 / 8, 1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128}) {
        lin.push_back({h, 3.7 * h, 0.0});
        root.push_back({h, 0.2 * std::sqrt(h), 0.0});
    }
    const SlopeFit a = fit_slope(lin);
    CHECK(std::abs(a.slope - 1.0) <= 1e-12);
    CHECK(std::abs(a.intercept - std::log(3.7)) <= 1e-12);
    CHECK(a.half_width <= 1e-12);
    CHECK_FALSE(a.dropped_largest_h);
    const SlopeFit b = fit_slope(root);
    CHECK(std::abs(b.slope - 0.5) <= 1e-12);
    CHECK(b.used == 5);
}

TEST_CASE("fit_slope confidence half-width uses the Student t quantile") {
    const std::vector<SlopePoint> pts{{0.1, 0.30, 0.0}, {0.05, 0.18, 0.0}, {0.025, 0.11, 0.0}, {0.0125, 0.05, 0.0},
                                      {0.00625, 0.033, 0.0}};
    const SlopeFit fit = fit_slope(pts);
    std::vector<double> x, y;
    for (const auto& p : pts) {
        x.push_back(std::log(p.h));
        y.push_back(std::log(p.value));
    }
    const double xm = std::accumulate(x.begin(), x.end(), 0.0) / 5.0;
    const double ym = std::accumulate(y.begin(), y.end(), 0.0) / 5.0;
    double sxx = 0.0, sxy = 0.0;
    for (int k = 0; k < 5; ++k) {
        sxx += (x[k] - xm) * (x[k] - xm);
        sxy += (x[k] - xm) * (y[k] - ym);
    }
    const double slope = sxy / sxx;
    double rss = 0.0;
    for (int k = 0; k < 5; ++k) {
        const double r = y[k] - ym - slope * (x[k] - xm);
        rss += r * r;
    }
    // t_{0.975, 3} = 3.182446305284263
    const double half = 3.182446305284263 * std::sqrt(rss / 3.0 / sxx);
    CHECK(fit.slope == doctest::Approx(slope).epsilon(1e-12));
    CHECK(fit.half_width == doctest::Approx(half).epsilon(1e-9));
    CHECK(fit.residual_norm == doctest::Approx(std::sqrt(rss)).epsilon(1e-9));
}

TEST_CASE("fit_slope drops a pre-asymptotic largest-h point") {
    std::vector<SlopePoint> pts;
    for (double h : {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128}) pts.push_back({h, h, 0.1 * h});
    pts.insert(pts.begin(), SlopePoint{1.0 / 8, 1.0 / 16 + 0.001, 0.01});
    const SlopeFit fit = fit_slope(pts);
    CHECK(fit.dropped_largest_h);
    CHECK(fit.used == 4);
    CHECK(std::abs(fit.slope - 1.0) <= 1e-12);
    const SlopeFit kept = fit_slope(pts, false);
    CHECK_FALSE(kept.dropped_largest_h);
    CHECK(kept.used == 5);
}

TEST_CASE("fit_slope rejects unusable ladders") {
    const std::vector<SlopePoint> two{{0.1, 1.0, 0.0}, {0.05, 0.5, 0.0}};
    try {
        (void)fit_slope(two);
        FAIL("expected InsufficientPoints");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InsufficientPoints);
    }
    const std::vector<SlopePoint> zeros{{0.1, 0.0, 0.0}, {0.05, 0.5, 0.0}, {0.025, -1.0, 0.0}, {0.0125, 0.1, 0.0}};
    try {
        (void)fit_slope(zeros);
        FAIL("expected NonPositiveValue");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NonPositiveValue);
    }
    const std::vector<SlopePoint> some{{0.1, 0.0, 0.0}, {0.05, 0.5, 0.0}, {0.025, 0.25, 0.0}, {0.0125, 0.125, 0.0}};
    const SlopeFit fit = fit_slope(some);
    CHECK(fit.excluded[0]);
    CHECK(fit.used == 3);
}

TEST_CASE("error estimators are invariant under path reordering") {
    const ProblemSpec spec = stopped_brownian();
    const Domain domain = interval();
    const Grid grid(16, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, grid, 1500, 12);
    const BackwardTables tables = backward_solve(batch, spec, martingale_engine());
    const PathBatch fine = refine_bridge(batch, spec, domain, 16, 12);
    const ExitSchedule scheme = discrete_exits(batch);
    const ExitSchedule oracle = exit_oracle(fine, domain);

    std::vector<std::size_t> perm(batch.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
    const PathBatch fine_p = permuted(fine, perm);
    const BackwardTables tables_p = permuted(tables, perm);
    const ExitSchedule scheme_p = permuted(scheme, perm);
    const ExitSchedule oracle_p = permuted(oracle, perm);

    for (ThetaMode mode : {ThetaMode::Horizon, ThetaMode::Stopped}) {
        const ErrorEstimate a = strong_error(fine, tables, spec, mode, oracle, scheme);
        const ErrorEstimate b = strong_error(fine_p, tables_p, spec, mode, oracle_p, scheme_p);
        CHECK(b.value == doctest::Approx(a.value).epsilon(1e-12));
        CHECK(b.std_error == doctest::Approx(a.std_error).epsilon(1e-9));
    }
    const ExitError a = exit_error(scheme, oracle);
    const ExitError b = exit_error(scheme_p, oracle_p);
    CHECK(b.abs.value == doctest::Approx(a.abs.value).epsilon(1e-12));
    CHECK(b.abs.std_error == doctest::Approx(a.abs.std_error).epsilon(1e-9));
}

TEST_CASE("chunking the fine pass does not change the report") {
    const ProblemSpec spec = stopped_brownian();
    EntryOptions a = options(16, 1000, 4);
    a.regularity = true;
    EntryOptions b = a;
    b.chunk = 97;
    const ErrorReport ra = run_entry(spec, interval(), martingale_engine(), a, "sbm", "analytic").discrete;
    const ErrorReport rb = run_entry(spec, interval(), martingale_engine(), b, "sbm", "analytic").discrete;
    CHECK(ra.err2_T.value == doctest::Approx(rb.err2_T.value).epsilon(1e-12));
    CHECK(ra.err2_stopped.value == doctest::Approx(rb.err2_stopped.value).epsilon(1e-12));
    CHECK(ra.exit_abs_err.value == rb.exit_abs_err.value);
    CHECK(ra.r_y.value == doctest::Approx(rb.r_y.value).epsilon(1e-12));
    CHECK(ra.r_z.value == doctest::Approx(rb.r_z.value).epsilon(1e-12));
}

TEST_CASE("doubling the paths halves the squared standard error") {
    const ProblemSpec spec = stopped_brownian();
    double ratio = 0.0;
    for (std::uint64_t rep = 0; rep < 10; ++rep) {
        const ErrorReport small =
            run_entry(spec, interval(), martingale_engine(), options(16, 1000, 100 + rep), "sbm", "analytic").discrete;
        const ErrorReport large =
            run_entry(spec, interval(), martingale_engine(), options(16, 2000, 200 + rep), "sbm", "analytic").discrete;
        ratio += (large.exit_abs_err.std_error * large.exit_abs_err.std_error) /
                 (small.exit_abs_err.std_error * small.exit_abs_err.std_error) / 10.0;
    }
    CHECK(ratio >= 0.5 * 0.8);
    CHECK(ratio <= 0.5 * 1.2);
}

TEST_CASE("exact exits do not increase the stopped error") {
    const ProblemSpec spec = stopped_brownian();
    EntryOptions o = options(32, 4000, 8);
    o.exact_mode = true;
    const EntryResult r = run_entry(spec, interval(), martingale_engine(), o, "sbm", "analytic");
    REQUIRE(r.exact);
    CHECK(r.exact->exit_mode == "exact");
    CHECK(r.exact->err2_stopped.value <= r.discrete.err2_stopped.value + 3.0 * r.discrete.err2_stopped.std_error);
    CHECK(r.exact->err2_T.value < r.discrete.err2_T.value);
}

TEST_CASE("without the fine pass only y0 is reported") {
    const ProblemSpec spec = stopped_brownian();
    EntryOptions o = options(8, 500, 1);
    o.fine_pass = false;
    const ErrorReport r = run_entry(spec, interval(), martingale_engine(), o, "sbm", "analytic").discrete;
    CHECK(std::isnan(r.err2_T.value));
    CHECK(std::isnan(r.exit_abs_err.value));
    CHECK(std::isnan(r.r_y.value));
    CHECK(r.y0.value == doctest::Approx(0.0));
}

TEST_CASE("report CSV: frozen columns, round trip and byte determinism") {
    const auto& cols = report_columns();
    const std::vector<std::string> expected{
        "benchmark", "exit_mode", "engine", "n", "h", "seed", "n_paths", "m_fine", "err2_T", "err2_T_se",
        "err2_stopped", "err2_stopped_se", "exit_abs_err", "exit_abs_err_se", "exit_signed_err", "exit_signed_err_se",
        "r_y", "r_y_se", "r_z", "r_z_se", "y0", "y0_se", "y0_bias", "max_picard_residual", "max_picard_iterations"};
    CHECK(cols == expected);

    const ProblemSpec spec = stopped_brownian();
    EntryOptions o = options(8, 300, 2);
    o.regularity = true;
    o.exact_mode = true;
    std::vector<ErrorReport> rows;
    for (std::size_t n : {8, 16}) {
        o.steps = n;
        const EntryResult r = run_entry(spec, interval(), martingale_engine(), o, "sbm", "analytic");
        rows.push_back(r.discrete);
        rows.push_back(*r.exact);
    }
    EntryOptions no_fine = o;
    no_fine.fine_pass = false;
    rows.push_back(run_entry(spec, interval(), martingale_engine(), no_fine, "sbm", "analytic").discrete);

    std::ostringstream first, second;
    write_report_csv(first, rows);
    std::vector<ErrorReport> again;
    for (std::size_t n : {8, 16}) {
        o.steps = n;
        const EntryResult r = run_entry(spec, interval(), martingale_engine(), o, "sbm", "analytic");
        again.push_back(r.discrete);
        again.push_back(*r.exact);
    }
    again.push_back(run_entry(spec, interval(), martingale_engine(), no_fine, "sbm", "analytic").discrete);
    write_report_csv(second, again);
    CHECK(first.str() == second.str());

    const auto file = std::filesystem::temp_directory_path() / "exitbsde_test_report.csv";
    write_report_csv(file, rows);
    const auto back = read_report_csv(file);
    std::filesystem::remove(file);
    REQUIRE(back.size() == rows.size());
    std::ostringstream third;
    write_report_csv(third, back);
    CHECK(third.str() == first.str());
    CHECK(std::isnan(back.back().err2_T.value));
    CHECK(back[0].r_y.value == rows[0].r_y.value);

    const Estimate sum = report_metric(rows[0], "r_y_plus_r_z");
    CHECK(sum.value == doctest::Approx(rows[0].r_y.value + rows[0].r_z.value));
    CHECK_THROWS_AS(report_metric(rows[0], "nope"), Error);
}
