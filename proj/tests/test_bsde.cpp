#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "exitbsde/analysis.hpp"
#include "exitbsde/bsde.hpp"

using namespace exitbsde;

namespace {

ProblemSpec brownian(std::size_t dim, Point x0) {
    ProblemSpec spec;
    spec.name = "test";
    spec.dim = dim;
    spec.x0 = std::move(x0);
    spec.drift = VectorCoefficient::zero(dim);
    spec.diffusion = MatrixCoefficient::identity(dim);
    spec.driver = zero_driver();
    spec.zero_driver = true;
    spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    return spec;
}

Domain interval(double lo, double hi) {
    return Domain({SmoothPiece::half_space({1.0}, lo), SmoothPiece::half_space({-1.0}, -hi)}, 2.0, 1.0);
}

Domain huge_ball(std::size_t dim) { return Domain({SmoothPiece::ball(Point(dim, 0.0), 1e3)}, 1.0, 1.0); }

/// E_i[X^1_{i+1}] = x^1 and E_i[X^1_{i+1} dW^k] = h 1_{k = 0}.
OracleFn martingale_oracle() {
    return [](std::size_t, const Grid& grid, std::span<const double> x, int component) {
        if (component < 0) return x[0];
        return component == 0 ? grid.step() : 0.0;
    };
}

void check_stopped_freeze(const PathBatch& batch, const BackwardTables& tables, const ProblemSpec& spec) {
    const std::size_t n = batch.grid().steps();
    for (std::size_t p = 0; p < batch.size(); ++p) {
        const std::size_t k = batch.exit_index(p);
        CHECK(tables.stop_index(p) == k);
        const double g = spec.terminal(batch.exit_time(p), batch.state(p, std::min(k, n)));
        for (std::size_t i = k; i <= n; ++i) CHECK(tables.y(p, i) == g);
        for (std::size_t i = k; i < n; ++i) {
            for (double z : tables.z(p, i)) CHECK(z == 0.0);
        }
    }
}

}  // namespace

TEST_CASE("constant terminal data gives constant Y and zero Z for every engine") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.terminal = [](double, std::span<const double>) { return 1.75; };
    const Domain domain = interval(-1.0, 1.0);
    const Grid grid(8, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, grid, 500, 3);
    const PathBatch tree = enumerate_binary_tree(spec, domain, grid);
    const OracleFn constant = [](std::size_t, const Grid&, std::span<const double>, int c) {
        return c < 0 ? 1.75 : 0.0;
    };
    struct Case {
        const PathBatch* paths;
        CondExpEngine engine;
    };
    for (const Case& c : {Case{&batch, CondExpEngine::regression()},
                          Case{&batch, CondExpEngine::regression(BasisSpec::polynomial(3))},
                          Case{&batch, CondExpEngine::analytic(constant)}, Case{&tree, CondExpEngine::exact_tree()}}) {
        const BackwardTables t = backward_solve(*c.paths, spec, c.engine);
        for (double y : t.raw_y()) CHECK(y == doctest::Approx(1.75).epsilon(1e-12));
        for (double z : t.raw_z()) CHECK(std::abs(z) < 1e-12);
    }
}

TEST_CASE("stopped martingale: Y is X stopped at the discrete exit") {
    const ProblemSpec spec = brownian(2, {0.3, -0.2});
    const Domain domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(32, 1.0), 2000, 8);
    const BackwardTables t = backward_solve(batch, spec, CondExpEngine::analytic(martingale_oracle()));
    for (std::size_t p = 0; p < batch.size(); ++p) {
        const std::size_t k = batch.exit_index(p);
        for (std::size_t i = 0; i <= 32; ++i) {
            CHECK(std::abs(t.y(p, i) - batch.state(p, std::min(i, k))[0]) <= 1e-12);
        }
        for (std::size_t i = 0; i < 32; ++i) {
            CHECK(std::abs(t.z(p, i)[0] - (i < k ? 1.0 : 0.0)) <= 1e-12);
            CHECK(std::abs(t.z(p, i)[1]) <= 1e-12);
        }
    }
    check_stopped_freeze(batch, t, spec);
}

TEST_CASE("linear driver without exits follows the closed-form recursion") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.driver = [](double, std::span<const double>, double y, std::span<const double>) { return -y; };
    spec.zero_driver = false;
    spec.lipschitz = 1.0;
    spec.terminal = [](double, std::span<const double>) { return 1.0; };
    const Grid grid(64, 1.0);
    const PathBatch batch = simulate_euler(spec, huge_ball(1), grid, 100, 1);
    const OracleFn oracle = [](std::size_t step, const Grid& g, std::span<const double>, int c) {
        return c < 0 ? std::pow(1.0 + g.step(), -static_cast<double>(g.steps() - step - 1)) : 0.0;
    };
    const double expected = std::exp(-64.0 * std::log1p(1.0 / 64.0));
    CHECK(expected == doctest::Approx(0.370734932900973).epsilon(1e-13));
    for (const CondExpEngine& engine : {CondExpEngine::analytic(oracle), CondExpEngine::regression()}) {
        const BackwardTables t = backward_solve(batch, spec, engine);
        CHECK(std::abs(t.y0() - expected) <= 1e-10);
        for (std::size_t i = 0; i <= 64; ++i) {
            CHECK(std::abs(t.y(0, i) - std::pow(1.0 + grid.step(), -static_cast<double>(64 - i))) <= 1e-10);
        }
    }
}

TEST_CASE("Picard fixed point holds on every alive index") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.driver = [](double t, std::span<const double> x, double y, std::span<const double> z) {
        return 0.5 * std::sin(y) + 0.2 * z[0] + t * x[0];
    };
    spec.zero_driver = false;
    spec.lipschitz = 0.7;
    const Domain domain = interval(-1.0, 1.0);
    const Grid grid(16, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, grid, 3000, 12);
    const OracleFn oracle = martingale_oracle();
    const BackwardTables t = backward_solve(batch, spec, CondExpEngine::analytic(oracle));
    for (std::size_t p = 0; p < batch.size(); ++p) {
        for (std::size_t i = 0; i < 16 && t.alive(p, i); ++i) {
            const auto x = batch.state(p, i);
            const double rhs = oracle(i, grid, x, -1) + grid.step() * spec.driver(grid.time(i), x, t.y(p, i), t.z(p, i));
            CHECK(std::abs(t.y(p, i) - rhs) <= 1e-12);
            CHECK(t.z(p, i)[0] == doctest::Approx(1.0).epsilon(1e-14));
        }
    }
    check_stopped_freeze(batch, t, spec);

    const BackwardTables r = backward_solve(batch, spec, CondExpEngine::regression());
    check_stopped_freeze(batch, r, spec);
    for (const auto& d : r.diagnostics()) CHECK(d.max_residual <= 1e-12);
}

TEST_CASE("tree engine and singleton-cell regression agree on a binary tree") {
    ProblemSpec spec = brownian(1, {0.1});
    spec.driver = [](double, std::span<const double> x, double y, std::span<const double> z) {
        return 0.3 * std::sin(y) + 0.2 * z[0] + x[0];
    };
    spec.zero_driver = false;
    spec.lipschitz = 0.5;
    spec.terminal = [](double t, std::span<const double> x) { return x[0] * x[0] + t; };
    const Grid grid(3, 1.0);
    const PathBatch tree = enumerate_binary_tree(spec, interval(-1.0, 1.0), grid);
    REQUIRE(tree.size() == 8);
    const BackwardTables a = backward_solve(tree, spec, CondExpEngine::exact_tree());
    const BackwardTables b = backward_solve(tree, spec, CondExpEngine::regression(BasisSpec::hypercube(1024)));
    for (std::size_t k = 0; k < a.raw_y().size(); ++k) CHECK(std::abs(a.raw_y()[k] - b.raw_y()[k]) <= 1e-12);
    for (std::size_t k = 0; k < a.raw_z().size(); ++k) CHECK(std::abs(a.raw_z()[k] - b.raw_z()[k]) <= 1e-12);
    check_stopped_freeze(tree, a, spec);
}

TEST_CASE("tree engine reproduces the stopped martingale") {
    const ProblemSpec spec = brownian(1, {0.0});
    const Grid grid(8, 1.0);
    const PathBatch tree = enumerate_binary_tree(spec, interval(-1.0, 1.0), grid);
    const BackwardTables t = backward_solve(tree, spec, CondExpEngine::exact_tree());
    const BackwardTables o = backward_solve(tree, spec, CondExpEngine::analytic(martingale_oracle()));
    for (std::size_t k = 0; k < t.raw_y().size(); ++k) CHECK(std::abs(t.raw_y()[k] - o.raw_y()[k]) <= 1e-12);
    for (std::size_t k = 0; k < t.raw_z().size(); ++k) CHECK(std::abs(t.raw_z()[k] - o.raw_z()[k]) <= 1e-12);
}

TEST_CASE("zero driver: mean of Y is constant in time on the full tree") {
    const ProblemSpec spec = brownian(1, {0.2});
    const Grid grid(10, 1.0);
    const PathBatch tree = enumerate_binary_tree(spec, interval(-1.0, 1.0), grid);
    const BackwardTables t = backward_solve(tree, spec, CondExpEngine::analytic(martingale_oracle()));
    std::size_t exited = 0;
    for (std::size_t p = 0; p < tree.size(); ++p) exited += tree.exit_index(p) < 10 ? 1 : 0;
    CHECK(exited > 0);
    for (std::size_t i = 0; i <= 10; ++i) {
        double mean = 0.0;
        for (std::size_t p = 0; p < tree.size(); ++p) mean += t.y(p, i);
        mean /= static_cast<double>(tree.size());
        CHECK(std::abs(mean - 0.2) <= 1e-10);
    }
}

TEST_CASE("zero driver: the scheme is linear in the terminal data") {
    ProblemSpec s1 = brownian(1, {0.0});
    ProblemSpec s2 = s1;
    ProblemSpec s12 = s1;
    s1.terminal = [](double t, std::span<const double> x) { return x[0] * x[0] - t; };
    s2.terminal = [](double, std::span<const double> x) { return std::sin(3.0 * x[0]); };
    s12.terminal = [&](double t, std::span<const double> x) { return s1.terminal(t, x) + s2.terminal(t, x); };
    const PathBatch batch = simulate_euler(s1, interval(-1.0, 1.0), Grid(16, 1.0), 4000, 21);
    for (const CondExpEngine& engine : {CondExpEngine::regression(), CondExpEngine::regression(BasisSpec::polynomial(3))}) {
        const BackwardTables a = backward_solve(batch, s1, engine);
        const BackwardTables b = backward_solve(batch, s2, engine);
        const BackwardTables c = backward_solve(batch, s12, engine);
        for (std::size_t k = 0; k < c.raw_y().size(); ++k) {
            CHECK(std::abs(c.raw_y()[k] - a.raw_y()[k] - b.raw_y()[k]) <= 1e-10);
        }
        for (std::size_t k = 0; k < c.raw_z().size(); ++k) {
            CHECK(std::abs(c.raw_z()[k] - a.raw_z()[k] - b.raw_z()[k]) <= 1e-10);
        }
    }
}

TEST_CASE("contraction and divergence are reported") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.lipschitz = 10.0;
    spec.zero_driver = false;
    const PathBatch batch = simulate_euler(spec, interval(-1.0, 1.0), Grid(8, 1.0), 10, 1);
    CHECK_THROWS_AS(backward_solve(batch, spec, CondExpEngine::regression()), Error);
    try {
        (void)backward_solve(batch, spec, CondExpEngine::regression());
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ContractionViolated);
    }
    // Declared constant too small for the actual driver: Picard blows up.
    spec.lipschitz = 1.0;
    spec.driver = [](double, std::span<const double>, double y, std::span<const double>) { return -40.0 * y; };
    spec.terminal = [](double, std::span<const double>) { return 1.0; };
    try {
        (void)backward_solve(batch, spec, CondExpEngine::regression());
        FAIL("expected PicardDiverged");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::PicardDiverged);
    }
}

TEST_CASE("backward tables binary round trip") {
    const ProblemSpec spec = brownian(2, {0.0, 0.0});
    const Domain domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(8, 1.0), 40, 2);
    const BackwardTables t = backward_solve(batch, spec, CondExpEngine::regression());
    const auto file = std::filesystem::temp_directory_path() / "exitbsde_test_tables.bin";
    write_backward_tables(file, t);
    const BackwardTables back = read_backward_tables(file);
    std::filesystem::remove(file);
    CHECK(back.raw_y() == t.raw_y());
    CHECK(back.raw_z() == t.raw_z());
    for (std::size_t p = 0; p < 40; ++p) CHECK(back.stop_index(p) == t.stop_index(p));
}

TEST_CASE("reference solution freezes at the exit") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.reference = [](double t, std::span<const double> x) { return x[0] + t; };
    spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) { out[0] = 2.0; };
    const Domain domain = interval(-1.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(4, 1.0), 5, 1);
    const PathBatch fine = refine_bridge(batch, spec, domain, 16, 1);
    std::vector<double> y(65), z(64);
    const Point exit_state{0.9};
    reference_solution(fine, 0, spec, 20, 0.3, exit_state, y, z);
    for (std::size_t j = 0; j < 20; ++j) {
        CHECK(y[j] == doctest::Approx(fine.state(0, j)[0] + fine.grid().time(j)));
        CHECK(z[j] == 2.0);
    }
    for (std::size_t j = 20; j <= 64; ++j) CHECK(y[j] == doctest::Approx(1.2));
    for (std::size_t j = 20; j < 64; ++j) CHECK(z[j] == 0.0);
}

TEST_CASE("regularity: constant Z on never-exiting paths contributes nothing") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.reference = [](double, std::span<const double> x) { return x[0]; };
    spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    const Domain domain = huge_ball(1);
    const Grid coarse(8, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, coarse, 500, 4);
    const PathBatch fine = refine_bridge(batch, spec, domain, 16, 4);
    const RegularityEstimate r =
        hatz_diagnostic(fine, spec, exit_oracle(fine, domain), coarse, CondExpEngine::regression());
    CHECK(std::abs(r.r_z) <= 1e-14);
    for (double v : r.r_z_per_step) CHECK(std::abs(v) <= 1e-14);
    // E sup |W_t - W_{t_i}|^2 over a step is of order h.
    CHECK(r.r_y > 0.0);
    CHECK(r.r_y < 4.0 * coarse.step());
}

TEST_CASE("regularity of the stopped martingale is of order h") {
    ProblemSpec spec = brownian(1, {0.0});
    spec.reference = [](double, std::span<const double> x) { return x[0]; };
    spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    const Domain domain = interval(-1.0, 1.0);
    std::vector<SlopePoint> points;
    for (std::size_t n : {8, 16, 32, 64}) {
        const Grid coarse(n, 1.0);
        const PathBatch batch = simulate_euler(spec, domain, coarse, 4000, 50);
        const PathBatch fine = refine_bridge(batch, spec, domain, 16, 50);
        const RegularityEstimate r =
            hatz_diagnostic(fine, spec, exit_oracle(fine, domain), coarse, CondExpEngine::regression());
        CHECK(r.r_y >= 0.0);
        CHECK(r.r_z >= 0.0);
        points.push_back({coarse.step(), r.r_y + r.r_z, std::hypot(r.r_y_stderr, r.r_z_stderr)});
    }
    const SlopeFit fit = fit_slope(points);
    CHECK(fit.slope >= 0.7);
    CHECK(fit.slope <= 1.3);
}
