#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "exitbsde/dynamics.hpp"
#include "exitbsde/rng.hpp"

using namespace exitbsde;

namespace {

ProblemSpec brownian(std::size_t dim, Point x0, double drift = 0.0, double vol = 1.0) {
    ProblemSpec spec;
    spec.name = "test";
    spec.dim = dim;
    spec.x0 = std::move(x0);
    spec.drift = VectorCoefficient::constant(Point(dim, drift));
    spec.diffusion = MatrixCoefficient::identity(dim, vol);
    spec.driver = zero_driver();
    spec.zero_driver = true;
    spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    return spec;
}

Domain interval(double lo, double hi) {
    return Domain({SmoothPiece::half_space({1.0}, lo), SmoothPiece::half_space({-1.0}, -hi)}, 2.0, 1.0);
}

Domain huge_ball(std::size_t dim) { return Domain({SmoothPiece::ball(Point(dim, 0.0), 1e3)}, 1.0, 1.0); }

struct Moments {
    double mean;
    double se;
};

Moments moments(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("counter RNG: determinism, independence of keys and normal quantiles") {
    const CounterRng a(42, 7, Substream::Coarse);
    const CounterRng b(42, 7, Substream::Coarse);
    const CounterRng c(42, 7, Substream::Bridge);
    for (std::uint64_t k = 0; k < 1000; ++k) {
        CHECK(a.bits(k) == b.bits(k));
        CHECK(a.bits(k) != c.bits(k));
        const double u = a.uniform(k);
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
    NormalStream s(a, 10);
    CHECK(s() == a.normal(10));
    CHECK(s() == a.normal(11));
    CHECK(inverse_normal_cdf(0.5) == 0.0);
    CHECK(inverse_normal_cdf(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-14));
    CHECK(inverse_normal_cdf(1e-10) == doctest::Approx(-6.361340902404056).epsilon(1e-13));
    for (double x : {-5.0, -2.3, -0.7, 0.1, 1.4, 3.9}) {
        CHECK(inverse_normal_cdf(standard_normal_cdf(x)) == doctest::Approx(x).epsilon(1e-12));
    }
}

TEST_CASE("frozen dynamics stay at x0") {
    ProblemSpec spec = brownian(2, {0.1, -0.2}, 0.0, 0.0);
    const Grid grid(16, 1.0);
    const PathBatch batch = simulate_euler(spec, huge_ball(2), grid, 5, 1);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        CHECK(batch.exit_index(p) == 16);
        for (std::size_t i = 0; i <= 16; ++i) {
            CHECK(batch.state(p, i)[0] == 0.1);
            CHECK(batch.state(p, i)[1] == -0.2);
        }
    }
}

TEST_CASE("x0 outside the domain exits immediately") {
    const ProblemSpec spec = brownian(1, {1.5});
    const Grid grid(8, 1.0);
    const PathBatch batch = simulate_euler(spec, interval(-1.0, 1.0), grid, 10, 3);
    const PathBatch fine = refine_bridge(batch, spec, interval(-1.0, 1.0), 16, 3);
    const ExitSchedule oracle = exit_oracle(fine, interval(-1.0, 1.0));
    for (std::size_t p = 0; p < batch.size(); ++p) {
        CHECK(batch.exit_index(p) == 0);
        CHECK(batch.exit_time(p) == 0.0);
        CHECK(oracle.time[p] == 0.0);
    }
}

TEST_CASE("Euler states are recomputable from the stored increments") {
    const ProblemSpec spec = brownian(2, {0.0, 0.0}, 0.3, 0.7);
    const Grid grid(20, 1.0);
    const PathBatch batch = simulate_euler(spec, huge_ball(2), grid, 50, 9);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        for (std::size_t i = 0; i < 20; ++i) {
            for (std::size_t k = 0; k < 2; ++k) {
                const double next = batch.state(p, i)[k] + 0.3 * grid.step() + 0.7 * batch.increment(p, i)[k];
                CHECK(batch.state(p, i + 1)[k] == next);
            }
        }
    }
}

TEST_CASE("discrete exit index is the first knot outside, capped at n") {
    const ProblemSpec spec = brownian(1, {0.0});
    const Domain domain = interval(-1.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(32, 1.0), 2000, 4);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        std::size_t expected = 32;
        for (std::size_t i = 0; i <= 32; ++i) {
            if (!domain.contains(batch.state(p, i))) {
                expected = i;
                break;
            }
        }
        CHECK(batch.exit_index(p) == expected);
    }
}

TEST_CASE("mean discrete exit time of Brownian motion from (-1, 1)") {
    const ProblemSpec spec = brownian(1, {0.0});
    const Domain domain = interval(-1.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(512, 8.0), 100000, 2024);
    std::vector<double> tau(batch.size());
    for (std::size_t p = 0; p < batch.size(); ++p) tau[p] = batch.exit_time(p);
    const Moments m = moments(tau);
    // E[tau] = (x - a)(b - x) = 1; tau-bar >= tau adds a positive overshoot bias.
    CHECK(m.mean - 1.0 > -3.0 * m.se);
    CHECK(m.mean - 1.0 <= 0.15 + 3.0 * m.se);

    // A 64x refined oracle on a subset sits closer to 1 than tau-bar does.
    const PathBatch subset = batch.slice(0, 4000);
    const PathBatch fine = refine_bridge(subset, spec, domain, 64, 2024);
    const ExitSchedule oracle = exit_oracle(fine, domain);
    std::vector<double> gap(subset.size());
    for (std::size_t p = 0; p < subset.size(); ++p) gap[p] = subset.exit_time(p) - oracle.time[p];
    const Moments g = moments(gap);
    CHECK(g.mean > 0.0);
    CHECK(m.mean - 1.0 - g.mean < 3.0 * (m.se + g.se) + 0.02);
}

TEST_CASE("bridge refinement with m = 2 splits every increment consistently") {
    const ProblemSpec spec = brownian(2, {0.0, 0.0});
    const Grid grid(16, 1.0);
    const PathBatch batch = simulate_euler(spec, huge_ball(2), grid, 200, 5);
    const PathBatch fine = refine_bridge(batch, spec, huge_ball(2), 2, 5);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        for (std::size_t i = 0; i < 16; ++i) {
            for (std::size_t k = 0; k < 2; ++k) {
                const double sum = fine.increment(p, 2 * i)[k] + fine.increment(p, 2 * i + 1)[k];
                CHECK(std::abs(sum - batch.increment(p, i)[k]) <= 1e-15 * std::max(1.0, std::abs(sum)));
            }
        }
    }
}

TEST_CASE("refinement restricted to coarse knots is the identity") {
    const ProblemSpec spec = brownian(2, {0.2, 0.1}, 0.5, 0.8);
    const Domain domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(10, 1.0), 300, 77);
    const PathBatch fine = refine_bridge(batch, spec, domain, 16, 77);
    for (std::size_t p = 0; p < batch.size(); ++p) {
        for (std::size_t i = 0; i <= 10; ++i) {
            CHECK(fine.state(p, 16 * i)[0] == batch.state(p, i)[0]);
            CHECK(fine.state(p, 16 * i)[1] == batch.state(p, i)[1]);
        }
    }
}

TEST_CASE("zero diffusion: refined path is the linear drift and the exit is unchanged") {
    ProblemSpec spec = brownian(1, {0.0}, 1.0, 0.0);
    const Domain domain = interval(-1.0, 1.0);
    const Grid grid(8, 2.0);
    const PathBatch batch = simulate_euler(spec, domain, grid, 3, 1);
    const PathBatch fine = refine_bridge(batch, spec, domain, 16, 1);
    const ExitSchedule oracle = exit_oracle(fine, domain);
    for (std::size_t p = 0; p < 3; ++p) {
        CHECK(batch.exit_index(p) == 4);
        CHECK(oracle.time[p] == batch.exit_time(p));
        for (std::size_t j = 0; j <= 128; ++j) {
            CHECK(fine.state(p, j)[0] == doctest::Approx(fine.grid().time(j)).epsilon(1e-14));
        }
    }
}

TEST_CASE("fine increments have variance h / m") {
    const ProblemSpec spec = brownian(2, {0.0, 0.0});
    const Grid grid(4, 1.0);
    const std::size_t m = 8;
    const PathBatch batch = simulate_euler(spec, huge_ball(2), grid, 4000, 13);
    const PathBatch fine = refine_bridge(batch, spec, huge_ball(2), m, 13);
    // 4000 paths x 32 fine steps: 1.28e5 samples per component.
    for (std::size_t k = 0; k < 2; ++k) {
        std::vector<double> sq;
        for (std::size_t p = 0; p < fine.size(); ++p) {
            for (std::size_t j = 0; j < 32; ++j) sq.push_back(fine.increment(p, j)[k] * fine.increment(p, j)[k]);
        }
        const Moments v = moments(sq);
        CHECK(std::abs(v.mean - grid.step() / m) <= 3.0 * v.se);
    }
}

TEST_CASE("exit oracle: paths staying inside exit at T") {
    const ProblemSpec spec = brownian(1, {0.0}, 0.0, 0.01);
    const PathBatch batch = simulate_euler(spec, interval(-1.0, 1.0), Grid(8, 1.0), 50, 1);
    const PathBatch fine = refine_bridge(batch, spec, interval(-1.0, 1.0), 16, 1);
    const ExitSchedule oracle = exit_oracle(fine, interval(-1.0, 1.0));
    for (std::size_t p = 0; p < 50; ++p) CHECK(oracle.time[p] == 1.0);
    CHECK_THROWS_AS(exit_oracle(refine_bridge(batch, spec, interval(-1.0, 1.0), 8, 1), interval(-1.0, 1.0)), Error);
}

TEST_CASE("exit oracle: finer grids detect exits no later on average") {
    const ProblemSpec spec = brownian(1, {0.0});
    const Domain domain = interval(-1.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(8, 1.0), 20000, 31);
    std::vector<std::vector<double>> tau;
    for (std::size_t m : {16, 64, 256}) {
        tau.push_back(exit_oracle(refine_bridge(batch, spec, domain, m, 31), domain).time);
    }
    for (std::size_t r = 0; r + 1 < tau.size(); ++r) {
        std::vector<double> diff(batch.size());
        for (std::size_t p = 0; p < batch.size(); ++p) diff[p] = tau[r][p] - tau[r + 1][p];
        const Moments d = moments(diff);
        CHECK(d.mean >= -3.0 * d.se);
    }
    // A coarse knot outside O bounds the fine exit from above.
    for (std::size_t p = 0; p < batch.size(); ++p) CHECK(tau[2][p] <= batch.exit_time(p));
}

TEST_CASE("bridge crossing probabilities") {
    const double h = 0.01;
    CHECK(bridge_crossing_probability(-0.1, -0.2, h, 1.0) == 1.0);
    CHECK(bridge_crossing_probability(0.1, -0.2, h, 1.0) == 1.0);
    const double deep = 10.0 * std::sqrt(h);
    const double p = bridge_crossing_probability(deep, deep, h, 1.0);
    CHECK(p <= std::exp(-200.0));
    const CounterRng rng(1, 0, Substream::Test);
    std::size_t hits = 0;
    for (std::uint64_t k = 0; k < 1000000; ++k) hits += rng.uniform(k) < p ? 1 : 0;
    CHECK(hits == 0);
}

TEST_CASE("bridge crossing frequency matches a refined discrete oracle") {
    // Bridges from delta to delta over [0, h] with delta = sqrt(h) / 2: P(cross) = e^{-1/2}.
    const double h = 0.04;
    const double delta = 0.5 * std::sqrt(h);
    const double p = bridge_crossing_probability(delta, delta, h, 1.0);
    CHECK(p == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));

    const std::size_t m = 256;
    const double dt = h / m;
    // Discrete monitoring misses crossings; the continuity correction shifts
    // the barrier by 0.5826 sqrt(dt).
    const double shift = 0.5826 * std::sqrt(dt);
    const std::size_t samples = 20000;
    std::size_t crossed = 0;
    NormalStream normal(CounterRng(8, 0, Substream::Test));
    for (std::size_t s = 0; s < samples; ++s) {
        double w = 0.0;
        double lowest = 0.0;
        for (std::size_t j = 1; j < m; ++j) {
            const double remaining = static_cast<double>(m - j + 1);
            w += (0.0 - w) / remaining + std::sqrt(dt * (remaining - 1.0) / remaining) * normal();
            lowest = std::min(lowest, w);
        }
        crossed += delta + lowest - shift <= 0.0 ? 1 : 0;
    }
    const double freq = static_cast<double>(crossed) / samples;
    const double se = std::sqrt(p * (1.0 - p) / samples);
    CHECK(std::abs(freq - p) <= 3.0 * se + 0.005);
}

TEST_CASE("exact exit sampling over one step matches the reflection principle") {
    const double h = 0.04;
    const double delta = 0.5 * std::sqrt(h);
    const ProblemSpec spec = brownian(1, {delta});
    const Domain half({SmoothPiece::half_space({1.0}, 0.0)}, 2.0, h);
    const PathBatch batch = simulate_euler(spec, half, Grid(1, h), 100000, 17);
    const ExitSchedule exact = exact_exit_halfspace(batch, spec, half, 17);
    std::size_t exited = 0;
    for (std::size_t p = 0; p < batch.size(); ++p) {
        CHECK(exact.stop_index[p] == 1);
        const bool endpoint_out = batch.state(p, 1)[0] <= 0.0;
        if (exact.interior_crossing[p]) {
            CHECK_FALSE(endpoint_out);
            CHECK(exact.time[p] == doctest::Approx(0.5 * h));
        } else {
            CHECK(exact.time[p] == h);
        }
        if (exact.interior_crossing[p] || endpoint_out) {
            ++exited;
            CHECK(std::abs(exact.state[p]) < 1e-15);
        } else {
            CHECK(exact.state[p] == batch.state(p, 1)[0]);
        }
    }
    // P(tau <= h) = 2 Phi(-delta / sqrt h) = 2 Phi(-1/2).
    const double target = 2.0 * standard_normal_cdf(-0.5);
    const double freq = static_cast<double>(exited) / batch.size();
    CHECK(std::abs(freq - target) <= 3.0 * std::sqrt(target * (1.0 - target) / batch.size()));
}

TEST_CASE("exact exit sampling rejects curved domains") {
    const ProblemSpec spec = brownian(2, {0.0, 0.0});
    const Domain ball({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const PathBatch batch = simulate_euler(spec, ball, Grid(4, 1.0), 4, 1);
    CHECK_THROWS_AS(exact_exit_halfspace(batch, spec, ball, 1), Error);
}

TEST_CASE("simulation is deterministic and path-separable") {
    const ProblemSpec spec = brownian(2, {0.1, 0.0}, 0.2, 1.0);
    const Domain domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const Grid grid(12, 1.0);
    const PathBatch a = simulate_euler(spec, domain, grid, 100, 99);
    const PathBatch b = simulate_euler(spec, domain, grid, 100, 99);
    CHECK(a.raw_states() == b.raw_states());
    CHECK(a.raw_increments() == b.raw_increments());
    CHECK(a.raw_exit_indices() == b.raw_exit_indices());

    // Paths 60..99 simulated alone equal the slice of the full batch.
    const PathBatch tail = simulate_euler(spec, domain, grid, 40, 99, 60);
    const PathBatch slice = a.slice(60, 40);
    CHECK(tail.raw_states() == slice.raw_states());
    CHECK(tail.raw_exit_indices() == slice.raw_exit_indices());
    const PathBatch fa = refine_bridge(slice, spec, domain, 16, 99);
    const PathBatch fb = refine_bridge(tail, spec, domain, 16, 99);
    CHECK(fa.raw_states() == fb.raw_states());

    const PathBatch other = simulate_euler(spec, domain, grid, 100, 100);
    CHECK(other.raw_states() != a.raw_states());
}

TEST_CASE("second moment of Brownian motion at T") {
    const ProblemSpec spec = brownian(3, {0.0, 0.0, 0.0});
    const PathBatch batch = simulate_euler(spec, huge_ball(3), Grid(10, 2.0), 50000, 6);
    std::vector<double> sq(batch.size());
    for (std::size_t p = 0; p < batch.size(); ++p) {
        const auto x = batch.state(p, 10);
        sq[p] = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    }
    const Moments m = moments(sq);
    CHECK(std::abs(m.mean - 6.0) <= 3.0 * m.se);
}

TEST_CASE("binary tree enumeration") {
    const ProblemSpec spec = brownian(1, {0.0});
    const Grid grid(3, 1.0);
    const PathBatch tree = enumerate_binary_tree(spec, huge_ball(1), grid);
    REQUIRE(tree.size() == 8);
    const double s = std::sqrt(grid.step());
    double mean = 0.0;
    for (std::size_t p = 0; p < 8; ++p) {
        for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(std::abs(tree.increment(p, i)[0]) - s) < 1e-15);
        mean += tree.state(p, 3)[0];
    }
    CHECK(std::abs(mean) < 1e-14);
}

TEST_CASE("path batch binary round trip") {
    const ProblemSpec spec = brownian(2, {0.1, 0.0});
    const Domain domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 2.0, 1.0);
    const PathBatch batch = simulate_euler(spec, domain, Grid(6, 1.0), 17, 5, 3);
    const auto file = std::filesystem::temp_directory_path() / "exitbsde_test_batch.bin";
    write_path_batch(file, batch);
    const PathBatch back = read_path_batch(file);
    std::filesystem::remove(file);
    CHECK(back.size() == 17);
    CHECK(back.first_path() == 3);
    CHECK(back.seed() == 5);
    CHECK(back.grid().steps() == 6);
    CHECK(back.raw_states() == batch.raw_states());
    CHECK(back.raw_increments() == batch.raw_increments());
    CHECK(back.raw_exit_indices() == batch.raw_exit_indices());
    CHECK_THROWS_AS(read_path_batch(std::filesystem::temp_directory_path() / "exitbsde_missing.bin"), Error);
}
