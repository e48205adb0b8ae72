#include "exitbsde/benchmarks.hpp"

#include "exitbsde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace exitbsde {

namespace {

constexpr double kPi = std::numbers::pi;

/// C-infinity step: 0 for r <= r0, 1 for r >= r1.
double smooth_step(double r, double r0, double r1) {
    const double s = (r - r0) / (r1 - r0);
    if (s <= 0.0) return 0.0;
    if (s >= 1.0) return 1.0;
    const double a = std::exp(-1.0 / s);
    const double b = std::exp(-1.0 / (1.0 - s));
    return a / (a + b);
}

Domain interval(double lo, double hi, double lipschitz, double horizon) {
    return Domain({SmoothPiece::half_space({1.0}, lo), SmoothPiece::half_space({-1.0}, -hi)}, lipschitz, horizon);
}

ProblemSpec one_dim_brownian(std::string name, double x0) {
    ProblemSpec spec;
    spec.name = std::move(name);
    spec.dim = 1;
    spec.x0 = {x0};
    spec.drift = VectorCoefficient::zero(1);
    spec.diffusion = MatrixCoefficient::identity(1);
    spec.driver = zero_driver();
    spec.zero_driver = true;
    spec.lipschitz = 1.0;
    return spec;
}

void finish_registration(Benchmark& b) {
    if (b.spec.has_reference()) {
        b.registration = check_registration(b.spec, b.domain, b.sample_lower, b.sample_upper);
        require(b.registration.passed(), ErrorCode::InvalidArgument,
                "benchmark " + b.name + " failed its registration check");
    }
}

}  // namespace

RegistrationCheck check_registration(const ProblemSpec& spec, const Domain& domain, const Point& lower,
                                     const Point& upper, std::size_t samples, std::uint64_t seed) {
    if (!spec.has_reference()) throw Error(ErrorCode::MissingReference, "registration check needs u and Du");
    const std::size_t d = spec.dim;
    require(lower.size() == d && upper.size() == d, ErrorCode::InvalidArgument, "sample box dimension mismatch");
    const double T = domain.horizon();
    RegistrationCheck check;

    std::vector<double> x(d), xp(d), grad(d), gp(d), gm(d), hess(d * d), b(d), sigma(d * d), a(d * d), z(d);
    const auto draw_point = [&](const CounterRng& rng, std::uint64_t base) {
        for (std::size_t k = 0; k < d; ++k) x[k] = lower[k] + (upper[k] - lower[k]) * rng.uniform(base + k);
    };

    const double eps_t = 1e-5;
    const double eps_x = 1e-5;
    const std::size_t max_attempts = 100 * samples + 100;
    for (std::size_t attempt = 0; attempt < max_attempts && check.interior_samples < samples; ++attempt) {
        const CounterRng rng(seed, attempt, Substream::Validation);
        draw_point(rng, 1);
        if (!domain.contains(x)) continue;
        const double t = eps_t + (T - 2.0 * eps_t) * rng.uniform(0);
        const double u = spec.reference(t, x);
        spec.reference_gradient(t, x, grad);

        const double ut = (spec.reference(t + eps_t, x) - spec.reference(t - eps_t, x)) / (2.0 * eps_t);
        for (std::size_t k = 0; k < d; ++k) {
            xp = x;
            xp[k] = x[k] + eps_x;
            const double up = spec.reference(t, xp);
            spec.reference_gradient(t, xp, gp);
            xp[k] = x[k] - eps_x;
            const double um = spec.reference(t, xp);
            spec.reference_gradient(t, xp, gm);
            check.max_gradient_mismatch =
                std::max(check.max_gradient_mismatch, std::abs((up - um) / (2.0 * eps_x) - grad[k]));
            for (std::size_t r = 0; r < d; ++r) hess[r * d + k] = (gp[r] - gm[r]) / (2.0 * eps_x);
        }
        spec.drift(x, b);
        spec.diffusion(x, sigma);
        diffusion_matrix(sigma, d, a);
        double generator = ut;
        for (std::size_t k = 0; k < d; ++k) generator += b[k] * grad[k];
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) generator += 0.5 * a[r * d + c] * hess[r * d + c];
        }
        for (std::size_t k = 0; k < d; ++k) {
            double s = 0.0;
            for (std::size_t r = 0; r < d; ++r) s += grad[r] * sigma[r * d + k];
            z[k] = s;
        }
        const double residual = generator + spec.driver(t, x, u, z);
        check.max_pde_residual = std::max(check.max_pde_residual, std::abs(residual));
        check.max_boundary_mismatch =
            std::max(check.max_boundary_mismatch, std::abs(spec.terminal(T, x) - spec.reference(T, x)));
        ++check.interior_samples;
    }

    for (std::size_t attempt = 0; attempt < max_attempts && check.boundary_samples < samples; ++attempt) {
        const CounterRng rng(seed ^ 0x5bd1e995ULL, attempt, Substream::Validation);
        draw_point(rng, 1);
        const auto& piece = domain.pieces()[attempt % domain.pieces().size()];
        if (!piece.project_to_boundary(x)) continue;
        if (std::abs(domain.signed_distance(x)) > 1e-9) continue;
        const double t = T * rng.uniform(0);
        check.max_boundary_mismatch =
            std::max(check.max_boundary_mismatch, std::abs(spec.terminal(t, x) - spec.reference(t, x)));
        ++check.boundary_samples;
    }
    if (check.interior_samples == 0 || check.boundary_samples == 0) {
        throw Error(ErrorCode::DegenerateSampler, "registration sampler found no interior or boundary points");
    }
    return check;
}

Benchmark benchmark_b1() {
    Benchmark b("b1", "stopped Brownian motion on (-1, 1), g(t, x) = x", one_dim_brownian("b1", 0.0),
                interval(-1.0, 1.0, 2.0, 1.0));
    b.spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    b.validator_lipschitz = 2.0;
    b.sample_lower = {-1.5};
    b.sample_upper = {1.5};
    b.ladder = {8, 16, 32, 64, 128, 256};
    b.n_paths = 100000;
    b.m_fine = 64;
    b.windows = {{"exit_abs_err", "discrete", 0.35, 0.65},
                 {"err2_T", "discrete", 0.35, 0.8},
                 {"err2_stopped", "discrete", 0.7, 1.3},
                 {"r_y_plus_r_z", "discrete", 0.7, 1.3}};
    // Ybar_{i+1} = X_{t_{i+1} ^ tau-bar}: a martingale with E[X_{i+1} dW_i | X_i] = h.
    b.oracle = [](std::size_t, const Grid& grid, std::span<const double> x, int component) {
        return component < 0 ? x[0] : grid.step();
    };
    finish_registration(b);
    return b;
}

Benchmark benchmark_b2() {
    Benchmark b("b2", "heat kernel e^{t/2} sin x on (0, pi)", one_dim_brownian("b2", kPi / 2.0),
                interval(0.0, kPi, 4.0, 1.0));
    const auto u = [](double t, std::span<const double> x) { return std::exp(0.5 * t) * std::sin(x[0]); };
    b.spec.terminal = u;
    b.spec.reference = u;
    b.spec.reference_gradient = [](double t, std::span<const double> x, std::span<double> out) {
        out[0] = std::exp(0.5 * t) * std::cos(x[0]);
    };
    b.validator_lipschitz = 4.0;
    b.sample_lower = {-0.5};
    b.sample_upper = {kPi + 0.5};
    b.ladder = {8, 16, 32, 64, 128};
    b.n_paths = 200000;
    b.m_fine = 64;
    b.windows = {{"r_y_plus_r_z", "discrete", 0.7, 1.3}};
    b.y0_target = 1.0;
    b.y0_tolerance = 0.03;
    finish_registration(b);
    return b;
}

Benchmark benchmark_b3() {
    Benchmark b = benchmark_b2();
    b.name = "b3";
    b.spec.name = "b3";
    b.description = "nonlinear driver sin y - sin u + (z - Du)/2 with solution e^{t/2} sin x on (0, pi)";
    b.spec.driver = [](double t, std::span<const double> x, double y, std::span<const double> z) {
        const double e = std::exp(0.5 * t);
        return (std::sin(y) - std::sin(e * std::sin(x[0]))) + 0.5 * (z[0] - e * std::cos(x[0]));
    };
    b.spec.zero_driver = false;
    b.spec.lipschitz = 1.0;
    b.ladder = {8, 16, 32, 64};
    b.windows = {};
    b.y0_tolerance = 0.05;
    finish_registration(b);
    return b;
}

Benchmark benchmark_b4() {
    Benchmark b("b4", "unit disc, sigma = I - t t^T / 2 with a cut-off tangent field t", ProblemSpec{},
                Domain({SmoothPiece::ball({0.0, 0.0}, 1.0)}, 4.0, 1.0));
    b.spec.name = "b4";
    b.spec.dim = 2;
    b.spec.x0 = {0.5, 0.0};
    b.spec.drift = VectorCoefficient::zero(2);
    b.spec.diffusion = MatrixCoefficient::function(2, [](std::span<const double> x, std::span<double> out) {
        const double r = std::hypot(x[0], x[1]);
        double t0 = 0.0;
        double t1 = 0.0;
        const double chi = smooth_step(r, 0.25, 0.5);
        if (chi > 0.0) {
            t0 = -chi * x[1] / r;
            t1 = chi * x[0] / r;
        }
        out[0] = 1.0 - 0.5 * t0 * t0;
        out[1] = -0.5 * t0 * t1;
        out[2] = -0.5 * t1 * t0;
        out[3] = 1.0 - 0.5 * t1 * t1;
    });
    b.spec.driver = zero_driver();
    b.spec.zero_driver = true;
    b.spec.lipschitz = 1.0;
    b.spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) {
        out[0] = 1.0;
        out[1] = 0.0;
    };
    b.validator_lipschitz = 4.0;
    b.sample_lower = {-1.2, -1.2};
    b.sample_upper = {1.2, 1.2};
    b.ladder = {8, 16, 32, 64, 128};
    b.n_paths = 20000;
    b.m_fine = 64;
    b.windows = {{"exit_abs_err", "discrete", 0.35, 0.65}};
    b.oracle = [](std::size_t, const Grid& grid, std::span<const double> x, int component) {
        if (component < 0) return x[0];
        // E[X^1_{i+1} dW^k] = h sigma_{1k}(x)
        const double r = std::hypot(x[0], x[1]);
        const double chi = smooth_step(r, 0.25, 0.5);
        double t0 = 0.0;
        double t1 = 0.0;
        if (chi > 0.0) {
            t0 = -chi * x[1] / r;
            t1 = chi * x[0] / r;
        }
        const double s = component == 0 ? 1.0 - 0.5 * t0 * t0 : -0.5 * t0 * t1;
        return grid.step() * s;
    };
    // A failed residual check leaves only the validator and exit-rate checks.
    b.registration = check_registration(b.spec, b.domain, b.sample_lower, b.sample_upper);
    if (b.registration.passed()) {
        b.y0_target = b.spec.x0[0];
        b.y0_tolerance = 0.03;
    } else {
        b.spec.reference = nullptr;
        b.spec.reference_gradient = nullptr;
        b.oracle = nullptr;
        b.y0_target.reset();
    }
    return b;
}

Benchmark benchmark_decay() {
    Benchmark b("decay", "f = -y, g = 1 in a disc too large to leave", one_dim_brownian("decay", 0.0),
                Domain({SmoothPiece::ball({0.0}, 1.0e3)}, 1.0, 1.0));
    b.spec.driver = [](double, std::span<const double>, double y, std::span<const double>) { return -y; };
    b.spec.zero_driver = false;
    b.spec.lipschitz = 1.0;
    b.spec.terminal = [](double, std::span<const double>) { return 1.0; };
    b.validator_lipschitz = 1.0;
    b.sample_lower = {-1.0};
    b.sample_upper = {1.0};
    b.ladder = {64};
    b.n_paths = 1000;
    b.m_fine = 16;
    // Ybar_{i+1} = (1 + h)^{-(n - i - 1)} on every path; Zbar = 0.
    b.oracle = [](std::size_t step, const Grid& grid, std::span<const double>, int component) {
        if (component >= 0) return 0.0;
        return std::pow(1.0 + grid.step(), -static_cast<double>(grid.steps() - step - 1));
    };
    b.y0_target = std::pow(1.0 + 1.0 / 64.0, -64.0);
    b.y0_tolerance = 1e-10;
    return b;
}

Benchmark benchmark_square() {
    Benchmark b("square", "Brownian motion in the unit square, g(t, x) = x^1", ProblemSpec{},
                Domain({SmoothPiece::half_space({1.0, 0.0}, 0.0), SmoothPiece::half_space({-1.0, 0.0}, -1.0),
                        SmoothPiece::half_space({0.0, 1.0}, 0.0), SmoothPiece::half_space({0.0, -1.0}, -1.0)},
                       4.0, 1.0));
    b.spec.name = "square";
    b.spec.dim = 2;
    b.spec.x0 = {0.5, 0.5};
    b.spec.drift = VectorCoefficient::zero(2);
    b.spec.diffusion = MatrixCoefficient::identity(2);
    b.spec.driver = zero_driver();
    b.spec.zero_driver = true;
    b.spec.lipschitz = 1.0;
    b.spec.terminal = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference = [](double, std::span<const double> x) { return x[0]; };
    b.spec.reference_gradient = [](double, std::span<const double>, std::span<double> out) {
        out[0] = 1.0;
        out[1] = 0.0;
    };
    b.validator_lipschitz = 4.0;
    b.sample_lower = {-0.25, -0.25};
    b.sample_upper = {1.25, 1.25};
    b.ladder = {8, 16, 32, 64, 128};
    b.n_paths = 20000;
    b.m_fine = 64;
    b.windows = {{"exit_abs_err", "discrete", 0.35, 0.65}};
    b.oracle = [](std::size_t, const Grid& grid, std::span<const double> x, int component) {
        if (component < 0) return x[0];
        return component == 0 ? grid.step() : 0.0;
    };
    finish_registration(b);
    return b;
}

std::vector<std::string> benchmark_names() { return {"b1", "b2", "b3", "b4", "square", "decay"}; }

Benchmark make_benchmark(const std::string& name) {
    if (name == "b1") return benchmark_b1();
    if (name == "b2") return benchmark_b2();
    if (name == "b3") return benchmark_b3();
    if (name == "b4") return benchmark_b4();
    if (name == "square") return benchmark_square();
    if (name == "decay") return benchmark_decay();
    throw Error(ErrorCode::InvalidArgument, "unknown benchmark '" + name + "'");
}

}  // namespace exitbsde
