#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exitbsde/bsde.hpp"
#include "exitbsde/geometry.hpp"
#include "exitbsde/problem.hpp"

namespace exitbsde {

/// Expected log-log slope of a report metric over the ladder.
struct SlopeWindow {
    std::string metric;
    std::string exit_mode = "discrete";
    double lower = 0.0;
    double upper = 0.0;
};

/// Finite-difference check that the reference u solves
///   d_t u + b.Du + 1/2 Tr(a D^2 u) + f(t, x, u, Du sigma) = 0 inside O
/// and that g = u on the parabolic boundary.
struct RegistrationCheck {
    std::size_t interior_samples = 0;
    std::size_t boundary_samples = 0;
    double max_pde_residual = 0.0;
    double max_gradient_mismatch = 0.0;
    double max_boundary_mismatch = 0.0;
    double pde_tolerance = 1e-6;
    double boundary_tolerance = 1e-9;

    bool passed() const noexcept {
        return max_pde_residual <= pde_tolerance && max_gradient_mismatch <= pde_tolerance &&
               max_boundary_mismatch <= boundary_tolerance;
    }
};

struct Benchmark {
    Benchmark(std::string name_, std::string description_, ProblemSpec spec_, Domain domain_)
        : name(std::move(name_)), description(std::move(description_)), spec(std::move(spec_)),
          domain(std::move(domain_)) {}

    std::string name;
    std::string description;
    ProblemSpec spec;
    Domain domain;
    /// Constant used by the assumption validator.
    double validator_lipschitz = 1.0;
    /// Box used to sample interior points for the registration check.
    Point sample_lower;
    Point sample_upper;
    std::vector<std::size_t> ladder;
    std::size_t n_paths = 0;
    std::size_t m_fine = 64;
    std::vector<SlopeWindow> windows;
    /// Closed-form conditional expectations for the analytic engine.
    OracleFn oracle;
    /// Target for Ybar_0 and its tolerance.
    std::optional<double> y0_target;
    double y0_tolerance = 0.0;
    RegistrationCheck registration;
};

/// Runs the registration check on `samples` interior and boundary points.
RegistrationCheck check_registration(const ProblemSpec& spec, const Domain& domain, const Point& lower,
                                     const Point& upper, std::size_t samples = 200, std::uint64_t seed = 7);

/// Stopped Brownian motion on (-1, 1) with g(t, x) = x, so Y = X stopped at the exit.
Benchmark benchmark_b1();
/// Heat kernel u = e^{t/2} sin x on (0, pi).
Benchmark benchmark_b2();
/// Same dynamics as b2 with a nonlinear driver vanishing along u.
Benchmark benchmark_b3();
/// Unit disc with sigma = I - 1/2 t t^T, t a cut-off tangent field.
Benchmark benchmark_b4();
/// Unit square as four half-spaces, sigma = I, g(t, x) = x^1: corners without a closed-form exit law.
Benchmark benchmark_square();
/// f = -y, g = 1, no exits in practice: Ybar_0 = (1 + h)^{-n}.
Benchmark benchmark_decay();

std::vector<std::string> benchmark_names();
/// Throws InvalidArgument for unknown names.
Benchmark make_benchmark(const std::string& name);

}  // namespace exitbsde
