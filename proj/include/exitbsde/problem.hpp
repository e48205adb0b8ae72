#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "exitbsde/fields.hpp"

namespace exitbsde {

/// f(t, x, y, z); z is the d-dimensional row vector.
using DriverFn = std::function<double(double t, std::span<const double> x, double y, std::span<const double> z)>;
/// g(t, x) and reference u(t, x).
using ScalarFieldFn = std::function<double(double t, std::span<const double> x)>;
/// Du(t, x) written into `out` (length d).
using GradientFieldFn = std::function<void(double t, std::span<const double> x, std::span<double> out)>;

/// Uniform time grid t_i = i h, h = T / n.
class Grid {
public:
    Grid(std::size_t steps, double horizon);

    std::size_t steps() const noexcept { return steps_; }
    double horizon() const noexcept { return horizon_; }
    double step() const noexcept { return step_; }
    /// t_i; t_n is exactly the horizon.
    double time(std::size_t i) const noexcept {
        return i == steps_ ? horizon_ : static_cast<double>(i) * step_;
    }
    /// Grid with `factor` times as many steps over the same horizon.
    Grid refined(std::size_t factor) const { return Grid(steps_ * factor, horizon_); }

private:
    std::size_t steps_;
    double horizon_;
    double step_;
};

/// Decoupled forward-backward system: dX = b(X)dt + sigma(X)dW, driver f,
/// boundary/terminal data g, optional closed-form reference u and Du.
struct ProblemSpec {
    std::string name;
    std::size_t dim = 1;
    Point x0;
    VectorCoefficient drift;
    MatrixCoefficient diffusion;
    DriverFn driver;
    /// Declared to be f == 0; lets the backward sweep skip Picard work.
    bool zero_driver = false;
    ScalarFieldFn terminal;
    ScalarFieldFn reference;
    GradientFieldFn reference_gradient;
    double lipschitz = 1.0;

    bool has_reference() const noexcept { return static_cast<bool>(reference) && static_cast<bool>(reference_gradient); }

    /// Checks dimensions and that the mandatory callables are present.
    void validate() const;
};

/// f == 0.
DriverFn zero_driver();

}  // namespace exitbsde
