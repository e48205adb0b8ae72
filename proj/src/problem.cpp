#include "exitbsde/problem.hpp"

#include <cmath>

namespace exitbsde {

Grid::Grid(std::size_t steps, double horizon) : steps_(steps), horizon_(horizon) {
    require(steps >= 1, ErrorCode::InvalidArgument, "grid needs at least one step");
    require(horizon > 0.0 && std::isfinite(horizon), ErrorCode::InvalidArgument, "grid horizon must be positive");
    step_ = horizon / static_cast<double>(steps);
}

void ProblemSpec::validate() const {
    require(dim >= 1, ErrorCode::InvalidArgument, "problem dimension must be >= 1");
    require(x0.size() == dim, ErrorCode::InvalidArgument, "x0 dimension mismatch");
    require(drift.dim() == dim, ErrorCode::InvalidArgument, "drift dimension mismatch");
    require(diffusion.dim() == dim, ErrorCode::InvalidArgument, "diffusion dimension mismatch");
    require(static_cast<bool>(driver), ErrorCode::InvalidArgument, "driver is required");
    require(static_cast<bool>(terminal), ErrorCode::InvalidArgument, "terminal function g is required");
    require(lipschitz > 0.0 && std::isfinite(lipschitz), ErrorCode::InvalidArgument, "Lipschitz constant must be positive");
}

DriverFn zero_driver() {
    return [](double, std::span<const double>, double, std::span<const double>) { return 0.0; };
}

}  // namespace exitbsde
