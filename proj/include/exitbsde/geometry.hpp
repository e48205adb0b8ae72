#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "exitbsde/fields.hpp"

namespace exitbsde {

enum class PieceKind { Ball, HalfSpace, Ellipsoid, User };

/// One smooth domain O^l = {d_l > 0} described by its signed distance d_l
/// (positive inside), gradient n_l = Dd_l and Hessian D^2 d_l.
class SmoothPiece {
public:
    using DistanceFn = std::function<double(std::span<const double>)>;
    using GradientFn = std::function<void(std::span<const double>, std::span<double>)>;
    using HessianFn = std::function<void(std::span<const double>, std::span<double>)>;

    /// Interior of the ball, or its complement when `complement` is set.
    static SmoothPiece ball(Point center, double radius, bool complement = false);
    /// {x : <normal, x> > offset}; `normal` is normalized on construction.
    static SmoothPiece half_space(Point normal, double offset);
    /// Interior of the axis-aligned ellipsoid sum_k ((x_k - c_k)/a_k)^2 < 1.
    static SmoothPiece ellipsoid(Point center, Point semi_axes);
    /// All three evaluators are mandatory.
    static SmoothPiece user(std::size_t dim, DistanceFn distance, GradientFn gradient,
                            HessianFn hessian, std::string label = "user");

    PieceKind kind() const noexcept { return kind_; }
    std::size_t dim() const noexcept { return dim_; }
    bool is_analytic() const noexcept { return kind_ != PieceKind::User; }

    double distance(std::span<const double> x) const;
    void gradient(std::span<const double> x, std::span<double> out) const;
    /// Row-major d x d.
    void hessian(std::span<const double> x, std::span<double> out) const;

    /// Damped Newton projection onto {d_l = 0}. Returns false when the
    /// iteration cap is hit before |d_l| <= tol.
    bool project_to_boundary(std::span<double> x, int max_iter = 50, double tol = 1e-10) const;

    const Point& center() const noexcept { return center_; }
    double radius() const noexcept { return radius_; }
    bool complement() const noexcept { return complement_; }
    const Point& normal() const noexcept { return normal_; }
    double offset() const noexcept { return offset_; }
    const Point& semi_axes() const noexcept { return semi_axes_; }
    const std::string& label() const noexcept { return label_; }

private:
    SmoothPiece() = default;

    /// Closest point on the ellipsoid surface to x.
    void ellipsoid_closest_point(std::span<const double> x, std::span<double> y) const;

    PieceKind kind_ = PieceKind::User;
    std::size_t dim_ = 0;
    Point center_;
    double radius_ = 0.0;
    bool complement_ = false;
    Point normal_;
    double offset_ = 0.0;
    Point semi_axes_;
    std::string label_;
    DistanceFn user_distance_;
    GradientFn user_gradient_;
    HessianFn user_hessian_;
};

/// Spatial part O = intersection of pieces of the cylinder [0, T) x O.
/// Distance queries are meaningful inside the tube of radius 1/L around the
/// boundary; deep inside O the min over pieces is only a lower envelope.
class Domain {
public:
    Domain(std::vector<SmoothPiece> pieces, double lipschitz, double horizon);

    std::size_t dim() const noexcept { return dim_; }
    const std::vector<SmoothPiece>& pieces() const noexcept { return pieces_; }
    double lipschitz() const noexcept { return lipschitz_; }
    double corner_radius() const noexcept { return 1.0 / lipschitz_; }
    double horizon() const noexcept { return horizon_; }

    /// min_l d_l(x).
    double signed_distance(std::span<const double> x) const;
    /// d_l(x) > 0 for every piece.
    bool contains(std::span<const double> x) const;
    /// Index of the piece attaining min_l d_l(x) (lowest index on ties).
    std::size_t active_piece(std::span<const double> x) const;
    /// n_{l*}(x) for the unique minimizing piece; throws AmbiguousNormal when
    /// two pieces tie within `tie_tolerance`.
    Point inward_normal(std::span<const double> x, double tie_tolerance = 1e-12) const;
    /// Declared corner neighbourhood: some piece other than the active one is
    /// within corner_radius() of x.
    bool in_corner_neighborhood(std::span<const double> x) const;

private:
    std::vector<SmoothPiece> pieces_;
    std::size_t dim_ = 0;
    double lipschitz_ = 1.0;
    double horizon_ = 1.0;
};

struct ValidationOptions {
    std::size_t n_samples = 1000;
    std::uint64_t seed = 1;
    /// Tube half-width for the barrier check; 0 selects 1/(2L).
    double tube_radius = 0.0;
    /// Offsets per boundary sample used to fill the tube.
    std::size_t tube_offsets = 8;
    /// Random directions per boundary sample for the exterior-sphere check.
    std::size_t sphere_directions = 24;
};

/// Barrier check for one piece: q(x) = (2<b,n> + Tr(a D^2 d)) d + n a n^T,
/// so L F = q / gamma with F = d^2 / gamma.
struct BarrierCheck {
    std::size_t piece = 0;
    std::size_t samples = 0;
    double min_q = 0.0;
    double gamma = 0.0;       ///< largest 2^-k / L with min q / gamma >= 1, 0 on failure
    double min_lf = 0.0;      ///< min q / gamma over the tube (at the chosen gamma)
    double min_normal_variance = 0.0;
    bool passed = false;
};

struct ValidationReport {
    double threshold = 0.0;  ///< 1/L
    std::size_t attempts = 0;
    std::size_t projection_failures = 0;
    std::size_t boundary_samples = 0;
    std::size_t corner_samples = 0;

    // (i) non-characteristic boundary
    double min_normal_variance = 0.0;
    bool normal_check_passed = true;
    // (ii) ellipticity near corners
    std::size_t corner_ellipticity_samples = 0;
    double min_corner_eigenvalue = 0.0;
    bool corner_check_passed = true;
    // (iii) barrier test functions
    std::vector<BarrierCheck> barrier;
    // (iv) exterior sphere of radius 1/L
    std::size_t exterior_samples = 0;
    double max_exterior_violation = 0.0;
    bool exterior_check_passed = true;

    bool passed() const;
    /// Fixed-width pass/fail table.
    std::string table() const;
};

/// Samples boundary points of O and checks the non-characteristic,
/// corner-ellipticity, barrier and exterior-sphere conditions numerically.
ValidationReport validate_assumptions(const Domain& domain, const MatrixCoefficient& sigma, double lipschitz,
                                      const ValidationOptions& options = {},
                                      const VectorCoefficient* drift = nullptr);

/// q(x) from BarrierCheck for piece `piece` at x.
double barrier_generator(const Domain& domain, std::size_t piece, const MatrixCoefficient& sigma,
                         const VectorCoefficient* drift, std::span<const double> x);

}  // namespace exitbsde
