#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "exitbsde/fields.hpp"

namespace exitbsde {

enum class BasisKind { Hypercube, Polynomial };

/// Least-squares basis for conditional expectations.
///
/// Hypercube: local constants on a regular grid of cells over a bounding box;
/// `cells_per_axis == 0` selects ceil(N^{1/(d+2)}) at fit time and an empty
/// box selects the per-axis min/max of the predictors.
/// Polynomial: all monomials of total degree <= `degree` in the predictors
/// rescaled to [-1, 1] over the bounding box.
struct BasisSpec {
    BasisKind kind = BasisKind::Hypercube;
    std::vector<double> lower;
    std::vector<double> upper;
    std::size_t cells_per_axis = 0;
    unsigned degree = 1;
    double ridge = 0.0;

    static BasisSpec hypercube(std::size_t cells_per_axis = 0, double ridge = 0.0) {
        BasisSpec b;
        b.kind = BasisKind::Hypercube;
        b.cells_per_axis = cells_per_axis;
        b.ridge = ridge;
        return b;
    }
    static BasisSpec polynomial(unsigned degree, double ridge = 0.0) {
        BasisSpec b;
        b.kind = BasisKind::Polynomial;
        b.degree = degree;
        b.ridge = ridge;
        return b;
    }
};

/// Fitted model. Immutable after fit; predict is total (hypercube points
/// outside the box clamp to the nearest cell, polynomials extrapolate).
class RegressionModel {
public:
    double predict(std::span<const double> x) const;

    /// Resolved basis (box and cell count filled in).
    const BasisSpec& basis() const noexcept { return basis_; }
    const std::vector<double>& coefficients() const noexcept { return coefficients_; }
    double fallback() const noexcept { return fallback_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t basis_size() const noexcept { return coefficients_.size(); }

    /// Values of every basis function at x.
    void basis_values(std::span<const double> x, std::span<double> out) const;
    /// Flat hypercube cell index of x (clamped).
    std::size_t cell_of(std::span<const double> x) const;

private:
    friend RegressionModel fit(std::span<const double>, std::span<const double>, std::size_t, const BasisSpec&);

    BasisSpec basis_;
    std::size_t dim_ = 0;
    std::vector<double> coefficients_;
    std::vector<std::uint8_t> populated_;
    std::vector<std::vector<unsigned>> exponents_;
    double fallback_ = 0.0;
};

/// Ridge least squares of `responses` on the basis evaluated at `predictors`
/// (row-major, dim values per sample). With ridge == 0 a rank-deficient
/// polynomial system gets the minimum-norm solution; local constants then
/// reproduce per-cell sample means and empty cells predict the global mean.
RegressionModel fit(std::span<const double> predictors, std::span<const double> responses, std::size_t dim,
                    const BasisSpec& basis);

/// Monomial exponent vectors of total degree <= degree in dim variables, graded order.
std::vector<std::vector<unsigned>> monomial_exponents(std::size_t dim, unsigned degree);

}  // namespace exitbsde
