#include "exitbsde/regression.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace exitbsde {

std::vector<std::vector<unsigned>> monomial_exponents(std::size_t dim, unsigned degree) {
    std::vector<std::vector<unsigned>> out;
    // Graded: all exponents of total degree 0, then 1, ...
    for (unsigned total = 0; total <= degree; ++total) {
        // Enumerate compositions of `total` into `dim` parts.
        std::vector<unsigned> e(dim, 0);
        const auto recurse = [&](auto&& self, std::size_t k, unsigned left) -> void {
            if (k + 1 == dim) {
                e[k] = left;
                out.push_back(e);
                return;
            }
            for (unsigned v = left + 1; v-- > 0;) {
                e[k] = v;
                self(self, k + 1, left - v);
            }
        };
        recurse(recurse, 0, total);
    }
    return out;
}

std::size_t RegressionModel::cell_of(std::span<const double> x) const {
    const std::size_t cells = basis_.cells_per_axis;
    std::size_t index = 0;
    for (std::size_t k = 0; k < dim_; ++k) {
        const double width = basis_.upper[k] - basis_.lower[k];
        std::size_t c = 0;
        if (width > 0.0) {
            const double r = (x[k] - basis_.lower[k]) / width * static_cast<double>(cells);
            if (r >= static_cast<double>(cells)) {
                c = cells - 1;
            } else if (r > 0.0) {
                c = static_cast<std::size_t>(r);
            }
        }
        index = index * cells + c;
    }
    return index;
}

void RegressionModel::basis_values(std::span<const double> x, std::span<double> out) const {
    if (basis_.kind == BasisKind::Hypercube) {
        std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(coefficients_.size()), 0.0);
        out[cell_of(x)] = 1.0;
        return;
    }
    std::vector<double> z(dim_);
    for (std::size_t k = 0; k < dim_; ++k) {
        const double width = basis_.upper[k] - basis_.lower[k];
        z[k] = width > 0.0 ? 2.0 * (x[k] - basis_.lower[k]) / width - 1.0 : 0.0;
    }
    for (std::size_t j = 0; j < exponents_.size(); ++j) {
        double v = 1.0;
        for (std::size_t k = 0; k < dim_; ++k) {
            for (unsigned e = 0; e < exponents_[j][k]; ++e) v *= z[k];
        }
        out[j] = v;
    }
}

double RegressionModel::predict(std::span<const double> x) const {
    if (basis_.kind == BasisKind::Hypercube) {
        const std::size_t c = cell_of(x);
        return populated_[c] ? coefficients_[c] : fallback_;
    }
    std::vector<double> phi(coefficients_.size());
    basis_values(x, phi);
    double s = 0.0;
    for (std::size_t j = 0; j < phi.size(); ++j) s += phi[j] * coefficients_[j];
    return s;
}

RegressionModel fit(std::span<const double> predictors, std::span<const double> responses, std::size_t dim,
                    const BasisSpec& basis) {
    require(dim >= 1, ErrorCode::InvalidArgument, "regression dimension must be >= 1");
    const std::size_t count = responses.size();
    if (count == 0) throw Error(ErrorCode::EmptySample, "regression on an empty sample");
    require(predictors.size() == count * dim, ErrorCode::InvalidArgument,
            "predictors and responses have different lengths");
    require(basis.ridge >= 0.0, ErrorCode::InvalidArgument, "ridge must be >= 0");

    RegressionModel model;
    model.dim_ = dim;
    model.basis_ = basis;
    auto& b = model.basis_;
    if (b.lower.empty() || b.upper.empty()) {
        b.lower.assign(dim, 0.0);
        b.upper.assign(dim, 0.0);
        for (std::size_t k = 0; k < dim; ++k) {
            double lo = predictors[k];
            double hi = predictors[k];
            for (std::size_t s = 1; s < count; ++s) {
                lo = std::min(lo, predictors[s * dim + k]);
                hi = std::max(hi, predictors[s * dim + k]);
            }
            b.lower[k] = lo;
            b.upper[k] = hi;
        }
    }
    require(b.lower.size() == dim && b.upper.size() == dim, ErrorCode::InvalidArgument, "bounding box dimension mismatch");

    double mean = 0.0;
    for (double r : responses) mean += r;
    mean /= static_cast<double>(count);
    model.fallback_ = mean;

    if (b.kind == BasisKind::Hypercube) {
        if (b.cells_per_axis == 0) {
            b.cells_per_axis = static_cast<std::size_t>(
                std::ceil(std::pow(static_cast<double>(count), 1.0 / static_cast<double>(dim + 2))));
        }
        b.cells_per_axis = std::max<std::size_t>(1, b.cells_per_axis);
        std::size_t total = 1;
        for (std::size_t k = 0; k < dim; ++k) total *= b.cells_per_axis;
        std::vector<double> sums(total, 0.0), counts(total, 0.0);
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t c = model.cell_of(predictors.subspan(s * dim, dim));
            sums[c] += responses[s];
            counts[c] += 1.0;
        }
        model.coefficients_.assign(total, 0.0);
        model.populated_.assign(total, 0);
        for (std::size_t c = 0; c < total; ++c) {
            if (counts[c] > 0.0) {
                model.coefficients_[c] = sums[c] / (counts[c] + b.ridge);
                model.populated_[c] = 1;
            }
        }
        return model;
    }

    model.exponents_ = monomial_exponents(dim, b.degree);
    const auto P = static_cast<Eigen::Index>(model.exponents_.size());
    Eigen::MatrixXd phi(static_cast<Eigen::Index>(count), P);
    std::vector<double> row(static_cast<std::size_t>(P));
    model.coefficients_.assign(static_cast<std::size_t>(P), 0.0);
    for (std::size_t s = 0; s < count; ++s) {
        model.basis_values(predictors.subspan(s * dim, dim), row);
        for (Eigen::Index j = 0; j < P; ++j) phi(static_cast<Eigen::Index>(s), j) = row[static_cast<std::size_t>(j)];
    }
    const Eigen::Map<const Eigen::VectorXd> y(responses.data(), static_cast<Eigen::Index>(count));
    Eigen::VectorXd coef;
    if (b.ridge > 0.0) {
        Eigen::MatrixXd gram = phi.transpose() * phi;
        gram.diagonal().array() += b.ridge;
        coef = gram.ldlt().solve(phi.transpose() * y);
    } else {
        coef = phi.completeOrthogonalDecomposition().solve(y);
    }
    model.coefficients_.assign(coef.data(), coef.data() + coef.size());
    model.populated_.clear();
    return model;
}

}  // namespace exitbsde
