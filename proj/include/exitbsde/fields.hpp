#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "exitbsde/error.hpp"

namespace exitbsde {

using Point = std::vector<double>;

/// x -> R^d, written into `out`.
using VectorFn = std::function<void(std::span<const double> x, std::span<double> out)>;
/// x -> R^{d x d}, row-major, written into `out`.
using MatrixFn = std::function<void(std::span<const double> x, std::span<double> out)>;

/// State-dependent vector coefficient with a constant fast path.
class VectorCoefficient {
public:
    VectorCoefficient() = default;

    static VectorCoefficient constant(std::vector<double> value) {
        VectorCoefficient c;
        c.dim_ = value.size();
        c.value_ = std::move(value);
        return c;
    }

    static VectorCoefficient zero(std::size_t dim) { return constant(std::vector<double>(dim, 0.0)); }

    static VectorCoefficient function(std::size_t dim, VectorFn fn) {
        require(static_cast<bool>(fn), ErrorCode::InvalidArgument, "empty vector coefficient");
        VectorCoefficient c;
        c.dim_ = dim;
        c.fn_ = std::move(fn);
        return c;
    }

    std::size_t dim() const noexcept { return dim_; }
    bool is_constant() const noexcept { return !fn_; }
    const std::vector<double>& constant_value() const noexcept { return value_; }

    void operator()(std::span<const double> x, std::span<double> out) const {
        if (fn_) {
            fn_(x, out);
        } else {
            for (std::size_t k = 0; k < dim_; ++k) out[k] = value_[k];
        }
    }

private:
    std::size_t dim_ = 0;
    std::vector<double> value_;
    VectorFn fn_;
};

/// State-dependent square matrix coefficient (row-major) with a constant fast path.
class MatrixCoefficient {
public:
    MatrixCoefficient() = default;

    static MatrixCoefficient constant(std::size_t dim, std::vector<double> row_major) {
        require(row_major.size() == dim * dim, ErrorCode::InvalidArgument,
                "matrix coefficient needs dim*dim entries");
        MatrixCoefficient c;
        c.dim_ = dim;
        c.value_ = std::move(row_major);
        return c;
    }

    static MatrixCoefficient identity(std::size_t dim, double scale = 1.0) {
        std::vector<double> m(dim * dim, 0.0);
        for (std::size_t k = 0; k < dim; ++k) m[k * dim + k] = scale;
        return constant(dim, std::move(m));
    }

    static MatrixCoefficient function(std::size_t dim, MatrixFn fn) {
        require(static_cast<bool>(fn), ErrorCode::InvalidArgument, "empty matrix coefficient");
        MatrixCoefficient c;
        c.dim_ = dim;
        c.fn_ = std::move(fn);
        return c;
    }

    std::size_t dim() const noexcept { return dim_; }
    bool is_constant() const noexcept { return !fn_; }
    const std::vector<double>& constant_value() const noexcept { return value_; }

    void operator()(std::span<const double> x, std::span<double> out) const {
        if (fn_) {
            fn_(x, out);
        } else {
            for (std::size_t k = 0; k < dim_ * dim_; ++k) out[k] = value_[k];
        }
    }

private:
    std::size_t dim_ = 0;
    std::vector<double> value_;
    MatrixFn fn_;
};

/// a = sigma sigma^T for a row-major sigma.
inline void diffusion_matrix(std::span<const double> sigma, std::size_t dim, std::span<double> a) {
    for (std::size_t r = 0; r < dim; ++r) {
        for (std::size_t c = 0; c < dim; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += sigma[r * dim + k] * sigma[c * dim + k];
            a[r * dim + c] = s;
        }
    }
}

/// v^T a v for a row-major a.
inline double quadratic_form(std::span<const double> a, std::span<const double> v, std::size_t dim) {
    double s = 0.0;
    for (std::size_t r = 0; r < dim; ++r) {
        for (std::size_t c = 0; c < dim; ++c) s += v[r] * a[r * dim + c] * v[c];
    }
    return s;
}

}  // namespace exitbsde
