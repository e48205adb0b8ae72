#include "exitbsde/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "exitbsde/rng.hpp"

namespace exitbsde {

namespace {

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

SmoothPiece SmoothPiece::ball(Point center, double radius, bool complement) {
    require(!center.empty(), ErrorCode::InvalidArgument, "ball center must be non-empty");
    require(radius > 0.0 && std::isfinite(radius), ErrorCode::InvalidArgument, "ball radius must be positive");
    SmoothPiece p;
    p.kind_ = PieceKind::Ball;
    p.dim_ = center.size();
    p.center_ = std::move(center);
    p.radius_ = radius;
    p.complement_ = complement;
    p.label_ = complement ? "ball-complement" : "ball";
    return p;
}

SmoothPiece SmoothPiece::half_space(Point normal, double offset) {
    require(!normal.empty(), ErrorCode::InvalidArgument, "half-space normal must be non-empty");
    const double len = norm(normal);
    require(len > 0.0 && std::isfinite(len), ErrorCode::InvalidArgument, "half-space normal must be nonzero");
    SmoothPiece p;
    p.kind_ = PieceKind::HalfSpace;
    p.dim_ = normal.size();
    for (double& v : normal) v /= len;
    p.normal_ = std::move(normal);
    p.offset_ = offset / len;
    p.label_ = "half-space";
    return p;
}

SmoothPiece SmoothPiece::ellipsoid(Point center, Point semi_axes) {
    require(!center.empty() && center.size() == semi_axes.size(), ErrorCode::InvalidArgument,
            "ellipsoid center and semi-axes must have equal nonzero length");
    for (double a : semi_axes) {
        require(a > 0.0 && std::isfinite(a), ErrorCode::InvalidArgument, "ellipsoid semi-axes must be positive");
    }
    SmoothPiece p;
    p.kind_ = PieceKind::Ellipsoid;
    p.dim_ = center.size();
    p.center_ = std::move(center);
    p.semi_axes_ = std::move(semi_axes);
    p.label_ = "ellipsoid";
    return p;
}

SmoothPiece SmoothPiece::user(std::size_t dim, DistanceFn distance, GradientFn gradient, HessianFn hessian,
                              std::string label) {
    require(dim > 0, ErrorCode::InvalidArgument, "user piece dimension must be positive");
    require(distance && gradient && hessian, ErrorCode::InvalidArgument,
            "user piece must provide distance, gradient and Hessian");
    SmoothPiece p;
    p.kind_ = PieceKind::User;
    p.dim_ = dim;
    p.user_distance_ = std::move(distance);
    p.user_gradient_ = std::move(gradient);
    p.user_hessian_ = std::move(hessian);
    p.label_ = std::move(label);
    return p;
}

void SmoothPiece::ellipsoid_closest_point(std::span<const double> x, std::span<double> y) const {
    const std::size_t d = dim_;
    std::vector<double> p(d);
    for (std::size_t k = 0; k < d; ++k) p[k] = x[k] - center_[k];

    // y_k = a_k^2 p_k / (a_k^2 + t) with t the root of
    // F(t) = sum_k (a_k p_k / (a_k^2 + t))^2 - 1, decreasing on (-a_min^2, inf).
    const auto F = [&](double t) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double a2 = semi_axes_[k] * semi_axes_[k];
            const double r = semi_axes_[k] * p[k] / (a2 + t);
            s += r * r;
        }
        return s - 1.0;
    };
    const auto dF = [&](double t) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double a2 = semi_axes_[k] * semi_axes_[k];
            const double den = a2 + t;
            s += -2.0 * a2 * p[k] * p[k] / (den * den * den);
        }
        return s;
    };

    double a_min = semi_axes_[0];
    double a_max = semi_axes_[0];
    for (double a : semi_axes_) {
        a_min = std::min(a_min, a);
        a_max = std::max(a_max, a);
    }
    const double lo0 = -a_min * a_min;
    const double pnorm = norm(p);
    double hi = a_max * pnorm;
    double lo = lo0 * (1.0 - 1e-15);

    if (!(F(lo) > 0.0)) {
        // Medial-axis case: components along the shortest axes are free.
        double used = 0.0;
        std::size_t free_axis = d;
        for (std::size_t k = 0; k < d; ++k) {
            const double a2 = semi_axes_[k] * semi_axes_[k];
            if (a2 - a_min * a_min <= 1e-14 * a2) {
                y[k] = 0.0;
                if (free_axis == d) free_axis = k;
            } else {
                y[k] = a2 * p[k] / (a2 + lo0);
                used += (y[k] / semi_axes_[k]) * (y[k] / semi_axes_[k]);
            }
        }
        y[free_axis] = a_min * std::sqrt(std::max(0.0, 1.0 - used));
        for (std::size_t k = 0; k < d; ++k) y[k] += center_[k];
        return;
    }

    double t = std::max(0.0, std::min(hi, 0.0));
    for (int iter = 0; iter < 200; ++iter) {
        const double f = F(t);
        if (f > 0.0) lo = t; else hi = t;
        if (std::abs(f) < 1e-15 || hi - lo <= 1e-15 * (1.0 + std::abs(t))) break;
        const double g = dF(t);
        double next = (g != 0.0) ? t - f / g : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        t = next;
    }
    for (std::size_t k = 0; k < d; ++k) {
        const double a2 = semi_axes_[k] * semi_axes_[k];
        y[k] = center_[k] + a2 * p[k] / (a2 + t);
    }
}

double SmoothPiece::distance(std::span<const double> x) const {
    switch (kind_) {
        case PieceKind::Ball: {
            double s = 0.0;
            for (std::size_t k = 0; k < dim_; ++k) {
                const double v = x[k] - center_[k];
                s += v * v;
            }
            const double rho = std::sqrt(s);
            return complement_ ? rho - radius_ : radius_ - rho;
        }
        case PieceKind::HalfSpace: {
            double s = -offset_;
            for (std::size_t k = 0; k < dim_; ++k) s += normal_[k] * x[k];
            return s;
        }
        case PieceKind::Ellipsoid: {
            std::vector<double> y(dim_);
            ellipsoid_closest_point(x, y);
            double s = 0.0;
            double level = 0.0;
            for (std::size_t k = 0; k < dim_; ++k) {
                s += (x[k] - y[k]) * (x[k] - y[k]);
                const double r = (x[k] - center_[k]) / semi_axes_[k];
                level += r * r;
            }
            const double dist = std::sqrt(s);
            return level < 1.0 ? dist : -dist;
        }
        case PieceKind::User:
            return user_distance_(x);
    }
    return 0.0;
}

void SmoothPiece::gradient(std::span<const double> x, std::span<double> out) const {
    switch (kind_) {
        case PieceKind::Ball: {
            double s = 0.0;
            for (std::size_t k = 0; k < dim_; ++k) s += (x[k] - center_[k]) * (x[k] - center_[k]);
            const double rho = std::sqrt(s);
            const double sign = complement_ ? 1.0 : -1.0;
            for (std::size_t k = 0; k < dim_; ++k) out[k] = rho > 0.0 ? sign * (x[k] - center_[k]) / rho : 0.0;
            return;
        }
        case PieceKind::HalfSpace:
            for (std::size_t k = 0; k < dim_; ++k) out[k] = normal_[k];
            return;
        case PieceKind::Ellipsoid: {
            std::vector<double> y(dim_);
            ellipsoid_closest_point(x, y);
            double s = 0.0;
            for (std::size_t k = 0; k < dim_; ++k) {
                out[k] = -(y[k] - center_[k]) / (semi_axes_[k] * semi_axes_[k]);
                s += out[k] * out[k];
            }
            const double len = std::sqrt(s);
            for (std::size_t k = 0; k < dim_; ++k) out[k] = len > 0.0 ? out[k] / len : 0.0;
            return;
        }
        case PieceKind::User:
            user_gradient_(x, out);
            return;
    }
}

void SmoothPiece::hessian(std::span<const double> x, std::span<double> out) const {
    const std::size_t d = dim_;
    switch (kind_) {
        case PieceKind::Ball: {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += (x[k] - center_[k]) * (x[k] - center_[k]);
            const double rho = std::sqrt(s);
            const double sign = complement_ ? 1.0 : -1.0;
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    if (rho == 0.0) {
                        out[r * d + c] = 0.0;
                        continue;
                    }
                    const double outer = (x[r] - center_[r]) * (x[c] - center_[c]) / (rho * rho * rho);
                    out[r * d + c] = sign * ((r == c ? 1.0 / rho : 0.0) - outer);
                }
            }
            return;
        }
        case PieceKind::HalfSpace:
            std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(d * d), 0.0);
            return;
        case PieceKind::Ellipsoid: {
            // Central differences of the analytic gradient, symmetrized.
            double scale = 0.0;
            for (double a : semi_axes_) scale = std::max(scale, a);
            const double step = 1e-5 * scale;
            std::vector<double> xp(x.begin(), x.end()), gp(d), gm(d);
            for (std::size_t c = 0; c < d; ++c) {
                xp[c] = x[c] + step;
                gradient(xp, gp);
                xp[c] = x[c] - step;
                gradient(xp, gm);
                xp[c] = x[c];
                for (std::size_t r = 0; r < d; ++r) out[r * d + c] = (gp[r] - gm[r]) / (2.0 * step);
            }
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t c = r + 1; c < d; ++c) {
                    const double m = 0.5 * (out[r * d + c] + out[c * d + r]);
                    out[r * d + c] = m;
                    out[c * d + r] = m;
                }
            }
            return;
        }
        case PieceKind::User:
            user_hessian_(x, out);
            return;
    }
}

bool SmoothPiece::project_to_boundary(std::span<double> x, int max_iter, double tol) const {
    std::vector<double> g(dim_), trial(dim_);
    double dist = distance(x);
    for (int iter = 0; iter < max_iter; ++iter) {
        if (!std::isfinite(dist)) return false;
        if (std::abs(dist) <= tol) return true;
        gradient(x, g);
        double g2 = 0.0;
        for (double v : g) g2 += v * v;
        if (!(g2 > 1e-24)) return false;
        double damping = 1.0;
        bool improved = false;
        for (int halving = 0; halving < 30; ++halving) {
            for (std::size_t k = 0; k < dim_; ++k) trial[k] = x[k] - damping * dist * g[k] / g2;
            const double next = distance(trial);
            if (std::abs(next) < std::abs(dist)) {
                std::copy(trial.begin(), trial.end(), x.begin());
                dist = next;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if (!improved) return std::abs(dist) <= tol;
    }
    return std::abs(dist) <= tol;
}

Domain::Domain(std::vector<SmoothPiece> pieces, double lipschitz, double horizon)
    : pieces_(std::move(pieces)), lipschitz_(lipschitz), horizon_(horizon) {
    require(!pieces_.empty(), ErrorCode::InvalidArgument, "domain needs at least one piece");
    require(lipschitz > 0.0 && std::isfinite(lipschitz), ErrorCode::InvalidArgument,
            "domain Lipschitz bound must be positive");
    require(horizon > 0.0 && std::isfinite(horizon), ErrorCode::InvalidArgument, "horizon must be positive");
    dim_ = pieces_.front().dim();
    for (const auto& p : pieces_) {
        require(p.dim() == dim_, ErrorCode::InvalidArgument, "all domain pieces must share one dimension");
    }
}

double Domain::signed_distance(std::span<const double> x) const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : pieces_) m = std::min(m, p.distance(x));
    return m;
}

bool Domain::contains(std::span<const double> x) const {
    for (const auto& p : pieces_) {
        if (p.kind() == PieceKind::HalfSpace) {
            const double* nv = p.normal().data();
            double s = -p.offset();
            for (std::size_t k = 0; k < dim_; ++k) s += nv[k] * x[k];
            if (!(s > 0.0)) return false;
        } else if (p.kind() == PieceKind::Ellipsoid) {
            double level = 0.0;
            for (std::size_t k = 0; k < dim_; ++k) {
                const double r = (x[k] - p.center()[k]) / p.semi_axes()[k];
                level += r * r;
            }
            if (!(level < 1.0)) return false;
        } else if (!(p.distance(x) > 0.0)) {
            return false;
        }
    }
    return true;
}

std::size_t Domain::active_piece(std::span<const double> x) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < pieces_.size(); ++l) {
        const double d = pieces_[l].distance(x);
        if (d < best_d) {
            best_d = d;
            best = l;
        }
    }
    return best;
}

Point Domain::inward_normal(std::span<const double> x, double tie_tolerance) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    double second_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < pieces_.size(); ++l) {
        const double d = pieces_[l].distance(x);
        if (d < best_d) {
            second_d = best_d;
            best_d = d;
            best = l;
        } else if (d < second_d) {
            second_d = d;
        }
    }
    if (second_d - best_d <= tie_tolerance) {
        throw Error(ErrorCode::AmbiguousNormal, "two pieces attain the minimal distance (corner neighbourhood)");
    }
    Point n(dim_);
    pieces_[best].gradient(x, n);
    return n;
}

bool Domain::in_corner_neighborhood(std::span<const double> x) const {
    std::size_t near = 0;
    for (const auto& p : pieces_) {
        if (std::abs(p.distance(x)) < corner_radius()) ++near;
    }
    return near >= 2;
}

double barrier_generator(const Domain& domain, std::size_t piece, const MatrixCoefficient& sigma,
                         const VectorCoefficient* drift, std::span<const double> x) {
    const std::size_t d = domain.dim();
    const auto& p = domain.pieces()[piece];
    std::vector<double> n(d), hess(d * d), s(d * d), a(d * d), b(d, 0.0);
    p.gradient(x, n);
    p.hessian(x, hess);
    sigma(x, s);
    diffusion_matrix(s, d, a);
    if (drift != nullptr) (*drift)(x, b);
    double bn = 0.0;
    for (std::size_t k = 0; k < d; ++k) bn += b[k] * n[k];
    double trace = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < d; ++c) trace += a[r * d + c] * hess[c * d + r];
    }
    return (2.0 * bn + trace) * p.distance(x) + quadratic_form(a, n, d);
}

bool ValidationReport::passed() const {
    bool ok = normal_check_passed && corner_check_passed && exterior_check_passed;
    for (const auto& b : barrier) ok = ok && b.passed;
    return ok;
}

std::string ValidationReport::table() const {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-34s %-14s %-14s %s\n", "check", "value", "threshold", "result");
    os << line;
    const auto row = [&](const char* name, double value, double thr, bool ok) {
        std::snprintf(line, sizeof line, "%-34s %-14.6g %-14.6g %s\n", name, value, thr, ok ? "PASS" : "FAIL");
        os << line;
    };
    row("non-characteristic min n a n^T", min_normal_variance, threshold, normal_check_passed);
    if (corner_ellipticity_samples > 0) {
        row("corner ellipticity min eig(a)", min_corner_eigenvalue, threshold, corner_check_passed);
    } else {
        std::snprintf(line, sizeof line, "%-34s %-14s %-14.6g %s\n", "corner ellipticity min eig(a)", "n/a",
                      threshold, "PASS");
        os << line;
    }
    for (const auto& b : barrier) {
        char name[64];
        std::snprintf(name, sizeof name, "barrier piece %zu (gamma=%.4g)", b.piece, b.gamma);
        row(name, b.min_lf, 1.0, b.passed);
    }
    row("exterior sphere max violation", max_exterior_violation, 1e-9, exterior_check_passed);
    std::snprintf(line, sizeof line, "samples: boundary=%zu corner=%zu attempts=%zu projection_failures=%zu\n",
                  boundary_samples, corner_samples, attempts, projection_failures);
    os << line;
    os << "overall: " << (passed() ? "PASS" : "FAIL") << '\n';
    return os.str();
}

ValidationReport validate_assumptions(const Domain& domain, const MatrixCoefficient& sigma, double lipschitz,
                                      const ValidationOptions& options, const VectorCoefficient* drift) {
    require(options.n_samples >= 1, ErrorCode::InvalidArgument, "n_samples must be >= 1");
    require(lipschitz > 0.0, ErrorCode::InvalidArgument, "Lipschitz constant must be positive");
    require(sigma.dim() == domain.dim(), ErrorCode::InvalidArgument, "sigma dimension does not match domain");

    const std::size_t d = domain.dim();
    const std::size_t m = domain.pieces().size();
    const double threshold = 1.0 / lipschitz;
    const double tube = options.tube_radius > 0.0 ? options.tube_radius : 0.5 / lipschitz;

    ValidationReport report;
    report.threshold = threshold;
    report.min_normal_variance = std::numeric_limits<double>::infinity();
    report.min_corner_eigenvalue = std::numeric_limits<double>::infinity();

    UniformStream uniform(CounterRng(options.seed, 0, Substream::Validation));
    NormalStream normal(CounterRng(options.seed, 1, Substream::Validation));

    std::vector<std::vector<Point>> piece_points(m);
    std::vector<std::pair<Point, std::size_t>> boundary;
    std::vector<double> s(d * d), a(d * d), n(d);

    const auto min_eigen = [&](std::span<const double> x) {
        sigma(x, s);
        diffusion_matrix(s, d, a);
        Eigen::Map<const Eigen::MatrixXd> am(a.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(am, Eigen::EigenvaluesOnly);
        return solver.eigenvalues().minCoeff();
    };

    const std::size_t max_attempts = 1000 * options.n_samples + 1000;
    const double box = lipschitz;
    Point z(d), x(d);
    while (report.boundary_samples < options.n_samples) {
        if (report.attempts >= max_attempts) {
            throw Error(ErrorCode::DegenerateSampler, "could not collect enough boundary samples");
        }
        ++report.attempts;
        for (std::size_t k = 0; k < d; ++k) z[k] = -box + 2.0 * box * uniform();
        const auto piece = std::min<std::size_t>(m - 1, static_cast<std::size_t>(uniform() * static_cast<double>(m)));

        if (domain.signed_distance(z) >= 0.0 && domain.in_corner_neighborhood(z)) {
            ++report.corner_ellipticity_samples;
            report.min_corner_eigenvalue = std::min(report.min_corner_eigenvalue, min_eigen(z));
        }

        x = z;
        if (!domain.pieces()[piece].project_to_boundary(x)) {
            ++report.projection_failures;
            continue;
        }
        if (piece_points[piece].size() < options.n_samples) piece_points[piece].push_back(x);
        bool on_boundary = true;
        for (std::size_t l = 0; l < m; ++l) {
            if (l != piece && domain.pieces()[l].distance(x) < -1e-9) {
                on_boundary = false;
                break;
            }
        }
        if (!on_boundary) continue;
        ++report.boundary_samples;
        boundary.emplace_back(x, piece);
    }
    if (static_cast<double>(report.projection_failures) > 0.01 * static_cast<double>(report.attempts)) {
        throw Error(ErrorCode::DegenerateSampler, "boundary projection failed for more than 1% of samples");
    }

    // (i) non-characteristic condition away from corners, (ii) ellipticity near them
    for (const auto& [pt, piece] : boundary) {
        if (domain.in_corner_neighborhood(pt)) {
            ++report.corner_samples;
            ++report.corner_ellipticity_samples;
            report.min_corner_eigenvalue = std::min(report.min_corner_eigenvalue, min_eigen(pt));
            continue;
        }
        domain.pieces()[piece].gradient(pt, n);
        sigma(pt, s);
        diffusion_matrix(s, d, a);
        report.min_normal_variance = std::min(report.min_normal_variance, quadratic_form(a, n, d));
    }
    if (report.boundary_samples == report.corner_samples) report.min_normal_variance = threshold;
    report.normal_check_passed = report.min_normal_variance >= threshold;
    if (report.corner_ellipticity_samples == 0) report.min_corner_eigenvalue = threshold;
    report.corner_check_passed = report.min_corner_eigenvalue >= threshold;

    // (iii) barrier functions F_l = d_l^2 / gamma on the tube around each piece
    const std::size_t offsets = std::max<std::size_t>(2, options.tube_offsets);
    for (std::size_t l = 0; l < m; ++l) {
        BarrierCheck check;
        check.piece = l;
        check.min_q = std::numeric_limits<double>::infinity();
        check.min_normal_variance = std::numeric_limits<double>::infinity();
        Point y(d);
        for (const auto& base : piece_points[l]) {
            domain.pieces()[l].gradient(base, n);
            for (std::size_t j = 0; j < offsets; ++j) {
                const double off = -tube + 2.0 * tube * static_cast<double>(j) / static_cast<double>(offsets - 1);
                for (std::size_t k = 0; k < d; ++k) y[k] = base[k] + off * n[k];
                check.min_q = std::min(check.min_q, barrier_generator(domain, l, sigma, drift, y));
                std::vector<double> ny(d);
                domain.pieces()[l].gradient(y, ny);
                sigma(y, s);
                diffusion_matrix(s, d, a);
                check.min_normal_variance = std::min(check.min_normal_variance, quadratic_form(a, ny, d));
                ++check.samples;
            }
        }
        if (check.samples > 0 && check.min_q > 0.0) {
            double gamma = threshold;
            for (int k = 0; k < 60 && gamma > check.min_q; ++k) gamma *= 0.5;
            if (gamma <= check.min_q) {
                check.gamma = gamma;
                check.min_lf = check.min_q / gamma;
            }
        }
        check.passed = check.gamma > 0.0 && check.min_lf >= 1.0 && check.min_normal_variance >= 0.5 * threshold;
        report.barrier.push_back(check);
    }

    // (iv) exterior sphere of radius 1/L touching at each non-corner boundary sample
    const double re = threshold;
    Point centre(d), u(d), q(d);
    for (const auto& [pt, piece] : boundary) {
        if (!domain.pieces()[piece].is_analytic() || domain.in_corner_neighborhood(pt)) continue;
        domain.pieces()[piece].gradient(pt, n);
        for (std::size_t k = 0; k < d; ++k) centre[k] = pt[k] - re * n[k];
        ++report.exterior_samples;
        for (std::size_t j = 0; j < options.sphere_directions; ++j) {
            double len = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                u[k] = normal();
                len += u[k] * u[k];
            }
            len = std::sqrt(len);
            if (len == 0.0) continue;
            double gap = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                q[k] = centre[k] + re * u[k] / len;
                gap += (q[k] - pt[k]) * (q[k] - pt[k]);
            }
            if (std::sqrt(gap) < 1e-6 * re) continue;
            report.max_exterior_violation = std::max(report.max_exterior_violation, domain.signed_distance(q));
        }
    }
    report.exterior_check_passed = report.max_exterior_violation <= 1e-9;
    return report;
}

}  // namespace exitbsde
