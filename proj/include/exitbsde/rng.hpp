#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace exitbsde {

/// Substream tags. Every random draw in the library is keyed by
/// (experiment seed, path index, tag, counter); consumers never share a tag,
/// so refining a path or sampling exit crossings cannot perturb the coarse
/// Brownian increments.
enum class Substream : std::uint64_t {
    Coarse = 1,
    Bridge = 2,
    ExactExit = 3,
    Validation = 4,
    Test = 15,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Inverse standard normal CDF for p in (0, 1) (Wichura's AS241, about 1e-16 relative).
inline double inverse_normal_cdf(double p) noexcept {
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                    45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
                 133.14166789178437745) * r + 3.387132872796366608) /
               (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                    21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
                 42.313330701600911252) * r + 1.0);
    }
    double r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double x;
    if (r <= 5.0) {
        r -= 1.6;
        x = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
                 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
              4.6303378461565452959) * r + 1.42343711074968357734) /
            (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
                 0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
              2.05319162663775882187) * r + 1.0);
    } else {
        r -= 5.0;
        x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
                 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
              5.4637849111641143699) * r + 6.6579046435011037772) /
            (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
                 7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
              0.59983220655588793769) * r + 1.0);
    }
    return q < 0.0 ? -x : x;
}

/// Stateless counter-based generator: draw k of a key is a pure function of
/// (key, k), so any subset of draws can be regenerated in any order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t path, Substream tag) noexcept
        : key_(mix64(mix64(mix64(seed) ^ (path * 0xd1b54a32d192ed03ULL)) ^
                     (static_cast<std::uint64_t>(tag) * 0x8cb92ba72f3d8dd7ULL))) {}

    std::uint64_t bits(std::uint64_t counter) const noexcept {
        return mix64(key_ ^ mix64(counter * 0xa0761d6478bd642fULL + 0x632be59bd9b4e019ULL));
    }

    /// Uniform on the open interval (0, 1).
    double uniform(std::uint64_t counter) const noexcept {
        return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal number `index` of this key: inverse normal CDF of uniform(index).
    double normal(std::uint64_t index) const noexcept { return inverse_normal_cdf(uniform(index)); }

    std::uint64_t key() const noexcept { return key_; }

private:
    std::uint64_t key_;
};

/// Sequential view over a CounterRng: draw i equals CounterRng::normal(i).
class NormalStream {
public:
    NormalStream(const CounterRng& rng, std::uint64_t start = 0) noexcept : rng_(rng), next_(start) {}

    double operator()() noexcept { return rng_.normal(next_++); }

    /// Jump to absolute draw index.
    void seek(std::uint64_t index) noexcept { next_ = index; }

    std::uint64_t position() const noexcept { return next_; }

private:
    CounterRng rng_;
    std::uint64_t next_;
};

/// Sequential uniforms, used where draw order does not need to be addressable.
class UniformStream {
public:
    UniformStream(const CounterRng& rng, std::uint64_t start = 0) noexcept
        : rng_(rng), next_(start) {}
    double operator()() noexcept { return rng_.uniform(next_++); }

private:
    CounterRng rng_;
    std::uint64_t next_;
};

}  // namespace exitbsde
