#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace ski {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive well-separated seeds from tuples.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for the substream identified by `keys` under `master`. Distinct key
/// tuples give unrelated seeds; the same tuple always gives the same seed.
inline std::uint64_t stream_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = mix64(master ^ 0x5ca1ab1eULL);
    for (auto k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
    return Rng(stream_seed(master, keys));
}

/// Uniform on the open interval (0, 1); never returns an endpoint.
inline double open_uniform(Rng& rng) {
    constexpr double scale = 1.0 / 9007199254740992.0;  // 2^-53
    for (;;) {
        const double u = static_cast<double>(rng() >> 11) * scale;
        if (u > 0.0) return u;
    }
}

inline Eigen::VectorXd standard_normals(Rng& rng, Eigen::Index n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
}

}  // namespace ski
