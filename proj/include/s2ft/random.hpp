#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "s2ft/linalg.hpp"

namespace s2ft {

/// xoshiro256** seeded through splitmix64. Every random draw in the engine
/// flows through one of these, seeded explicitly; output is identical on any
/// platform with IEEE doubles.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n). Rejection sampling, so unbiased.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via the Marsaglia polar method (pairs are cached).
    double normal();

    /// Sorted sample of `count` distinct indices from [0, n).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count);

private:
    std::array<std::uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derive an independent stream seed (e.g. per trial) from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

}  // namespace s2ft
