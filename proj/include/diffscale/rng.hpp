#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace diffscale {

/// SplitMix64 finalizer. All seed derivation in the project goes through it.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Child seed for stream `index` under `seed`: mix64(seed ^ mix64(index)).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept
{
    return mix64(seed ^ mix64(index));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept
{
    return derive_seed(derive_seed(seed, a), b);
}

/// Owned random stream: a 64-bit Mersenne twister plus the normal/uniform adaptors.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }

    void fill_normal(std::span<float> out)
    {
        for (auto& v : out) v = static_cast<float>(normal_(engine_));
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace diffscale
