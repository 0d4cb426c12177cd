#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

// Portable sampling helpers. The standard distributions are implementation
// defined, so anything that feeds dumps or splits goes through these instead.
namespace thetaguard::random {

using Engine = std::mt19937_64;

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Engine& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, bound) by rejection, no modulo bias.
inline std::uint64_t uniform_index(Engine& rng, std::uint64_t bound) {
    const std::uint64_t limit = Engine::max() - Engine::max() % bound;
    std::uint64_t x = rng();
    while (x >= limit) {
        x = rng();
    }
    return x % bound;
}

// Box-Muller, one draw per call.
inline double standard_normal(Engine& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) {
        u1 = uniform01(rng);
    }
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename Container>
void shuffle(Container& items, Engine& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

} // namespace thetaguard::random
