#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace hat {

// SplitMix64-based generator. All randomness in the project flows through
// this so that runs are reproducible bit-for-bit across platforms; the
// standard-library distributions are implementation-defined and would not be.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, second draw cached
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // integer in [0, n); multiply-shift, bias is negligible for our n
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
    }

    bool bernoulli(double p_true) { return uniform() < p_true; }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Derives an independent stream seed from a root seed, a purpose tag and a
// counter. Consumers with different purposes never share a stream, so adding
// or removing one consumer does not shift another's draws.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t index) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : purpose) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    Rng mixer(root ^ h);
    mixer.next_u64();
    std::uint64_t s = mixer.next_u64() ^ (index * 0x9e3779b97f4a7c15ULL);
    return Rng(s).next_u64();
}

}  // namespace hat
