#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace haicomm {

namespace detail {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based splitmix64 stream. Identical (seed, stream) pairs give
// identical draw sequences; derive() splits off statistically independent
// substreams without touching the parent's state.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream), state_(detail::mix64(seed + detail::kGolden * (stream + 1))) {}

    std::uint64_t next_u64() {
        state_ += detail::kGolden;
        return detail::mix64(state_);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one draw per call, the paired value is discarded so stream
    // splitting stays position-independent.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Unbiased via 128-bit multiply-shift rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t threshold = (-n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            const auto wide = static_cast<unsigned __int128>(r) * n;
            if (static_cast<std::uint64_t>(wide) >= threshold) return static_cast<std::uint64_t>(wide >> 64);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    Rng derive(std::uint64_t a, std::uint64_t b = 0) const {
        return Rng(detail::mix64(seed_ ^ detail::mix64(a + detail::kGolden)),
                   detail::mix64(stream_ + detail::kGolden * (b + 1)));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t state_;
};

// Named substream keys so call sites cannot collide by accident.
namespace stream {
constexpr std::uint64_t kInit = 0x01;
constexpr std::uint64_t kCase = 0x02;
constexpr std::uint64_t kMask = 0x03;
constexpr std::uint64_t kShuffle = 0x04;
constexpr std::uint64_t kBootstrap = 0x05;
constexpr std::uint64_t kFold = 0x06;
constexpr std::uint64_t kVariant = 0x07;
}  // namespace stream

}  // namespace haicomm
