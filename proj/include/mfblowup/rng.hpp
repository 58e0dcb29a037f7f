#pragma once

// Counter-based Philox4x32-10 (Salmon et al., SC'11). Every draw is a pure
// function of (key, counter), so results do not depend on thread layout.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfblowup {

class Philox4x32 {
public:
    using Block = std::array<std::uint32_t, 4>;

    explicit Philox4x32(std::uint64_t seed)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    Block operator()(Block ctr) const
    {
        std::array<std::uint32_t, 2> k = key_;
        for (int r = 0; r < 10; ++r) {
            if (r > 0) {
                k[0] += 0x9E3779B9u;
                k[1] += 0xBB67AE85u;
            }
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ k[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ k[1], static_cast<std::uint32_t>(p0)};
        }
        return ctr;
    }

    // Standard normal indexed by (a, b, c); c is split over two words.
    double normal(std::uint32_t a, std::uint32_t b, std::uint64_t c) const
    {
        const Block w = (*this)({a, b, static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)});
        const double u1 = to_open_unit(w[0], w[1]);
        const double u2 = to_open_unit(w[2], w[3]);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // 52-bit midpoint grid: strictly inside (0, 1) after rounding
    static double to_open_unit(std::uint32_t hi, std::uint32_t lo)
    {
        const std::uint64_t m = ((std::uint64_t{hi} << 32) | lo) >> 12;
        return (static_cast<double>(m) + 0.5) * 0x1.0p-52;
    }

private:
    std::array<std::uint32_t, 2> key_;
};

} // namespace mfblowup
