#pragma once

// Test-only exact-integer reference for fixed-point quantization. Decomposes
// the input into an integer significand times a power of two, rounds on
// integer quotient/remainder pairs, and applies overflow in integer
// arithmetic. Shares no code with the library's float-domain kernels.

#include <cmath>
#include <cstdint>

#include "pqforge/fixed_point.hpp"

namespace oracle {

using pqforge::FixedPointSpec;
using pqforge::OverflowMode;
using pqforge::RoundMode;

inline double quantize(double x, const FixedPointSpec& spec) {
    const int f = spec.fractional_bits;
    const int mag = spec.mag_bits();
    __int128 n; // rounded mantissa of x * 2^f

    if (x == 0.0) {
        n = 0;
    } else {
        int ex;
        const double fr = std::frexp(x, &ex); // x = fr * 2^ex, 0.5 <= |fr| < 1
        const long long m = std::llround(std::ldexp(fr, 53)); // exact integer
        const long long sh = static_cast<long long>(ex) - 53 + f; // x*2^f = m * 2^sh
        if (sh >= 0) {
            n = static_cast<__int128>(m) << sh; // integral, no rounding needed
        } else {
            const long long d = -sh;
            __int128 q;
            bool tie = false, above_half = false, frac_nonzero = false;
            if (d >= 55) {
                // |x*2^f| < 2^-2: quotient from floored division is 0 or -1
                q = x > 0 ? 0 : -1;
                frac_nonzero = true;
                above_half = x < 0;
            } else {
                const __int128 D = static_cast<__int128>(1) << d;
                q = static_cast<__int128>(m) / D;
                __int128 r = static_cast<__int128>(m) % D;
                if (r < 0) {
                    q -= 1;
                    r += D;
                }
                frac_nonzero = r != 0;
                tie = (2 * r == D);
                above_half = (2 * r > D);
            }
            const bool negative = x < 0;
            bool inc = false;
            switch (spec.round_mode) {
                case RoundMode::TRN: break;
                case RoundMode::TRN_ZERO: inc = negative && frac_nonzero; break;
                case RoundMode::RND: inc = above_half || tie; break;
                case RoundMode::RND_CONV: inc = above_half || (tie && (q & 1) != 0); break;
                case RoundMode::RND_ZERO: inc = above_half || (tie && negative); break;
                case RoundMode::RND_MIN_INF: inc = above_half; break;
                case RoundMode::RND_INF: inc = above_half || (tie && !negative); break;
            }
            n = inc ? q + 1 : q;
        }
    }

    const __int128 n_max = (static_cast<__int128>(1) << mag) - 1;
    const __int128 n_min = spec.keep_negative ? -(static_cast<__int128>(1) << mag) : 0;
    switch (spec.overflow_mode) {
        case OverflowMode::SAT:
            if (n > n_max) n = n_max;
            if (n < n_min) n = n_min;
            break;
        case OverflowMode::SAT_SYM: {
            const __int128 lo = spec.keep_negative ? -n_max : 0;
            if (n > n_max) n = n_max;
            if (n < lo) n = lo;
            break;
        }
        case OverflowMode::WRAP: {
            if (spec.keep_negative) {
                const __int128 period = static_cast<__int128>(1) << (mag + 1);
                __int128 w = (n + (static_cast<__int128>(1) << mag)) % period;
                if (w < 0) w += period;
                n = w - (static_cast<__int128>(1) << mag);
            } else {
                const __int128 period = static_cast<__int128>(1) << mag;
                n %= period;
                if (n < 0) n += period;
            }
            break;
        }
        case OverflowMode::WRAP_SM: {
            if (!spec.keep_negative) {
                const __int128 period = static_cast<__int128>(1) << mag;
                n %= period;
                if (n < 0) n += period;
            } else {
                const bool neg = n < 0;
                __int128 a = neg ? -n : n;
                a %= static_cast<__int128>(1) << mag;
                n = neg ? -a : a;
            }
            break;
        }
    }
    return std::ldexp(static_cast<double>(static_cast<long long>(n)), -f) + 0.0;
}

} // namespace oracle
