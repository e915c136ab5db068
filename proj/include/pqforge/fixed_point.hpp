#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "pqforge/util.hpp"

namespace pqforge {

/// Rounding applied to x*2^f before the result is re-scaled onto the grid.
enum class RoundMode {
    TRN,         // floor
    TRN_ZERO,    // truncate toward zero
    RND,         // nearest, half toward +inf
    RND_CONV,    // nearest, half to even
    RND_ZERO,    // nearest, half toward zero
    RND_MIN_INF, // nearest, half toward -inf
    RND_INF      // nearest, half away from zero
};

/// Behaviour when the rounded mantissa leaves the representable b-bit range.
enum class OverflowMode {
    SAT,     // clamp to [min, max]
    SAT_SYM, // clamp to [-max, max]
    WRAP,    // two's-complement wrap of the b-bit mantissa
    WRAP_SM  // sign-magnitude wrap: sign(n) * (|n| mod 2^(i+f))
};

const char* to_string(RoundMode m);
const char* to_string(OverflowMode m);
RoundMode parse_round_mode(const std::string& s);       // accepts RN_ZERO as TRN_ZERO
OverflowMode parse_overflow_mode(const std::string& s);

/// Fixed-point format (k,i,f): values are integer multiples of 2^-f with
/// k sign bit, i integer bits (may be negative for sub-unit ranges) and f
/// fractional bits. Total width b = k + i + f.
struct FixedPointSpec {
    int keep_negative = 1; // k, 0 or 1
    int integer_bits = 0;  // i
    int fractional_bits = 7; // f
    RoundMode round_mode = RoundMode::RND;
    OverflowMode overflow_mode = OverflowMode::SAT;

    int width() const { return keep_negative + integer_bits + fractional_bits; }
    int mag_bits() const { return integer_bits + fractional_bits; }

    double max_value() const { return std::ldexp(1.0, integer_bits) - std::ldexp(1.0, -fractional_bits); }
    double min_value() const { return keep_negative ? -std::ldexp(1.0, integer_bits) : 0.0; }

    /// Lower clamp actually used by the overflow mode (SAT_SYM is symmetric).
    double clamp_lo() const { return overflow_mode == OverflowMode::SAT_SYM ? (keep_negative ? -max_value() : 0.0) : min_value(); }
    double clamp_hi() const { return max_value(); }

    bool operator==(const FixedPointSpec&) const = default;

    void validate(const std::string& where) const {
        if (keep_negative != 0 && keep_negative != 1)
            throw ConfigError(where + ": keep_negative must be 0 or 1");
        if (mag_bits() < 0 || width() < 1)
            throw ConfigError(where + format(": invalid width k=%d i=%d f=%d (need i+f >= 0 and k+i+f >= 1)",
                                             keep_negative, integer_bits, fractional_bits));
    }
};

/// Scalar quantization core in double arithmetic. Every step is exact:
/// scaling by 2^f only shifts the exponent, floor and the tie comparison
/// are exact on doubles, and WRAP uses fmod on integer-valued doubles.
double quantize_value(double x, const FixedPointSpec& spec);

} // namespace pqforge
