#include "pqforge/fixed_point.hpp"

#include <cmath>

namespace pqforge {

const char* to_string(RoundMode m) {
    switch (m) {
        case RoundMode::TRN: return "TRN";
        case RoundMode::TRN_ZERO: return "TRN_ZERO";
        case RoundMode::RND: return "RND";
        case RoundMode::RND_CONV: return "RND_CONV";
        case RoundMode::RND_ZERO: return "RND_ZERO";
        case RoundMode::RND_MIN_INF: return "RND_MIN_INF";
        case RoundMode::RND_INF: return "RND_INF";
    }
    return "?";
}

const char* to_string(OverflowMode m) {
    switch (m) {
        case OverflowMode::SAT: return "SAT";
        case OverflowMode::SAT_SYM: return "SAT_SYM";
        case OverflowMode::WRAP: return "WRAP";
        case OverflowMode::WRAP_SM: return "WRAP_SM";
    }
    return "?";
}

RoundMode parse_round_mode(const std::string& s) {
    if (s == "TRN") return RoundMode::TRN;
    if (s == "TRN_ZERO") return RoundMode::TRN_ZERO;
    // RN_ZERO appears in some configuration tables as an alias of TRN_ZERO.
    if (s == "RN_ZERO") return RoundMode::TRN_ZERO;
    if (s == "RND") return RoundMode::RND;
    if (s == "RND_CONV") return RoundMode::RND_CONV;
    if (s == "RND_ZERO") return RoundMode::RND_ZERO;
    if (s == "RND_MIN_INF") return RoundMode::RND_MIN_INF;
    if (s == "RND_INF") return RoundMode::RND_INF;
    throw ConfigError("unknown round mode \"" + s + "\"");
}

OverflowMode parse_overflow_mode(const std::string& s) {
    if (s == "SAT") return OverflowMode::SAT;
    if (s == "SAT_SYM") return OverflowMode::SAT_SYM;
    if (s == "WRAP") return OverflowMode::WRAP;
    if (s == "WRAP_SM") return OverflowMode::WRAP_SM;
    throw ConfigError("unknown overflow mode \"" + s + "\"");
}

namespace {

// Rounded mantissa of s = x*2^f as an integer-valued double. |s| can exceed
// int64 range for extreme inputs, so everything stays in double; floor and
// the 0.5 comparison are exact because s - floor(s) is exactly representable.
double round_mantissa(double s, RoundMode mode) {
    double fl = std::floor(s);
    double r = s - fl;
    switch (mode) {
        case RoundMode::TRN:
            return fl;
        case RoundMode::TRN_ZERO:
            return (s < 0.0 && r > 0.0) ? fl + 1.0 : fl;
        case RoundMode::RND:
            return r >= 0.5 ? fl + 1.0 : fl;
        case RoundMode::RND_CONV: {
            if (r > 0.5) return fl + 1.0;
            if (r < 0.5) return fl;
            double half = fl * 0.5;
            bool even = std::floor(half) == half;
            return even ? fl : fl + 1.0;
        }
        case RoundMode::RND_ZERO:
            if (r > 0.5) return fl + 1.0;
            if (r < 0.5) return fl;
            return s < 0.0 ? fl + 1.0 : fl;
        case RoundMode::RND_MIN_INF:
            return r > 0.5 ? fl + 1.0 : fl;
        case RoundMode::RND_INF:
            if (r > 0.5) return fl + 1.0;
            if (r < 0.5) return fl;
            return s > 0.0 ? fl + 1.0 : fl;
    }
    return fl;
}

} // namespace

double quantize_value(double x, const FixedPointSpec& spec) {
    const int f = spec.fractional_bits;
    const int m = spec.mag_bits();
    double n = round_mantissa(std::ldexp(x, f), spec.round_mode);

    const double n_max = std::ldexp(1.0, m) - 1.0;
    const double n_min = spec.keep_negative ? -std::ldexp(1.0, m) : 0.0;

    switch (spec.overflow_mode) {
        case OverflowMode::SAT:
            n = std::min(std::max(n, n_min), n_max);
            break;
        case OverflowMode::SAT_SYM:
            n = std::min(std::max(n, spec.keep_negative ? -n_max : 0.0), n_max);
            break;
        case OverflowMode::WRAP: {
            if (spec.keep_negative) {
                // two's-complement wrap into [-2^m, 2^m)
                double period = std::ldexp(1.0, m + 1);
                double w = std::fmod(n + std::ldexp(1.0, m), period);
                if (w < 0.0) w += period;
                n = w - std::ldexp(1.0, m);
            } else {
                double period = std::ldexp(1.0, m);
                n = std::fmod(n, period);
                if (n < 0.0) n += period;
            }
            break;
        }
        case OverflowMode::WRAP_SM: {
            if (!spec.keep_negative) {
                // sign-magnitude is meaningless unsigned; behave like WRAP
                double period = std::ldexp(1.0, m);
                n = std::fmod(n, period);
                if (n < 0.0) n += period;
            } else {
                double mag = std::fmod(std::fabs(n), std::ldexp(1.0, m));
                n = n < 0.0 ? -mag : mag;
            }
            break;
        }
    }
    return std::ldexp(n, -f) + 0.0; // +0.0 canonicalizes -0
}

} // namespace pqforge
