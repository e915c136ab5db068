#include <algorithm>
#include <cmath>

#include "pqforge/kernels.hpp"

// Reference kernels. Compiled with -ffp-contract=off so a*b+c is two
// IEEE operations; the AVX2 variants mirror the exact operation sequence.

namespace pqforge::kernels {
namespace scalar {

template <class T>
void matmul_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        T* crow = c + m * N;
        for (size_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * N;
            for (size_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

template <class T>
void relu_fwd(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(const T* x, const T* gy, T* gx, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
}

template <class T>
void hard_tanh_fwd(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = std::min(std::max(x[i], T(-1)), T(1));
}

template <class T>
void hard_tanh_bwd(const T* x, const T* gy, T* gx, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (x[i] > T(-1) && x[i] < T(1)) gx[i] += gy[i];
}

template <class T>
void adam_update(T* w, const T* g, T* m, T* v, size_t n, const AdamParams<T>& p) {
    const T one = T(1);
    for (size_t i = 0; i < n; ++i) {
        const T gi = g[i];
        m[i] = p.beta1 * m[i] + (one - p.beta1) * gi;
        v[i] = p.beta2 * v[i] + (one - p.beta2) * (gi * gi);
        const T mhat = m[i] * p.inv_bias1;
        const T vhat = v[i] * p.inv_bias2;
        const T denom = std::sqrt(vhat) + p.eps;
        w[i] -= p.lr * (mhat / denom);
    }
}

// Rounded mantissa with the tie rules, in T arithmetic. Exact for SAT-family
// use where |s| is pre-bounded (see quantize_uniform).
template <class T>
inline T round_mantissa_t(T s, RoundMode mode) {
    const T fl = std::floor(s);
    const T r = s - fl;
    const T half = T(0.5);
    switch (mode) {
        case RoundMode::TRN: return fl;
        case RoundMode::TRN_ZERO: return (s < T(0) && r > T(0)) ? fl + T(1) : fl;
        case RoundMode::RND: return r >= half ? fl + T(1) : fl;
        case RoundMode::RND_CONV: {
            if (r > half) return fl + T(1);
            if (r < half) return fl;
            const T h = fl * half;
            return std::floor(h) == h ? fl : fl + T(1);
        }
        case RoundMode::RND_ZERO:
            if (r > half) return fl + T(1);
            if (r < half) return fl;
            return s < T(0) ? fl + T(1) : fl;
        case RoundMode::RND_MIN_INF: return r > half ? fl + T(1) : fl;
        case RoundMode::RND_INF:
            if (r > half) return fl + T(1);
            if (r < half) return fl;
            return s > T(0) ? fl + T(1) : fl;
    }
    return fl;
}

template <class T>
void quantize_uniform(const T* x, T* y, size_t n, const QuantParams<T>& p) {
    if (p.overflow == OverflowMode::SAT || p.overflow == OverflowMode::SAT_SYM) {
        for (size_t i = 0; i < n; ++i) {
            const T cl = std::min(std::max(x[i], p.lo), p.hi);
            const T mant = round_mantissa_t<T>(cl * p.scale, p.round);
            y[i] = mant * p.inv_scale + T(0);
        }
    } else {
        // WRAP paths go through the double core; all steps stay exact.
        FixedPointSpec spec;
        spec.keep_negative = p.keep_negative ? 1 : 0;
        spec.integer_bits = p.mag_bits; // only i+f matters below
        spec.fractional_bits = 0;
        spec.round_mode = p.round;
        spec.overflow_mode = p.overflow;
        for (size_t i = 0; i < n; ++i) {
            double s = static_cast<double>(x[i]) * static_cast<double>(p.scale);
            y[i] = static_cast<T>(quantize_value(s, spec) * static_cast<double>(p.inv_scale) + 0.0);
        }
    }
}

template <class T>
void quantize_elems(const T* x, T* y, size_t n, const T* scale, const T* inv_scale, const T* lo,
                    const T* hi, RoundMode round) {
    for (size_t i = 0; i < n; ++i) {
        const T cl = std::min(std::max(x[i], lo[i]), hi[i]);
        const T mant = round_mantissa_t<T>(cl * scale[i], round);
        y[i] = mant * inv_scale[i] + T(0);
    }
}

} // namespace scalar

template <class T>
static Table<T> make_scalar_table() {
    Table<T> t;
    t.matmul_acc = &scalar::matmul_acc<T>;
    t.relu_fwd = &scalar::relu_fwd<T>;
    t.relu_bwd = &scalar::relu_bwd<T>;
    t.hard_tanh_fwd = &scalar::hard_tanh_fwd<T>;
    t.hard_tanh_bwd = &scalar::hard_tanh_bwd<T>;
    t.adam_update = &scalar::adam_update<T>;
    t.quantize_uniform = &scalar::quantize_uniform<T>;
    t.quantize_elems = &scalar::quantize_elems<T>;
    return t;
}

const Table<float>& scalar_table_f32() {
    static const Table<float> t = make_scalar_table<float>();
    return t;
}

const Table<double>& scalar_table_f64() {
    static const Table<double> t = make_scalar_table<double>();
    return t;
}

} // namespace pqforge::kernels
