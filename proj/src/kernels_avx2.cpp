#include "pqforge/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>

// AVX2 kernels. Multiply and add stay separate (no FMA) and reductions keep
// per-element accumulation order, so outputs are bitwise equal to the scalar
// reference.

namespace pqforge::kernels {

// defined in kernels_scalar.cpp
const Table<float>& scalar_table_f32();
const Table<double>& scalar_table_f64();

namespace avx2 {

void matmul_acc_f32(const float* a, const float* b, float* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const float* arow = a + m * K;
        float* crow = c + m * N;
        for (size_t k = 0; k < K; ++k) {
            const __m256 av = _mm256_set1_ps(arow[k]);
            const float* brow = b + k * N;
            size_t n = 0;
            for (; n + 8 <= N; n += 8) {
                __m256 cv = _mm256_loadu_ps(crow + n);
                __m256 bv = _mm256_loadu_ps(brow + n);
                cv = _mm256_add_ps(cv, _mm256_mul_ps(av, bv));
                _mm256_storeu_ps(crow + n, cv);
            }
            const float as = arow[k];
            for (; n < N; ++n) crow[n] += as * brow[n];
        }
    }
}

void matmul_acc_f64(const double* a, const double* b, double* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const double* arow = a + m * K;
        double* crow = c + m * N;
        for (size_t k = 0; k < K; ++k) {
            const __m256d av = _mm256_set1_pd(arow[k]);
            const double* brow = b + k * N;
            size_t n = 0;
            for (; n + 4 <= N; n += 4) {
                __m256d cv = _mm256_loadu_pd(crow + n);
                __m256d bv = _mm256_loadu_pd(brow + n);
                cv = _mm256_add_pd(cv, _mm256_mul_pd(av, bv));
                _mm256_storeu_pd(crow + n, cv);
            }
            const double as = arow[k];
            for (; n < N; ++n) crow[n] += as * brow[n];
        }
    }
}

void relu_fwd_f32(const float* x, float* y, size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
    for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_f32(const float* x, const float* gy, float* gx, size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_loadu_ps(x + i);
        __m256 mask = _mm256_cmp_ps(xv, zero, _CMP_GT_OQ);
        __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
        _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), add));
    }
    for (; i < n; ++i)
        if (x[i] > 0.0f) gx[i] += gy[i];
}

void hard_tanh_fwd_f32(const float* x, float* y, size_t n) {
    const __m256 lo = _mm256_set1_ps(-1.0f);
    const __m256 hi = _mm256_set1_ps(1.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_min_ps(_mm256_max_ps(_mm256_loadu_ps(x + i), lo), hi));
    for (; i < n; ++i) y[i] = std::min(std::max(x[i], -1.0f), 1.0f);
}

void hard_tanh_bwd_f32(const float* x, const float* gy, float* gx, size_t n) {
    const __m256 lo = _mm256_set1_ps(-1.0f);
    const __m256 hi = _mm256_set1_ps(1.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_loadu_ps(x + i);
        __m256 mask = _mm256_and_ps(_mm256_cmp_ps(xv, lo, _CMP_GT_OQ), _mm256_cmp_ps(xv, hi, _CMP_LT_OQ));
        __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
        _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), add));
    }
    for (; i < n; ++i)
        if (x[i] > -1.0f && x[i] < 1.0f) gx[i] += gy[i];
}

void adam_update_f32(float* w, const float* g, float* m, float* v, size_t n,
                     const AdamParams<float>& p) {
    const __m256 b1 = _mm256_set1_ps(p.beta1);
    const __m256 b2 = _mm256_set1_ps(p.beta2);
    const __m256 ob1 = _mm256_set1_ps(1.0f - p.beta1);
    const __m256 ob2 = _mm256_set1_ps(1.0f - p.beta2);
    const __m256 ib1 = _mm256_set1_ps(p.inv_bias1);
    const __m256 ib2 = _mm256_set1_ps(p.inv_bias2);
    const __m256 eps = _mm256_set1_ps(p.eps);
    const __m256 lr = _mm256_set1_ps(p.lr);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 gv = _mm256_loadu_ps(g + i);
        __m256 mv = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(ob1, gv));
        __m256 vv = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                                  _mm256_mul_ps(ob2, _mm256_mul_ps(gv, gv)));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        __m256 mhat = _mm256_mul_ps(mv, ib1);
        __m256 vhat = _mm256_mul_ps(vv, ib2);
        __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), eps);
        __m256 step = _mm256_mul_ps(lr, _mm256_div_ps(mhat, denom));
        _mm256_storeu_ps(w + i, _mm256_sub_ps(_mm256_loadu_ps(w + i), step));
    }
    if (i < n) scalar_table_f32().adam_update(w + i, g + i, m + i, v + i, n - i, p);
}

// Vector form of the scalar tie rules; returns the rounded mantissa.
static inline __m256 round_mantissa_ps(__m256 s, RoundMode mode) {
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 zero = _mm256_setzero_ps();
    __m256 fl = _mm256_floor_ps(s);
    __m256 r = _mm256_sub_ps(s, fl);
    __m256 inc;
    switch (mode) {
        case RoundMode::TRN:
            return fl;
        case RoundMode::TRN_ZERO:
            inc = _mm256_and_ps(_mm256_cmp_ps(s, zero, _CMP_LT_OQ), _mm256_cmp_ps(r, zero, _CMP_GT_OQ));
            break;
        case RoundMode::RND:
            inc = _mm256_cmp_ps(r, half, _CMP_GE_OQ);
            break;
        case RoundMode::RND_CONV: {
            __m256 gt = _mm256_cmp_ps(r, half, _CMP_GT_OQ);
            __m256 eq = _mm256_cmp_ps(r, half, _CMP_EQ_OQ);
            __m256 h = _mm256_mul_ps(fl, half);
            __m256 odd = _mm256_cmp_ps(_mm256_floor_ps(h), h, _CMP_NEQ_OQ);
            inc = _mm256_or_ps(gt, _mm256_and_ps(eq, odd));
            break;
        }
        case RoundMode::RND_ZERO: {
            __m256 gt = _mm256_cmp_ps(r, half, _CMP_GT_OQ);
            __m256 eq = _mm256_cmp_ps(r, half, _CMP_EQ_OQ);
            __m256 neg = _mm256_cmp_ps(s, zero, _CMP_LT_OQ);
            inc = _mm256_or_ps(gt, _mm256_and_ps(eq, neg));
            break;
        }
        case RoundMode::RND_MIN_INF:
            inc = _mm256_cmp_ps(r, half, _CMP_GT_OQ);
            break;
        case RoundMode::RND_INF: {
            __m256 gt = _mm256_cmp_ps(r, half, _CMP_GT_OQ);
            __m256 eq = _mm256_cmp_ps(r, half, _CMP_EQ_OQ);
            __m256 pos = _mm256_cmp_ps(s, zero, _CMP_GT_OQ);
            inc = _mm256_or_ps(gt, _mm256_and_ps(eq, pos));
            break;
        }
        default:
            return fl;
    }
    return _mm256_add_ps(fl, _mm256_and_ps(inc, one));
}

void quantize_uniform_f32(const float* x, float* y, size_t n, const QuantParams<float>& p) {
    if (p.overflow != OverflowMode::SAT && p.overflow != OverflowMode::SAT_SYM) {
        scalar_table_f32().quantize_uniform(x, y, n, p); // WRAP: exact double path
        return;
    }
    const __m256 lo = _mm256_set1_ps(p.lo);
    const __m256 hi = _mm256_set1_ps(p.hi);
    const __m256 scale = _mm256_set1_ps(p.scale);
    const __m256 inv = _mm256_set1_ps(p.inv_scale);
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_min_ps(_mm256_max_ps(_mm256_loadu_ps(x + i), lo), hi);
        __m256 mant = round_mantissa_ps(_mm256_mul_ps(xv, scale), p.round);
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_mul_ps(mant, inv), zero));
    }
    if (i < n) scalar_table_f32().quantize_uniform(x + i, y + i, n - i, p);
}

void quantize_elems_f32(const float* x, float* y, size_t n, const float* scale,
                        const float* inv_scale, const float* lo, const float* hi, RoundMode round) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_min_ps(_mm256_max_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(lo + i)),
                                  _mm256_loadu_ps(hi + i));
        __m256 mant = round_mantissa_ps(_mm256_mul_ps(xv, _mm256_loadu_ps(scale + i)), round);
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_mul_ps(mant, _mm256_loadu_ps(inv_scale + i)), zero));
    }
    if (i < n) scalar_table_f32().quantize_elems(x + i, y + i, n - i, scale + i, inv_scale + i,
                                                 lo + i, hi + i, round);
}

} // namespace avx2

const Table<float>& avx2_table_f32() {
    static const Table<float> t = [] {
        Table<float> t = scalar_table_f32();
        t.matmul_acc = &avx2::matmul_acc_f32;
        t.relu_fwd = &avx2::relu_fwd_f32;
        t.relu_bwd = &avx2::relu_bwd_f32;
        t.hard_tanh_fwd = &avx2::hard_tanh_fwd_f32;
        t.hard_tanh_bwd = &avx2::hard_tanh_bwd_f32;
        t.adam_update = &avx2::adam_update_f32;
        t.quantize_uniform = &avx2::quantize_uniform_f32;
        t.quantize_elems = &avx2::quantize_elems_f32;
        return t;
    }();
    return t;
}

const Table<double>& avx2_table_f64() {
    static const Table<double> t = [] {
        Table<double> t = scalar_table_f64();
        t.matmul_acc = &avx2::matmul_acc_f64;
        return t;
    }();
    return t;
}

} // namespace pqforge::kernels

#endif // x86_64
