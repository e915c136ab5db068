#pragma once

#include <cstddef>
#include <string>

#include "pqforge/fixed_point.hpp"

namespace pqforge::kernels {

/// Runtime-selected kernel backend. The scalar kernels are the reference
/// semantics; SIMD variants must produce bitwise-identical results (they
/// keep per-element accumulation order and avoid fused multiply-add).
enum class Backend { scalar, avx2 };

const char* backend_name(Backend b);
bool backend_supported(Backend b);

/// Active backend: best supported one, overridable via PQFORGE_KERNEL=scalar|avx2.
Backend active_backend();
void set_backend(Backend b); // tests and benchmarks

/// Adam step constants shared by every element of one update.
template <class T>
struct AdamParams {
    T beta1;
    T beta2;
    T eps;
    T lr;
    T inv_bias1; // 1/(1 - beta1^t)
    T inv_bias2; // 1/(1 - beta2^t)
};

/// Uniform (single-group) quantizer constants. Bounds are in value domain;
/// SAT pre-clamps so the scaled product never overflows the float range.
template <class T>
struct QuantParams {
    T scale;     // 2^f
    T inv_scale; // 2^-f
    T lo;        // value-domain clamp used by SAT/SAT_SYM
    T hi;
    RoundMode round;
    OverflowMode overflow;
    int mag_bits; // i+f, WRAP modulus
    bool keep_negative;
};

template <class T>
QuantParams<T> make_quant_params(const FixedPointSpec& spec) {
    QuantParams<T> p;
    p.scale = static_cast<T>(std::ldexp(1.0, spec.fractional_bits));
    p.inv_scale = static_cast<T>(std::ldexp(1.0, -spec.fractional_bits));
    p.lo = static_cast<T>(spec.clamp_lo());
    p.hi = static_cast<T>(spec.clamp_hi());
    p.round = spec.round_mode;
    p.overflow = spec.overflow_mode;
    p.mag_bits = spec.mag_bits();
    p.keep_negative = spec.keep_negative != 0;
    return p;
}

template <class T>
struct Table {
    // c[M,N] += a[M,K] * b[K,N]; per-element accumulation in ascending k.
    void (*matmul_acc)(const T* a, const T* b, T* c, size_t M, size_t K, size_t N);
    void (*relu_fwd)(const T* x, T* y, size_t n);
    void (*relu_bwd)(const T* x, const T* gy, T* gx, size_t n); // gx += gy * 1[x>0]
    void (*hard_tanh_fwd)(const T* x, T* y, size_t n);
    void (*hard_tanh_bwd)(const T* x, const T* gy, T* gx, size_t n); // gx += gy * 1[-1<x<1]
    void (*adam_update)(T* w, const T* g, T* m, T* v, size_t n, const AdamParams<T>& p);
    // y = quantize(x) with one spec for the whole span
    void (*quantize_uniform)(const T* x, T* y, size_t n, const QuantParams<T>& p);
    // y = quantize(x) with per-element scale/bounds (grouped SAT-family only)
    void (*quantize_elems)(const T* x, T* y, size_t n, const T* scale, const T* inv_scale,
                           const T* lo, const T* hi, RoundMode round);
};

template <class T>
const Table<T>& table_for(Backend b);

/// Kernel table of the active backend.
template <class T>
inline const Table<T>& table() {
    return table_for<T>(active_backend());
}

} // namespace pqforge::kernels
