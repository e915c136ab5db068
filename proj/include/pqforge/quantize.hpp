#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "pqforge/autodiff.hpp"
#include "pqforge/fixed_point.hpp"
#include "pqforge/kernels.hpp"

namespace pqforge {

enum class Granularity { per_tensor, per_channel, per_weight };

inline const char* to_string(Granularity g) {
    switch (g) {
        case Granularity::per_tensor: return "per_tensor";
        case Granularity::per_channel: return "per_channel";
        case Granularity::per_weight: return "per_weight";
    }
    return "?";
}

inline Granularity parse_granularity(const std::string& s) {
    if (s == "per_tensor") return Granularity::per_tensor;
    if (s == "per_channel") return Granularity::per_channel;
    if (s == "per_weight") return Granularity::per_weight;
    throw ConfigError("unknown granularity \"" + s + "\"");
}

/// Which axis of a 2-D weight forms a channel group: dense weights [I,O]
/// group by output column, reshaped conv kernels [Cout,K] group by row.
enum class GroupAxis { columns, rows };

/// Smallest i such that |x| <= 2^i - 2^-f with f = max(0, total - k - i),
/// so the max-magnitude value of a group never saturates. A zero group gets
/// i = 0. Exact powers of two bump up by one because 2^j > 2^j - 2^-f.
inline int derive_i_for(double maxabs, int total_bits, int k) {
    if (maxabs <= 0.0) return 0;
    int e = std::ilogb(maxabs); // floor(log2)
    int i = (maxabs == std::ldexp(1.0, e)) ? e : e + 1;
    for (;;) {
        const int f = std::max(0, total_bits - k - i);
        if (maxabs <= std::ldexp(1.0, i) - std::ldexp(1.0, -f)) return i;
        ++i;
    }
}

/// Per-group integer bits matching the dynamic range of w.
template <class T>
std::vector<int> derive_integer_bits(const Tensor<T>& w, Granularity g, int total_bits, int k,
                                     GroupAxis axis = GroupAxis::columns) {
    if (total_bits < k + 1) throw ConfigError("derive_integer_bits: total width must be at least k+1");
    if (g == Granularity::per_tensor) {
        double m = 0;
        for (size_t i = 0; i < w.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(w[i])));
        return {derive_i_for(m, total_bits, k)};
    }
    if (g == Granularity::per_weight) {
        std::vector<int> out(w.size());
        for (size_t i = 0; i < w.size(); ++i)
            out[i] = derive_i_for(std::fabs(static_cast<double>(w[i])), total_bits, k);
        return out;
    }
    if (w.ndim() != 2) throw ShapeError("per_channel derivation needs a 2-D tensor, got " + shape_str(w.shape()));
    const size_t R = w.dim(0), C = w.dim(1);
    const size_t groups = axis == GroupAxis::columns ? C : R;
    std::vector<double> maxabs(groups, 0.0);
    for (size_t r = 0; r < R; ++r)
        for (size_t c = 0; c < C; ++c) {
            const size_t grp = axis == GroupAxis::columns ? c : r;
            maxabs[grp] = std::max(maxabs[grp], std::fabs(static_cast<double>(w[r * C + c])));
        }
    std::vector<int> out(groups);
    for (size_t gi = 0; gi < groups; ++gi) out[gi] = derive_i_for(maxabs[gi], total_bits, k);
    return out;
}

/// Fixed-point quantizer with its training-time state. For per_channel and
/// per_weight granularities the configured width k+i+f is the fixed total
/// budget; integer bits are re-derived from the weights every forward pass
/// and the fractional bits take the remainder (clamped to >= 0).
template <class T>
struct QuantizerState {
    FixedPointSpec spec;
    Granularity granularity = Granularity::per_tensor;
    std::vector<int> derived_i; // last derivation, per group
    bool enabled = true;
    size_t last_clip_count = 0; // grouped weight path only

    int total_bits() const { return spec.width(); }

    /// Spec actually applied to group g after the last derivation.
    FixedPointSpec group_spec(size_t g) const {
        if (granularity == Granularity::per_tensor || derived_i.empty()) return spec;
        FixedPointSpec s = spec;
        s.integer_bits = derived_i[g];
        s.fractional_bits = std::max(0, total_bits() - spec.keep_negative - derived_i[g]);
        return s;
    }
};

template <class T>
void check_finite(const Tensor<T>& x, const char* where) {
    for (size_t i = 0; i < x.size(); ++i)
        if (std::isnan(static_cast<double>(x[i]))) throw DataError(std::string(where) + ": NaN input");
}

/// quantize_fixed over a tensor with a single spec (no gradient).
template <class T>
Tensor<T> quantize_fixed(const Tensor<T>& x, const FixedPointSpec& spec) {
    check_finite(x, "quantize_fixed");
    Tensor<T> y(x.shape());
    auto p = kernels::make_quant_params<T>(spec);
    kernels::table<T>().quantize_uniform(x.data(), y.data(), x.size(), p);
    return y;
}

/// Grouped quantization without gradient tracking: derives per-group integer
/// bits exactly like quantizer_forward and returns the quantized tensor
/// (per-group i written into derived_i_out when given).
template <class T>
Tensor<T> quantize_grouped_plain(const Tensor<T>& x, const FixedPointSpec& spec, Granularity g,
                                 GroupAxis axis = GroupAxis::columns,
                                 std::vector<int>* derived_i_out = nullptr) {
    if (g == Granularity::per_tensor) {
        if (derived_i_out) *derived_i_out = {spec.integer_bits};
        return quantize_fixed(x, spec);
    }
    check_finite(x, "quantize_grouped_plain");
    QuantizerState<T> st;
    st.spec = spec;
    st.granularity = g;
    st.derived_i = derive_integer_bits(x, g, spec.width(), spec.keep_negative, axis);
    if (derived_i_out) *derived_i_out = st.derived_i;
    Tensor<T> y(x.shape());
    const size_t n = x.size();
    const size_t C = x.ndim() == 2 ? x.dim(1) : 1;
    for (size_t e = 0; e < n; ++e) {
        const size_t grp = g == Granularity::per_weight ? e : (axis == GroupAxis::columns ? e % C : e / C);
        y[e] = static_cast<T>(quantize_value(static_cast<double>(x[e]), st.group_spec(grp)));
    }
    return y;
}

namespace detail {

/// Materialized per-element quantization parameters for grouped modes.
template <class T>
struct GroupedParams {
    std::vector<T> scale, inv_scale, lo, hi;
    bool sat_family;
};

template <class T>
GroupedParams<T> grouped_params(const QuantizerState<T>& st, const Shape& shape, GroupAxis axis) {
    const size_t n = shape_numel(shape);
    GroupedParams<T> p;
    p.sat_family = st.spec.overflow_mode == OverflowMode::SAT ||
                   st.spec.overflow_mode == OverflowMode::SAT_SYM;
    p.scale.resize(n);
    p.inv_scale.resize(n);
    p.lo.resize(n);
    p.hi.resize(n);
    const size_t C = shape.size() == 2 ? shape[1] : 1;
    for (size_t e = 0; e < n; ++e) {
        size_t g;
        if (st.granularity == Granularity::per_weight)
            g = e;
        else
            g = axis == GroupAxis::columns ? e % C : e / C;
        FixedPointSpec s = st.group_spec(g);
        p.scale[e] = static_cast<T>(std::ldexp(1.0, s.fractional_bits));
        p.inv_scale[e] = static_cast<T>(std::ldexp(1.0, -s.fractional_bits));
        p.lo[e] = static_cast<T>(s.clamp_lo());
        p.hi[e] = static_cast<T>(s.clamp_hi());
    }
    return p;
}

} // namespace detail

/// Quantization-aware-training forward: quantize on the forward pass, pass
/// the gradient through unchanged inside the representable range and zero it
/// outside (clipped straight-through estimator).
template <class T>
VarPtr<T> quantizer_forward(Tape<T>& tape, const VarPtr<T>& x, QuantizerState<T>& state,
                            GroupAxis axis = GroupAxis::columns) {
    if (!state.enabled) return x;
    check_finite(x->val, "quantizer_forward");
    const size_t n = x->val.size();
    Tensor<T> y(x->val.shape());

    if (state.granularity == Granularity::per_tensor) {
        auto p = kernels::make_quant_params<T>(state.spec);
        kernels::table<T>().quantize_uniform(x->val.data(), y.data(), n, p);
        const T lo = static_cast<T>(state.spec.min_value());
        const T hi = static_cast<T>(state.spec.max_value());
        auto out = make_var(std::move(y), x->requires_grad && tape.recording());
        if (out->requires_grad) {
            tape.record([x, out, lo, hi, n] {
                if (!out->has_grad()) return;
                x->ensure_grad();
                for (size_t i = 0; i < n; ++i)
                    if (x->val[i] >= lo && x->val[i] <= hi) x->grad[i] += out->grad[i];
            });
        }
        return out;
    }

    // grouped: derive integer bits from the current values
    state.derived_i = derive_integer_bits(x->val, state.granularity, state.total_bits(),
                                          state.spec.keep_negative, axis);
    auto params = std::make_shared<detail::GroupedParams<T>>(
        detail::grouped_params(state, x->val.shape(), axis));
    state.last_clip_count = 0;
    for (size_t e = 0; e < n; ++e)
        if (x->val[e] < params->lo[e] || x->val[e] > params->hi[e]) ++state.last_clip_count;

    if (params->sat_family) {
        kernels::table<T>().quantize_elems(x->val.data(), y.data(), n, params->scale.data(),
                                           params->inv_scale.data(), params->lo.data(),
                                           params->hi.data(), state.spec.round_mode);
    } else {
        const size_t C = x->val.ndim() == 2 ? x->val.dim(1) : 1;
        for (size_t e = 0; e < n; ++e) {
            size_t g = state.granularity == Granularity::per_weight
                           ? e
                           : (axis == GroupAxis::columns ? e % C : e / C);
            y[e] = static_cast<T>(quantize_value(static_cast<double>(x->val[e]), state.group_spec(g)));
        }
    }

    auto out = make_var(std::move(y), x->requires_grad && tape.recording());
    if (out->requires_grad) {
        // STE range uses the asymmetric representable bounds per group
        auto range = params;
        tape.record([x, out, range, n] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                if (x->val[i] >= range->lo[i] && x->val[i] <= range->hi[i]) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// High-granularity quantization: a learnable fractional bit-width per weight
// (per feature for activations). Effective width k + i + round(f_cont); a
// value whose effective width is <= 0 is pruned to an exact zero.

template <class T>
struct HGQState {
    VarPtr<T> f_cont; // learnable; weight-shaped, or [features] when per_feature
    int keep_negative = 1;
    RoundMode round_mode = RoundMode::RND;
    bool per_feature = false;     // activations: one entry per last-axis feature
    Tensor<T> running_maxabs;     // per-feature dynamic range (activations)
    T range_momentum = T(0.9);
    // last forward, for EBOPs and deployment
    std::vector<int> last_i;
    std::vector<int> last_f_eff;

    bool initialized() const { return static_cast<bool>(f_cont); }
};

template <class T>
void hgq_init(HGQState<T>& st, const Shape& target_shape, T f_init, bool per_feature, int k,
              RoundMode rm) {
    st.per_feature = per_feature;
    st.keep_negative = k;
    st.round_mode = rm;
    Shape s = per_feature ? Shape{target_shape.back()} : target_shape;
    st.f_cont = make_var(Tensor<T>(s, f_init), true);
    if (per_feature) st.running_maxabs = Tensor<T>(Shape{target_shape.back()});
}

/// Forward pass of the HGQ quantizer. Gradient flows to the input via the
/// straight-through estimator and to f_cont via the quantization-residual
/// surrogate d q / d f = ln2 * (x - q).
template <class T>
VarPtr<T> hgq_forward(Tape<T>& tape, const VarPtr<T>& x, HGQState<T>& st, bool training) {
    if (!st.initialized()) throw StateError("hgq_forward: f_cont not initialized");
    check_finite(x->val, "hgq_forward");
    const size_t n = x->val.size();
    const size_t F = st.per_feature ? st.f_cont->val.size() : 0;
    if (!st.per_feature && st.f_cont->val.size() != n)
        throw ShapeError("hgq_forward: f_cont shape mismatch");
    if (st.per_feature && n % F != 0)
        throw ShapeError("hgq_forward: input not divisible into features");

    if (st.per_feature && training) {
        // update per-feature dynamic range before deriving i
        for (size_t f = 0; f < F; ++f) {
            T mx = T(0);
            for (size_t e = f; e < n; e += F) mx = std::max(mx, static_cast<T>(std::fabs(x->val[e])));
            st.running_maxabs[f] = st.running_maxabs[f] == T(0)
                                       ? mx
                                       : std::max(mx, st.range_momentum * st.running_maxabs[f]);
        }
    }

    st.last_i.assign(st.per_feature ? F : n, 0);
    st.last_f_eff.assign(st.per_feature ? F : n, 0);
    Tensor<T> y(x->val.shape());
    const int k = st.keep_negative;

    // Dynamic-range integer bits. The pruning decision k + i + f <= 0 uses
    // the plain ceil(log2) value; the no-clip bump only applies to surviving
    // entries (it terminates in one step once the width is positive).
    struct EntrySpec {
        FixedPointSpec spec;
        bool pruned;
    };
    auto entry_spec = [&](size_t idx, double maxabs) {
        const int f_eff = static_cast<int>(std::llround(static_cast<double>(st.f_cont->val[idx])));
        int i = 0;
        if (maxabs > 0.0) {
            int e = std::ilogb(maxabs);
            i = (maxabs == std::ldexp(1.0, e)) ? e : e + 1;
        }
        EntrySpec es;
        es.pruned = k + i + f_eff <= 0;
        if (!es.pruned && maxabs > 0.0)
            while (maxabs > std::ldexp(1.0, i) - std::ldexp(1.0, -f_eff)) ++i;
        st.last_i[idx] = i;
        st.last_f_eff[idx] = f_eff;
        es.spec.keep_negative = k;
        es.spec.integer_bits = i;
        es.spec.fractional_bits = f_eff;
        es.spec.round_mode = st.round_mode;
        es.spec.overflow_mode = OverflowMode::SAT;
        return es;
    };

    auto pruned = std::make_shared<std::vector<uint8_t>>(st.per_feature ? F : n, uint8_t(0));
    if (!st.per_feature) {
        for (size_t e = 0; e < n; ++e) {
            const double ax = std::fabs(static_cast<double>(x->val[e]));
            EntrySpec es = entry_spec(e, ax);
            if (es.pruned) {
                (*pruned)[e] = 1;
                y[e] = T(0);
            } else {
                y[e] = static_cast<T>(quantize_value(static_cast<double>(x->val[e]), es.spec));
            }
        }
    } else {
        for (size_t f = 0; f < F; ++f) {
            EntrySpec es = entry_spec(f, static_cast<double>(st.running_maxabs[f]));
            if (es.pruned) (*pruned)[f] = 1;
            for (size_t e = f; e < n; e += F)
                y[e] = es.pruned
                           ? T(0)
                           : static_cast<T>(quantize_value(static_cast<double>(x->val[e]), es.spec));
        }
    }

    bool rg = (x->requires_grad || st.f_cont->requires_grad) && tape.recording();
    auto out = make_var(std::move(y), rg);
    if (out->requires_grad) {
        auto fvar = st.f_cont;
        const bool per_feature = st.per_feature;
        tape.record([x, out, fvar, pruned, per_feature, F, n] {
            if (!out->has_grad()) return;
            const T ln2 = static_cast<T>(0.6931471805599453);
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t e = 0; e < n; ++e) {
                    const size_t idx = per_feature ? e % F : e;
                    if (!(*pruned)[idx]) x->grad[e] += out->grad[e];
                }
            }
            if (fvar->requires_grad) {
                fvar->ensure_grad();
                for (size_t e = 0; e < n; ++e) {
                    const size_t idx = per_feature ? e % F : e;
                    fvar->grad[idx] += out->grad[e] * ln2 * (x->val[e] - out->val[e]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// EBOPs: sum of weight-bits x input-bits over unpruned multiplications.

/// Discrete EBOPs of one dense layer. mask and weight_bits are [I,O],
/// input_bits is [I].
inline double ebops_dense(const std::vector<uint8_t>& mask, const std::vector<double>& weight_bits,
                          const std::vector<double>& input_bits, size_t I, size_t O) {
    if (mask.size() != I * O || weight_bits.size() != I * O || input_bits.size() != I)
        throw ShapeError(format("ebops_dense: mask %zu, weight_bits %zu, input_bits %zu for I=%zu O=%zu",
                                mask.size(), weight_bits.size(), input_bits.size(), I, O));
    double total = 0.0;
    for (size_t i = 0; i < I; ++i)
        for (size_t o = 0; o < O; ++o)
            if (mask[i * O + o]) total += weight_bits[i * O + o] * input_bits[i];
    return total;
}

/// Continuous EBOPs node for the HGQ loss over one dense layer:
///   E = sum_{i,o} mask[i,o] * relu(cw[i,o] + fw[i,o]) * Bx[i]
/// where Bx[i] = relu(cx[i] + fx[i]) when fx is learnable, else bx_fixed[i].
/// cw/cx carry the non-learnable part of the width (k + derived i).
template <class T>
VarPtr<T> ebops_dense_cont(Tape<T>& tape, const VarPtr<T>& fw, const std::vector<T>& cw,
                           const std::vector<uint8_t>& mask, size_t I, size_t O,
                           const VarPtr<T>& fx, const std::vector<T>& cx,
                           const std::vector<T>& bx_fixed) {
    if (fw->val.size() != I * O || mask.size() != I * O)
        throw ShapeError("ebops_dense_cont: weight sizes mismatch");
    const bool learnable_x = static_cast<bool>(fx);
    std::vector<T> bx(I);
    for (size_t i = 0; i < I; ++i) {
        if (learnable_x)
            bx[i] = std::max(cx[i] + fx->val[i], T(0));
        else
            bx[i] = bx_fixed[i];
    }
    T total = T(0);
    for (size_t i = 0; i < I; ++i)
        for (size_t o = 0; o < O; ++o) {
            const size_t e = i * O + o;
            if (!mask[e]) continue;
            total += std::max(cw[e] + fw->val[e], T(0)) * bx[i];
        }
    Tensor<T> out_t({1});
    out_t[0] = total;
    bool rg = (fw->requires_grad || (learnable_x && fx->requires_grad)) && tape.recording();
    auto out = make_var(std::move(out_t), rg);
    if (out->requires_grad) {
        auto bx_sh = std::make_shared<std::vector<T>>(bx);
        auto cw_sh = std::make_shared<std::vector<T>>(cw);
        auto cx_sh = std::make_shared<std::vector<T>>(cx);
        auto mask_sh = std::make_shared<std::vector<uint8_t>>(mask);
        tape.record([fw, fx, out, bx_sh, cw_sh, cx_sh, mask_sh, I, O, learnable_x] {
            if (!out->has_grad()) return;
            const T up = out->grad[0];
            if (fw->requires_grad) {
                fw->ensure_grad();
                for (size_t i = 0; i < I; ++i)
                    for (size_t o = 0; o < O; ++o) {
                        const size_t e = i * O + o;
                        if (!(*mask_sh)[e]) continue;
                        if ((*cw_sh)[e] + fw->val[e] > T(0)) fw->grad[e] += up * (*bx_sh)[i];
                    }
            }
            if (learnable_x && fx->requires_grad) {
                fx->ensure_grad();
                for (size_t i = 0; i < I; ++i) {
                    if ((*bx_sh)[i] <= T(0)) continue;
                    T acc = T(0);
                    for (size_t o = 0; o < O; ++o) {
                        const size_t e = i * O + o;
                        if ((*mask_sh)[e]) acc += std::max((*cw_sh)[e] + fw->val[e], T(0));
                    }
                    fx->grad[i] += up * acc;
                }
            }
        });
    }
    return out;
}

/// L1 width regularizer node: sum over entries of max(c + f_cont, 0).
template <class T>
VarPtr<T> width_l1(Tape<T>& tape, const VarPtr<T>& f_cont, const std::vector<T>& c) {
    const size_t n = f_cont->val.size();
    if (c.size() != n) throw ShapeError("width_l1: constant part size mismatch");
    T total = T(0);
    for (size_t e = 0; e < n; ++e) total += std::max(c[e] + f_cont->val[e], T(0));
    Tensor<T> out_t({1});
    out_t[0] = total;
    auto out = make_var(std::move(out_t), f_cont->requires_grad && tape.recording());
    if (out->requires_grad) {
        auto c_sh = std::make_shared<std::vector<T>>(c);
        tape.record([f_cont, out, c_sh, n] {
            if (!out->has_grad()) return;
            f_cont->ensure_grad();
            for (size_t e = 0; e < n; ++e)
                if ((*c_sh)[e] + f_cont->val[e] > T(0)) f_cont->grad[e] += out->grad[0];
        });
    }
    return out;
}

} // namespace pqforge
