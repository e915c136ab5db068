#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pqforge/layers.hpp"

namespace pqforge {

/// Fixed-point target of one requantization step in the integer engine.
struct DeployedQuant {
    int keep_negative = 1;
    int fractional_bits = 0; // target exponent is -fractional_bits
    int mag_bits = 0;        // i + f
    RoundMode round = RoundMode::RND;
    OverflowMode overflow = OverflowMode::SAT;
};

/// One step of the deployed data path.
struct DeployedLayer {
    LayerKind kind = LayerKind::dense;
    std::string name;

    // dense
    size_t in_features = 0, out_features = 0;
    std::vector<int64_t> w_mant; // [I,O]
    std::vector<int> w_exp;      // per weight
    std::vector<int> w_bits;     // declared width per weight
    std::vector<uint8_t> mask;
    std::vector<int64_t> b_mant;
    int b_exp = 0;
    std::vector<double> in_bits; // per input feature, for EBOPs
    int acc_width = 0;           // b_w + b_x + ceil(log2 fan_in)

    bool has_in_quant = false;
    DeployedQuant in_q;
    bool has_out_quant = false;
    DeployedQuant out_q;

    // activation
    Activation act = Activation::linear;
    int shift_m = 0; // learned relu multiplier exponent
};

/// Integer-mantissa model: immutable, inference is pure.
struct DeployedModel {
    std::vector<size_t> input_shape;
    size_t output_dim = 0;
    std::vector<DeployedLayer> layers;
    // optional per-feature normalization carried for raw CSV inference
    std::vector<double> norm_mean, norm_std;
};

/// Bit-exact integer inference: quantize the input per the first spec, then
/// per layer run integer MACs with exponent alignment and requantize with
/// the configured rounding/overflow in pure integer arithmetic.
/// Returns final-layer scores as exact doubles (mantissa * 2^exponent).
Tensor<double> int_infer(const DeployedModel& m, const Tensor<double>& x_raw);

/// argmax over int_infer scores.
std::vector<int> int_predict(const DeployedModel& m, const Tensor<double>& x_raw);

/// EBOPs recomputed from the bundle contents.
double deployed_ebops(const DeployedModel& m);

/// Versioned, checksummed JSON container (mantissas as base-16 strings).
void export_bundle(const DeployedModel& m, const std::string& path);
DeployedModel import_bundle(const std::string& path);
std::string bundle_to_json(const DeployedModel& m);
DeployedModel bundle_from_json(const std::string& text);
uint64_t bundle_hash(const DeployedModel& m);

/// Integer requantization core: n * 2^e_cur re-expressed on the target grid.
int64_t requantize_int(int64_t n, int e_cur, const DeployedQuant& q);

/// Static walk of the deployed data path: the input must hit a quantizer
/// before the first MAC, hard_tanh needs a sub-unit grid step, and every
/// requantization shift stays within the exact integer range.
void validate_data_path(const DeployedModel& m);

namespace detail {

template <class T>
DeployedQuant deployed_quant(const FixedPointSpec& s) {
    DeployedQuant q;
    q.keep_negative = s.keep_negative;
    q.fractional_bits = s.fractional_bits;
    q.mag_bits = s.mag_bits();
    q.round = s.round_mode;
    q.overflow = s.overflow_mode;
    return q;
}

} // namespace detail

/// Bake a trained model into integer mantissas plus exponents. Requires hard
/// masks (soft masks must have been rounded in fine-tuning), fixed-point
/// data quantizers, and hard activations; refuses accumulator widths beyond
/// the exact-in-double bound of 52 bits.
template <class T>
DeployedModel finalize_model(ModelGraph<T>& model) {
    DeployedModel out;
    out.input_shape = model.input_shape;
    out.output_dim = model.output_dim;
    out.norm_mean = model.norm_mean;
    out.norm_std = model.norm_std;

    for (auto& l : model.layers) {
        if (l.mask && !l.mask->hard)
            throw StateError("finalize: layer \"" + l.name +
                             "\" still has a soft mask; round it in fine-tuning first");
        switch (l.kind) {
            case LayerKind::conv2d:
            case LayerKind::avgpool2d:
            case LayerKind::batchnorm:
                throw StateError(std::string("finalize: ") + to_string(l.kind) +
                                 " layers are not supported by the integer engine (layer \"" +
                                 l.name + "\")");
            default:
                break;
        }
        if (l.kind == LayerKind::activation && l.act == Activation::tanh_fn)
            throw StateError("finalize: real tanh cannot run bit-exactly; use hard_tanh (layer \"" +
                             l.name + "\")");
        if (l.kind == LayerKind::dense && l.use_hgq && l.in_hgq.initialized())
            throw StateError("finalize: learned-width data quantizers are not deployable; use a "
                             "fixed input spec (layer \"" + l.name + "\")");
    }

    for (auto& l : model.layers) {
        DeployedLayer d;
        d.kind = l.kind;
        d.name = l.name;
        if (l.kind == LayerKind::flatten) {
            out.layers.push_back(std::move(d));
            continue;
        }
        if (l.kind == LayerKind::activation) {
            d.act = l.act;
            d.has_in_quant = l.in_quant.enabled;
            if (d.has_in_quant) d.in_q = detail::deployed_quant<T>(l.in_quant.spec);
            d.has_out_quant = l.out_quant.enabled;
            if (d.has_out_quant) d.out_q = detail::deployed_quant<T>(l.out_quant.spec);
            d.shift_m = 0;
            if (l.use_relu_multiplier && l.relu_mult.var && d.has_out_quant)
                d.shift_m = static_cast<int>(std::llround(static_cast<double>(l.relu_mult.var->val[0])));
            out.layers.push_back(std::move(d));
            continue;
        }

        // dense
        if (!l.bias_quant.enabled || (!l.weight_quant.enabled && !l.use_hgq))
            throw StateError("finalize: layer \"" + l.name +
                             "\" must quantize weights and biases for integer deployment");
        const size_t I = l.in_features, O = l.out_features;
        const size_t n = I * O;
        d.in_features = I;
        d.out_features = O;
        d.has_in_quant = l.in_quant.enabled;
        if (d.has_in_quant) d.in_q = detail::deployed_quant<T>(l.in_quant.spec);
        d.has_out_quant = l.out_quant.enabled;
        if (d.has_out_quant) d.out_q = detail::deployed_quant<T>(l.out_quant.spec);

        // weight path exactly as in the training forward
        Tensor<T> w = l.weight.var->val;
        auto mask = effective_mask(l);
        d.mask = mask;
        auto apply_hard_mask = [&](Tensor<T>& t) {
            if (!l.mask) return;
            for (size_t e = 0; e < n; ++e)
                if (l.mask->hard_mask[e] == T(0)) t[e] = T(0);
        };

        d.w_mant.resize(n);
        d.w_exp.resize(n);
        d.w_bits.resize(n);
        int max_f = 0, max_i = 0;
        if (l.use_hgq) {
            if (l.pruning_first) apply_hard_mask(w);
            Tape<T> scratch;
            NoGradGuard<T> ng(scratch);
            auto wq = hgq_forward(scratch, make_var(w), l.weight_hgq, false);
            if (!l.pruning_first)
                for (size_t e = 0; e < n; ++e)
                    if (l.mask && l.mask->hard_mask[e] == T(0)) wq->val[e] = T(0);
            for (size_t e = 0; e < n; ++e) {
                const int f = l.weight_hgq.last_f_eff[e];
                const int i = l.weight_hgq.last_i[e];
                const int width = l.weight_hgq.keep_negative + i + f;
                d.w_exp[e] = -f;
                d.w_bits[e] = std::max(0, width);
                if (width <= 0 || (l.mask && l.mask->hard_mask[e] == T(0))) {
                    d.w_mant[e] = 0;
                    if (width <= 0) d.mask[e] = 0;
                } else {
                    d.w_mant[e] = std::llround(std::ldexp(static_cast<double>(wq->val[e]), f));
                }
                max_f = std::max(max_f, f);
                max_i = std::max(max_i, i);
            }
        } else {
            Tensor<T> wq;
            std::vector<int> derived;
            if (l.pruning_first) {
                apply_hard_mask(w);
                wq = quantize_grouped_plain(w, l.weight_quant.spec, l.weight_quant.granularity,
                                            GroupAxis::columns, &derived);
            } else {
                wq = quantize_grouped_plain(w, l.weight_quant.spec, l.weight_quant.granularity,
                                            GroupAxis::columns, &derived);
                apply_hard_mask(wq);
            }
            l.weight_quant.derived_i = derived;
            const int k = l.weight_quant.spec.keep_negative;
            const int total = l.weight_quant.total_bits();
            for (size_t e = 0; e < n; ++e) {
                size_t g = 0;
                if (l.weight_quant.granularity == Granularity::per_weight)
                    g = e;
                else if (l.weight_quant.granularity == Granularity::per_channel)
                    g = e % O;
                FixedPointSpec gs = l.weight_quant.group_spec(g);
                d.w_exp[e] = -gs.fractional_bits;
                d.w_bits[e] = k + gs.integer_bits + gs.fractional_bits;
                d.w_mant[e] = std::llround(std::ldexp(static_cast<double>(wq[e]), gs.fractional_bits));
                max_f = std::max(max_f, gs.fractional_bits);
                max_i = std::max(max_i, gs.integer_bits);
            }
            (void)total;
        }

        // mantissa fits its declared width
        for (size_t e = 0; e < n; ++e) {
            const int width = std::max(1, d.w_bits[e]);
            const int64_t bound = int64_t(1) << std::min(62, width);
            if (std::llabs(d.w_mant[e]) > bound)
                throw StateError("finalize: mantissa exceeds its declared width in layer \"" + l.name + "\"");
        }

        // bias at the weight quantizer's spec, per-tensor
        Tensor<T> bq = quantize_fixed(l.bias.var->val, l.bias_quant.spec);
        if (l.mask && !l.mask->unit_mask.empty())
            for (size_t o = 0; o < O; ++o)
                if (!l.mask->unit_mask[o]) bq[o] = T(0);
        d.b_mant.resize(O);
        d.b_exp = -l.bias_quant.spec.fractional_bits;
        for (size_t o = 0; o < O; ++o)
            d.b_mant[o] = std::llround(std::ldexp(static_cast<double>(bq[o]), l.bias_quant.spec.fractional_bits));

        // input bits for EBOPs mirror the training-side recording
        d.in_bits.assign(I, static_cast<double>(l.in_quant.spec.width()));

        // accumulator width: b_w + b_x + ceil(log2 fan_in)
        const int b_w = (l.use_hgq ? 1 : l.weight_quant.spec.keep_negative) + max_i + max_f;
        const int b_x = l.in_quant.spec.width();
        int log_fanin = 0;
        while ((size_t(1) << log_fanin) < I) ++log_fanin;
        d.acc_width = b_w + b_x + log_fanin;
        if (d.acc_width > 52)
            throw StateError(format("finalize: accumulator width %d exceeds the exact-in-double "
                                    "bound of 52 bits in layer \"%s\"",
                                    d.acc_width, l.name.c_str()));
        out.layers.push_back(std::move(d));
    }
    validate_data_path(out);
    return out;
}

} // namespace pqforge
