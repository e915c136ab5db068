#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pqforge/autodiff.hpp"
#include "pqforge/config.hpp"
#include "pqforge/pruning.hpp"
#include "pqforge/quantize.hpp"

namespace pqforge {

enum class LayerKind { dense, conv2d, batchnorm, avgpool2d, activation, flatten };

const char* to_string(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

/// Plain (framework-agnostic) model description: the input to layer
/// replacement. Weights are optional; absent weights are initialized.
struct LayerDesc {
    LayerKind kind = LayerKind::dense;
    std::string name;
    size_t units = 0;                                     // dense
    size_t in_channels = 0, out_channels = 0, kernel = 0; // conv2d
    size_t pool = 0;                                      // avgpool2d
    std::string act = "relu";                             // activation
    std::vector<double> weights;                          // row-major, optional
    std::vector<double> bias;                             // optional
};

struct ModelDesc {
    std::vector<size_t> input_shape; // [F] or [C,H,W]
    std::vector<LayerDesc> layers;
};

/// JSON topology file format (documented in docs/model_format.md).
ModelDesc load_model_desc(const std::string& path);
ModelDesc parse_model_desc(const std::string& json_text);
std::string dump_model_desc(const ModelDesc& d);

/// YAML template listing every prunable layer name under the pruning-disable
/// field and the layer-specific quantization field. Parses under load_config.
std::string template_layer_config(const std::vector<std::string>& prunable_names,
                                  const CompressionConfig& base);

/// Compression-aware layer: composes a pruning mask and input/weight/output
/// quantizers around the base operation. Forward order is fixed: quantize
/// input, mask weights, quantize masked weights, linear op, bias add,
/// quantize output (pruning_first=false swaps the two weight steps).
template <class T>
struct PQLayer {
    LayerKind kind = LayerKind::dense;
    std::string name;

    // dense: weight [I,O]; conv2d: kernel matrix [Cin*k*k, Cout]
    Parameter<T> weight, bias;
    size_t in_features = 0, out_features = 0;
    size_t in_channels = 0, out_channels = 0, kernel = 0;
    size_t pool = 0;
    Activation act = Activation::linear;

    // batchnorm
    Parameter<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    std::optional<MaskState<T>> mask;
    Parameter<T> prune_threshold_p; // autosparse / dst
    Parameter<T> prune_logits_p;    // cs

    QuantizerState<T> in_quant, weight_quant, bias_quant, out_quant;
    bool use_hgq = false;
    HGQState<T> weight_hgq, in_hgq;
    Parameter<T> hgq_weight_p, hgq_input_p;

    bool use_relu_multiplier = false;
    Parameter<T> relu_mult;

    bool pruning_first = true;

    // EBOPs inputs recorded by the last forward (dense/conv only)
    std::vector<double> last_weight_bits; // per weight
    std::vector<double> last_input_bits;  // per input feature
    std::vector<uint8_t> last_mask;       // per weight
    double ebops_positions = 1.0;         // conv: output positions per image

    // wanda / fisher calibration
    bool collect_input_norms = false;
    std::vector<double> calib_sq_sum; // per input feature
    size_t calib_rows = 0;

    bool has_weights() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
    bool prunable() const { return has_weights() && mask.has_value(); }
};

/// Labeled dataset split, fully materialized.
template <class T>
struct DataSplit {
    Tensor<T> X; // [N,F] or [N,C,H,W]
    std::vector<int> y;
    size_t size() const { return y.size(); }
};

/// Sequential compression-aware model. Confined to one worker at a time.
template <class T>
class ModelGraph {
public:
    std::vector<PQLayer<T>> layers;
    std::vector<size_t> input_shape;
    size_t output_dim = 0;

    Tape<T> tape;
    bool training_mode = true;   // batchnorm statistics, HGQ range updates
    bool pruning_active = false; // soft-mask paths participate in forward
    CompressionConfig config;
    ModelDesc desc; // topology-only copy (weights stripped), for checkpoints
    std::vector<double> norm_mean, norm_std; // dataset normalization, carried to deployment

    std::vector<Parameter<T>*> parameters();
    VarPtr<T> forward(const Tensor<T>& x);

    /// Loss-side regularizers: DST threshold term plus HGQ cost terms.
    /// Returns nullptr when no term applies.
    VarPtr<T> regularization();

    double ebops() const;
    std::vector<std::pair<std::string, double>> layer_sparsity();

    uint64_t weight_hash() const;
    std::vector<Tensor<T>> snapshot_weights() const;
    void restore_weights(const std::vector<Tensor<T>>& snap);

private:
    VarPtr<T> forward_layer(PQLayer<T>& l, VarPtr<T> x);
};

template <class T>
ModelGraph<T> replace_layers(const ModelDesc& desc, const CompressionConfig& config);

/// Binarized view of a layer's current mask (soft masks cut at their
/// method's decision point), used by EBOPs and reporting.
template <class T>
std::vector<uint8_t> effective_mask(const PQLayer<T>& l);

template <class T>
std::string template_layer_config(const ModelGraph<T>& g) {
    std::vector<std::string> names;
    for (const auto& l : g.layers)
        if (l.has_weights()) names.push_back(l.name);
    return template_layer_config(names, g.config);
}

// ---------------------------------------------------------------------------
// implementation

namespace detail {

/// ReLU with a learnable power-of-two input multiplier:
/// y = 2^-m * quantize(relu(2^m * x)). m rounds with a straight-through
/// estimator; its gradient uses the quantization-residual surrogate.
template <class T>
VarPtr<T> relu_shift_quantize(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& m_cont,
                              QuantizerState<T>& out_q) {
    const int m = static_cast<int>(std::llround(static_cast<double>(m_cont->val[0])));
    const T up_scale = static_cast<T>(std::ldexp(1.0, m));
    const T dn_scale = static_cast<T>(std::ldexp(1.0, -m));
    const size_t n = x->val.size();
    Tensor<T> y(x->val.shape());
    auto pre = std::make_shared<Tensor<T>>(x->val.shape()); // relu(x)
    {
        Tensor<T> scaled(x->val.shape());
        for (size_t e = 0; e < n; ++e) {
            (*pre)[e] = x->val[e] > T(0) ? x->val[e] : T(0);
            scaled[e] = (*pre)[e] * up_scale;
        }
        Tensor<T> q = quantize_fixed(scaled, out_q.spec);
        for (size_t e = 0; e < n; ++e) y[e] = q[e] * dn_scale;
    }
    bool rg = (x->requires_grad || m_cont->requires_grad) && tape.recording();
    auto out = make_var(std::move(y), rg);
    if (out->requires_grad) {
        const T hi = static_cast<T>(out_q.spec.max_value()) * dn_scale;
        const T lo = static_cast<T>(out_q.spec.min_value()) * dn_scale;
        tape.record([x, m_cont, out, pre, lo, hi, n] {
            if (!out->has_grad()) return;
            const T ln2 = static_cast<T>(0.6931471805599453);
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t e = 0; e < n; ++e)
                    if (x->val[e] > T(0) && (*pre)[e] >= lo && (*pre)[e] <= hi)
                        x->grad[e] += out->grad[e];
            }
            if (m_cont->requires_grad) {
                m_cont->ensure_grad();
                T acc = T(0);
                for (size_t e = 0; e < n; ++e) acc += out->grad[e] * ln2 * ((*pre)[e] - out->val[e]);
                m_cont->grad[0] += acc;
            }
        });
    }
    return out;
}

/// im2col for stride-1, no-padding convolution: x[B,C,H,W] ->
/// cols[B*OH*OW, C*k*k], recorded so gradients scatter back via col2im.
template <class T>
VarPtr<T> im2col_op(Tape<T>& tape, const VarPtr<T>& x, size_t k, size_t& OH, size_t& OW) {
    const size_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H < k || W < k)
        throw ShapeError(format("conv2d: kernel %zu does not fit input %zux%zu", k, H, W));
    OH = H - k + 1;
    OW = W - k + 1;
    Tensor<T> cols({B * OH * OW, C * k * k});
    size_t row = 0;
    for (size_t b = 0; b < B; ++b)
        for (size_t oh = 0; oh < OH; ++oh)
            for (size_t ow = 0; ow < OW; ++ow, ++row) {
                size_t col = 0;
                for (size_t c = 0; c < C; ++c)
                    for (size_t kh = 0; kh < k; ++kh)
                        for (size_t kw = 0; kw < k; ++kw, ++col)
                            cols[row * C * k * k + col] = x->val[((b * C + c) * H + oh + kh) * W + ow + kw];
            }
    auto out = make_var(std::move(cols), x->requires_grad && tape.recording());
    if (out->requires_grad) {
        const size_t oh_n = OH, ow_n = OW;
        tape.record([x, out, k, oh_n, ow_n, B, C, H, W] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            size_t row = 0;
            for (size_t b = 0; b < B; ++b)
                for (size_t oh = 0; oh < oh_n; ++oh)
                    for (size_t ow = 0; ow < ow_n; ++ow, ++row) {
                        size_t col = 0;
                        for (size_t c = 0; c < C; ++c)
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw, ++col)
                                    x->grad[((b * C + c) * H + oh + kh) * W + ow + kw] +=
                                        out->grad[row * C * k * k + col];
                    }
        });
    }
    return out;
}

/// [B*OH*OW, Cout] -> [B, Cout, OH, OW]
template <class T>
VarPtr<T> rows_to_nchw(Tape<T>& tape, const VarPtr<T>& rows, size_t B, size_t Cout, size_t OH,
                       size_t OW) {
    Tensor<T> y({B, Cout, OH, OW});
    size_t row = 0;
    for (size_t b = 0; b < B; ++b)
        for (size_t oh = 0; oh < OH; ++oh)
            for (size_t ow = 0; ow < OW; ++ow, ++row)
                for (size_t c = 0; c < Cout; ++c)
                    y[((b * Cout + c) * OH + oh) * OW + ow] = rows->val[row * Cout + c];
    auto out = make_var(std::move(y), rows->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([rows, out, B, Cout, OH, OW] {
            if (!out->has_grad()) return;
            rows->ensure_grad();
            size_t row = 0;
            for (size_t b = 0; b < B; ++b)
                for (size_t oh = 0; oh < OH; ++oh)
                    for (size_t ow = 0; ow < OW; ++ow, ++row)
                        for (size_t c = 0; c < Cout; ++c)
                            rows->grad[row * Cout + c] += out->grad[((b * Cout + c) * OH + oh) * OW + ow];
        });
    }
    return out;
}

/// Non-overlapping average pooling, full precision.
template <class T>
VarPtr<T> avgpool2d_op(Tape<T>& tape, const VarPtr<T>& x, size_t k) {
    const size_t B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H % k != 0 || W % k != 0)
        throw ShapeError(format("avgpool2d: window %zu does not tile input %zux%zu", k, H, W));
    const size_t OH = H / k, OW = W / k;
    Tensor<T> y({B, C, OH, OW});
    const T inv = T(1) / static_cast<T>(k * k);
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
            for (size_t oh = 0; oh < OH; ++oh)
                for (size_t ow = 0; ow < OW; ++ow) {
                    T acc = T(0);
                    for (size_t kh = 0; kh < k; ++kh)
                        for (size_t kw = 0; kw < k; ++kw)
                            acc += x->val[((b * C + c) * H + oh * k + kh) * W + ow * k + kw];
                    y[((b * C + c) * OH + oh) * OW + ow] = acc * inv;
                }
    auto out = make_var(std::move(y), x->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([x, out, k, B, C, H, W, OH, OW, inv] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t c = 0; c < C; ++c)
                    for (size_t oh = 0; oh < OH; ++oh)
                        for (size_t ow = 0; ow < OW; ++ow) {
                            const T g = out->grad[((b * C + c) * OH + oh) * OW + ow] * inv;
                            for (size_t kh = 0; kh < k; ++kh)
                                for (size_t kw = 0; kw < k; ++kw)
                                    x->grad[((b * C + c) * H + oh * k + kh) * W + ow * k + kw] += g;
                        }
        });
    }
    return out;
}

} // namespace detail

template <class T>
std::vector<uint8_t> effective_mask(const PQLayer<T>& l) {
    const size_t n = l.weight.var->val.size();
    std::vector<uint8_t> m(n, 1);
    if (!l.mask) return m;
    const MaskState<T>& st = *l.mask;
    if (st.hard) {
        for (size_t e = 0; e < n; ++e) m[e] = st.hard_mask[e] != T(0) ? 1 : 0;
        return m;
    }
    const Tensor<T>& w = l.weight.var->val;
    switch (st.method) {
        case PruneMethod::autosparse: {
            const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(st.threshold->val[0])));
            for (size_t e = 0; e < n; ++e) m[e] = std::fabs(static_cast<double>(w[e])) > sig ? 1 : 0;
            break;
        }
        case PruneMethod::cs:
            for (size_t e = 0; e < n; ++e) m[e] = st.s_logits->val[e] > T(0) ? 1 : 0;
            break;
        case PruneMethod::dst: {
            const double thr = std::max(0.0, static_cast<double>(st.threshold->val[0]));
            for (size_t e = 0; e < n; ++e) m[e] = std::fabs(static_cast<double>(w[e])) > thr ? 1 : 0;
            break;
        }
        case PruneMethod::pdp: {
            const double t2 = static_cast<double>(st.pdp_threshold) * static_cast<double>(st.pdp_threshold);
            for (size_t e = 0; e < n; ++e) {
                const double w2 = static_cast<double>(w[e]) * static_cast<double>(w[e]);
                m[e] = w2 >= t2 ? 1 : 0;
            }
            break;
        }
        case PruneMethod::mdmm: {
            const double cut = 0.881373587019543 * static_cast<double>(st.mdmm_eps);
            for (size_t e = 0; e < n; ++e) m[e] = std::fabs(static_cast<double>(w[e])) > cut ? 1 : 0;
            break;
        }
        default:
            break;
    }
    return m;
}

template <class T>
std::vector<Parameter<T>*> ModelGraph<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers) {
        if (l.has_weights()) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        if (l.kind == LayerKind::batchnorm) {
            out.push_back(&l.gamma);
            out.push_back(&l.beta);
        }
        if (l.prune_threshold_p.var) out.push_back(&l.prune_threshold_p);
        if (l.prune_logits_p.var) out.push_back(&l.prune_logits_p);
        if (l.hgq_weight_p.var) out.push_back(&l.hgq_weight_p);
        if (l.hgq_input_p.var) out.push_back(&l.hgq_input_p);
        if (l.relu_mult.var) out.push_back(&l.relu_mult);
    }
    return out;
}

template <class T>
VarPtr<T> ModelGraph<T>::forward(const Tensor<T>& x) {
    auto cur = make_var(x, false);
    for (auto& l : layers) cur = forward_layer(l, cur);
    return cur;
}

template <class T>
VarPtr<T> ModelGraph<T>::forward_layer(PQLayer<T>& l, VarPtr<T> x) {
    // input quantization
    if (l.in_quant.enabled && l.use_hgq && l.in_hgq.initialized() && x->val.ndim() == 2) {
        x = hgq_forward(tape, x, l.in_hgq, training_mode);
    } else if (l.in_quant.enabled) {
        x = quantizer_forward(tape, x, l.in_quant);
    }

    switch (l.kind) {
        case LayerKind::dense:
        case LayerKind::conv2d: {
            // weight path: mask and quantize in the configured order
            VarPtr<T> w = l.weight.var;
            auto apply_mask = [&](VarPtr<T> v) -> VarPtr<T> {
                if (!l.mask) return v;
                MaskState<T>& st = *l.mask;
                if (st.hard) return hadamard(tape, v, make_var(st.hard_mask, false));
                if (!pruning_active) return v;
                switch (st.method) {
                    case PruneMethod::autosparse:
                        return autosparse_apply(tape, v, st.threshold, st.alpha);
                    case PruneMethod::cs:
                        return hadamard(tape, v, cs_mask(tape, st.s_logits, st.beta));
                    case PruneMethod::dst:
                        return dst_apply(tape, v, st.threshold);
                    case PruneMethod::pdp:
                        return pdp_soft_apply(tape, v, static_cast<double>(st.pdp_threshold),
                                              config.pruning.pdp.temperature,
                                              st.granularity == PruneGranularity::structured);
                    case PruneMethod::mdmm: // constraint acts through gradients, not a forward mask
                    case PruneMethod::activation: // mask is hard from the first update
                    default:
                        return v;
                }
            };
            auto apply_quant = [&](VarPtr<T> v) -> VarPtr<T> {
                if (l.use_hgq && l.weight_hgq.initialized())
                    return hgq_forward(tape, v, l.weight_hgq, training_mode);
                if (l.weight_quant.enabled) return quantizer_forward(tape, v, l.weight_quant);
                return v;
            };
            VarPtr<T> wq = l.pruning_first ? apply_quant(apply_mask(w)) : apply_mask(apply_quant(w));

            VarPtr<T> b = l.bias.var;
            if (l.bias_quant.enabled) b = quantizer_forward(tape, b, l.bias_quant);
            if (l.mask && !l.mask->unit_mask.empty()) {
                Tensor<T> um({l.bias.var->val.size()});
                for (size_t o = 0; o < um.size(); ++o) um[o] = l.mask->unit_mask[o] ? T(1) : T(0);
                b = hadamard(tape, b, make_var(um, false));
            }

            // EBOPs inputs for cost estimation
            record_ebops_inputs(l, x);

            VarPtr<T> y;
            if (l.kind == LayerKind::dense) {
                if (l.collect_input_norms) {
                    const size_t B = x->val.dim(0), I = x->val.dim(1);
                    if (l.calib_sq_sum.size() != I) l.calib_sq_sum.assign(I, 0.0);
                    for (size_t r = 0; r < B; ++r)
                        for (size_t i = 0; i < I; ++i)
                            l.calib_sq_sum[i] += static_cast<double>(x->val[r * I + i]) *
                                                 static_cast<double>(x->val[r * I + i]);
                    l.calib_rows += B;
                }
                y = dense(tape, x, wq, b);
            } else {
                size_t OH = 0, OW = 0;
                auto cols = detail::im2col_op(tape, x, l.kernel, OH, OW);
                if (l.collect_input_norms) {
                    const size_t R = cols->val.dim(0), I = cols->val.dim(1);
                    if (l.calib_sq_sum.size() != I) l.calib_sq_sum.assign(I, 0.0);
                    for (size_t r = 0; r < R; ++r)
                        for (size_t i = 0; i < I; ++i)
                            l.calib_sq_sum[i] += static_cast<double>(cols->val[r * I + i]) *
                                                 static_cast<double>(cols->val[r * I + i]);
                    l.calib_rows += R;
                }
                auto rows = dense(tape, cols, wq, b);
                l.ebops_positions = static_cast<double>(OH * OW);
                y = detail::rows_to_nchw(tape, rows, x->val.dim(0), l.out_channels, OH, OW);
            }

            // activity statistics for activation pruning (nonzero after ReLU)
            if (l.mask && l.mask->method == PruneMethod::activation && pruning_active &&
                training_mode && l.kind == LayerKind::dense)
                ap_observe(*l.mask, y->val);

            if (l.out_quant.enabled) y = quantizer_forward(tape, y, l.out_quant);
            return y;
        }
        case LayerKind::activation: {
            VarPtr<T> y;
            if (l.act == Activation::relu && l.use_relu_multiplier && l.out_quant.enabled) {
                y = detail::relu_shift_quantize(tape, x, l.relu_mult.var, l.out_quant);
            } else {
                y = activation(tape, x, l.act);
                if (l.out_quant.enabled) y = quantizer_forward(tape, y, l.out_quant);
            }
            return y;
        }
        case LayerKind::batchnorm: {
            auto y = batchnorm(tape, x, l.gamma.var, l.beta.var, l.running_mean, l.running_var,
                               training_mode, static_cast<T>(config.training.bn_momentum), T(1e-5));
            if (l.out_quant.enabled) y = quantizer_forward(tape, y, l.out_quant);
            return y;
        }
        case LayerKind::avgpool2d: {
            auto y = detail::avgpool2d_op(tape, x, l.pool);
            if (l.out_quant.enabled) y = quantizer_forward(tape, y, l.out_quant);
            return y;
        }
        case LayerKind::flatten: {
            const size_t B = x->val.dim(0);
            return reshape(tape, x, {B, x->val.size() / B});
        }
    }
    throw StateError("unhandled layer kind");
}

template <class T>
void record_ebops_inputs(PQLayer<T>& l, const VarPtr<T>& x) {
    const size_t I = l.weight.var->val.dim(0);
    const size_t n = l.weight.var->val.size();
    l.last_mask = effective_mask(l);
    l.last_weight_bits.assign(n, 0.0);
    if (l.use_hgq && l.weight_hgq.initialized() && !l.weight_hgq.last_i.empty()) {
        for (size_t e = 0; e < n; ++e) {
            const double b = l.weight_hgq.keep_negative + l.weight_hgq.last_i[e] + l.weight_hgq.last_f_eff[e];
            l.last_weight_bits[e] = std::max(0.0, b);
            if (b <= 0) l.last_mask[e] = 0;
        }
    } else {
        const double b = l.weight_quant.enabled ? l.weight_quant.total_bits() : l.weight_quant.spec.width();
        for (size_t e = 0; e < n; ++e) l.last_weight_bits[e] = b;
    }
    l.last_input_bits.assign(I, 0.0);
    if (l.use_hgq && l.in_hgq.initialized() && !l.in_hgq.last_i.empty() &&
        l.in_hgq.last_i.size() == I) {
        for (size_t i = 0; i < I; ++i) {
            const double b = l.in_hgq.keep_negative + l.in_hgq.last_i[i] + l.in_hgq.last_f_eff[i];
            l.last_input_bits[i] = std::max(0.0, b);
        }
    } else {
        // unquantized inputs are costed at the configured data width
        const double b = l.in_quant.spec.width();
        for (size_t i = 0; i < I; ++i) l.last_input_bits[i] = b;
    }
    (void)x;
}

template <class T>
VarPtr<T> ModelGraph<T>::regularization() {
    VarPtr<T> total;
    auto add = [&](VarPtr<T> term) {
        if (!term) return;
        total = total ? vadd(tape, total, term) : term;
    };
    const auto& pc = config.pruning;
    if (pruning_active && pc.enable_pruning && pc.method == PruneMethod::dst) {
        for (auto& l : layers)
            if (l.prunable() && !l.mask->hard)
                add(dst_reg(tape, l.mask->threshold, static_cast<T>(pc.dst.alpha)));
    }
    const auto& qc = config.quantization;
    if (qc.use_high_granularity_quantization && (qc.hgq_beta != 0.0 || qc.hgq_gamma != 0.0)) {
        VarPtr<T> ebops_term, l1_term;
        for (auto& l : layers) {
            if (!l.has_weights() || !l.use_hgq || !l.weight_hgq.initialized()) continue;
            if (l.weight_hgq.last_i.empty()) continue; // no forward yet
            const size_t I = l.weight.var->val.dim(0), O = l.weight.var->val.dim(1);
            std::vector<T> cw(I * O);
            for (size_t e = 0; e < I * O; ++e)
                cw[e] = static_cast<T>(l.weight_hgq.keep_negative + l.weight_hgq.last_i[e]);
            auto mask = effective_mask(l);
            VarPtr<T> fx;
            std::vector<T> cx;
            std::vector<T> bx_fixed;
            if (l.in_hgq.initialized() && l.in_hgq.last_i.size() == I) {
                fx = l.in_hgq.f_cont;
                cx.resize(I);
                for (size_t i = 0; i < I; ++i)
                    cx[i] = static_cast<T>(l.in_hgq.keep_negative + l.in_hgq.last_i[i]);
            } else {
                bx_fixed.assign(I, static_cast<T>(l.in_quant.spec.width()));
            }
            auto e_layer = ebops_dense_cont(tape, l.weight_hgq.f_cont, cw, mask, I, O, fx, cx, bx_fixed);
            if (l.ebops_positions != 1.0)
                e_layer = vscale(tape, e_layer, static_cast<T>(l.ebops_positions));
            ebops_term = ebops_term ? vadd(tape, ebops_term, e_layer) : e_layer;

            auto l1 = width_l1(tape, l.weight_hgq.f_cont, cw);
            l1_term = l1_term ? vadd(tape, l1_term, l1) : l1;
            if (fx) {
                auto l1x = width_l1(tape, fx, cx);
                l1_term = vadd(tape, l1_term, l1x);
            }
        }
        if (ebops_term && qc.hgq_beta != 0.0) add(vscale(tape, ebops_term, static_cast<T>(qc.hgq_beta)));
        if (l1_term && qc.hgq_gamma != 0.0) add(vscale(tape, l1_term, static_cast<T>(qc.hgq_gamma)));
    }
    return total;
}

template <class T>
double ModelGraph<T>::ebops() const {
    double total = 0.0;
    for (const auto& l : layers) {
        if (!l.has_weights() || l.last_weight_bits.empty()) continue;
        const size_t I = l.weight.var->val.dim(0), O = l.weight.var->val.dim(1);
        total += l.ebops_positions * ebops_dense(l.last_mask, l.last_weight_bits, l.last_input_bits, I, O);
    }
    return total;
}

template <class T>
std::vector<std::pair<std::string, double>> ModelGraph<T>::layer_sparsity() {
    std::vector<std::pair<std::string, double>> out;
    for (auto& l : layers) {
        if (!l.has_weights()) continue;
        auto m = effective_mask(l);
        size_t zeros = 0;
        for (uint8_t v : m)
            if (!v) ++zeros;
        out.emplace_back(l.name, static_cast<double>(zeros) / static_cast<double>(m.size()));
    }
    return out;
}

template <class T>
uint64_t ModelGraph<T>::weight_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& l : layers) {
        if (!l.has_weights()) continue;
        h = fnv1a64(l.weight.var->val.data(), l.weight.var->val.size() * sizeof(T), h);
        h = fnv1a64(l.bias.var->val.data(), l.bias.var->val.size() * sizeof(T), h);
    }
    return h;
}

// Snapshots cover model weights (dense/conv weights+biases, batchnorm
// parameters and running statistics) but never mask state or learnables.
template <class T>
std::vector<Tensor<T>> ModelGraph<T>::snapshot_weights() const {
    std::vector<Tensor<T>> snap;
    for (const auto& l : layers) {
        if (l.has_weights()) {
            snap.push_back(l.weight.var->val);
            snap.push_back(l.bias.var->val);
        }
        if (l.kind == LayerKind::batchnorm) {
            snap.push_back(l.gamma.var->val);
            snap.push_back(l.beta.var->val);
            snap.push_back(l.running_mean);
            snap.push_back(l.running_var);
        }
    }
    return snap;
}

template <class T>
void ModelGraph<T>::restore_weights(const std::vector<Tensor<T>>& snap) {
    size_t idx = 0;
    auto take = [&]() -> const Tensor<T>& {
        if (idx >= snap.size()) throw StateError("restore_weights: snapshot size mismatch");
        return snap[idx++];
    };
    for (auto& l : layers) {
        if (l.has_weights()) {
            l.weight.var->val = take();
            l.bias.var->val = take();
        }
        if (l.kind == LayerKind::batchnorm) {
            l.gamma.var->val = take();
            l.beta.var->val = take();
            l.running_mean = take();
            l.running_var = take();
        }
    }
    if (idx != snap.size()) throw StateError("restore_weights: snapshot size mismatch");
}

template <class T>
ModelGraph<T> replace_layers(const ModelDesc& desc, const CompressionConfig& config) {
    for (const auto& [name, ov] : config.quantization.layer_specific) {
        bool found = false;
        for (const auto& l : desc.layers)
            if (l.name == name) found = true;
        if (!found)
            throw ConfigError("config: quantization.layer_specific names unknown layer \"" + name + "\"");
        (void)ov;
    }

    ModelGraph<T> g;
    g.config = config;
    g.input_shape = desc.input_shape;
    g.desc = desc;
    for (auto& ld : g.desc.layers) {
        ld.weights.clear();
        ld.bias.clear();
    }
    if (desc.input_shape.empty()) throw ConfigError("model: input_shape is required");

    Rng rng(config.training.seed, "init");
    std::vector<size_t> shape = desc.input_shape; // running activation shape (without batch)
    const auto& pc = config.pruning;

    auto is_disabled = [&](const std::string& name) {
        for (const auto& d : pc.disabled_layers)
            if (d == name) return true;
        return false;
    };

    std::vector<std::string> seen_names;
    for (const auto& ld : desc.layers) {
        PQLayer<T> l;
        l.kind = ld.kind;
        l.name = ld.name.empty() ? std::string(to_string(ld.kind)) + std::to_string(g.layers.size())
                                 : ld.name;
        for (const auto& s : seen_names)
            if (s == l.name) throw ConfigError("model: duplicate layer name \"" + l.name + "\"");
        seen_names.push_back(l.name);

        const QuantizationConfig q = merge_layer_overrides(config, l.name);
        const bool quant_on = q.enable_quantization;
        l.pruning_first = config.training.pruning_first;

        auto data_spec = q.data_spec();
        auto weight_spec = q.weight_spec();

        l.in_quant.spec = data_spec;
        l.in_quant.granularity = Granularity::per_tensor;
        l.in_quant.enabled = quant_on && q.quantize_input;
        l.out_quant.spec = data_spec;
        l.out_quant.granularity = Granularity::per_tensor;
        l.out_quant.enabled = quant_on && q.quantize_output;

        switch (ld.kind) {
            case LayerKind::dense: {
                if (shape.size() != 1)
                    throw ShapeError("model: dense layer \"" + l.name + "\" needs flat input, got " +
                                     shape_str(shape));
                l.in_features = shape[0];
                l.out_features = ld.units;
                if (ld.units == 0) throw ConfigError("model: dense layer \"" + l.name + "\" needs units");
                Tensor<T> w({l.in_features, l.out_features});
                if (!ld.weights.empty()) {
                    if (ld.weights.size() != w.size())
                        throw ConfigError("model: layer \"" + l.name + "\" weight size mismatch");
                    for (size_t e = 0; e < w.size(); ++e) w[e] = static_cast<T>(ld.weights[e]);
                } else {
                    kaiming_uniform(w, l.in_features, rng);
                }
                Tensor<T> b({l.out_features});
                if (!ld.bias.empty()) {
                    if (ld.bias.size() != b.size())
                        throw ConfigError("model: layer \"" + l.name + "\" bias size mismatch");
                    for (size_t e = 0; e < b.size(); ++e) b[e] = static_cast<T>(ld.bias[e]);
                }
                l.weight = {make_var(std::move(w), true), l.name + ".weight", true};
                l.bias = {make_var(std::move(b), true), l.name + ".bias", true};
                shape = {l.out_features};
                break;
            }
            case LayerKind::conv2d: {
                if (shape.size() != 3)
                    throw ShapeError("model: conv2d layer \"" + l.name + "\" needs [C,H,W] input, got " +
                                     shape_str(shape));
                l.in_channels = ld.in_channels ? ld.in_channels : shape[0];
                if (l.in_channels != shape[0])
                    throw ShapeError("model: conv2d layer \"" + l.name + "\" channel mismatch");
                l.out_channels = ld.out_channels;
                l.kernel = ld.kernel;
                if (!l.out_channels || !l.kernel)
                    throw ConfigError("model: conv2d layer \"" + l.name + "\" needs out_channels and kernel");
                const size_t K = l.in_channels * l.kernel * l.kernel;
                Tensor<T> w({K, l.out_channels});
                if (!ld.weights.empty()) {
                    if (ld.weights.size() != w.size())
                        throw ConfigError("model: layer \"" + l.name + "\" weight size mismatch");
                    for (size_t e = 0; e < w.size(); ++e) w[e] = static_cast<T>(ld.weights[e]);
                } else {
                    kaiming_uniform(w, K, rng);
                }
                Tensor<T> b({l.out_channels});
                if (!ld.bias.empty()) {
                    for (size_t e = 0; e < b.size(); ++e) b[e] = static_cast<T>(ld.bias[e]);
                }
                l.weight = {make_var(std::move(w), true), l.name + ".weight", true};
                l.bias = {make_var(std::move(b), true), l.name + ".bias", true};
                l.in_features = K;
                l.out_features = l.out_channels;
                if (shape[1] < l.kernel || shape[2] < l.kernel)
                    throw ShapeError("model: conv2d kernel does not fit input");
                shape = {l.out_channels, shape[1] - l.kernel + 1, shape[2] - l.kernel + 1};
                break;
            }
            case LayerKind::batchnorm: {
                if (shape.size() != 1)
                    throw ShapeError("model: batchnorm supports flat inputs in this build");
                const size_t F = shape[0];
                l.gamma = {make_var(Tensor<T>({F}, T(1)), true), l.name + ".gamma", true};
                l.beta = {make_var(Tensor<T>({F}), true), l.name + ".beta", true};
                l.running_mean = Tensor<T>({F});
                l.running_var = Tensor<T>({F}, T(1));
                break;
            }
            case LayerKind::avgpool2d: {
                if (shape.size() != 3) throw ShapeError("model: avgpool2d needs [C,H,W] input");
                l.pool = ld.pool;
                if (!l.pool) throw ConfigError("model: avgpool2d layer \"" + l.name + "\" needs pool");
                if (shape[1] % l.pool || shape[2] % l.pool)
                    throw ShapeError("model: avgpool2d window does not tile input");
                shape = {shape[0], shape[1] / l.pool, shape[2] / l.pool};
                break;
            }
            case LayerKind::activation: {
                l.act = parse_activation(ld.act == "tanh" && !q.use_real_tanh ? "hard_tanh" : ld.act);
                l.use_relu_multiplier = q.use_relu_multiplier && l.act == Activation::relu;
                if (l.use_relu_multiplier)
                    l.relu_mult = {make_var(Tensor<T>({1}), true), l.name + ".relu_mult", true};
                break;
            }
            case LayerKind::flatten: {
                size_t n = 1;
                for (size_t d : shape) n *= d;
                shape = {n};
                break;
            }
        }

        if (l.has_weights()) {
            l.weight_quant.spec = weight_spec;
            l.weight_quant.granularity = q.granularity;
            l.weight_quant.enabled = quant_on && !q.use_high_granularity_quantization;
            l.bias_quant.spec = weight_spec;
            l.bias_quant.granularity = Granularity::per_tensor;
            l.bias_quant.enabled = quant_on;
            l.use_hgq = quant_on && q.use_high_granularity_quantization;
            if (l.use_hgq) {
                hgq_init(l.weight_hgq, l.weight.var->val.shape(),
                         static_cast<T>(q.default_weight_fractional_bits), false,
                         q.default_weight_keep_negatives, q.round_mode);
                l.hgq_weight_p = {l.weight_hgq.f_cont, l.name + ".hgq_fw", true};
                if (l.kind == LayerKind::dense && l.in_quant.enabled) {
                    hgq_init(l.in_hgq, Shape{l.in_features},
                             static_cast<T>(q.default_data_fractional_bits), true,
                             q.default_data_keep_negatives, q.round_mode);
                    l.hgq_input_p = {l.in_hgq.f_cont, l.name + ".hgq_fx", true};
                }
            }

            const bool prune_this = pc.enable_pruning && pc.method != PruneMethod::none &&
                                    !is_disabled(l.name);
            if (prune_this) {
                MaskState<T> st;
                st.method = pc.method;
                st.granularity = pc.granularity;
                st.nm_n = pc.n;
                st.nm_m = pc.m;
                st.mdmm_eps = static_cast<T>(pc.mdmm.eps_s);
                switch (pc.method) {
                    case PruneMethod::activation:
                        st.hard_mask = Tensor<T>(l.weight.var->val.shape(), T(1));
                        st.hard = true;
                        st.unit_mask.assign(l.out_features, 1);
                        break;
                    case PruneMethod::autosparse:
                        st.threshold = make_var(Tensor<T>({1}, static_cast<T>(pc.autosparse.threshold_init)), true);
                        st.alpha = static_cast<T>(pc.autosparse.alpha);
                        l.prune_threshold_p = {st.threshold, l.name + ".prune_threshold", true};
                        break;
                    case PruneMethod::cs: {
                        st.s_logits = make_var(Tensor<T>(l.weight.var->val.shape(), static_cast<T>(pc.cs.s_init)), true);
                        st.s_init = st.s_logits->val;
                        l.prune_logits_p = {st.s_logits, l.name + ".prune_logits", true};
                        break;
                    }
                    case PruneMethod::dst:
                        st.threshold = make_var(Tensor<T>({1}), true);
                        l.prune_threshold_p = {st.threshold, l.name + ".prune_threshold", true};
                        break;
                    default:
                        break;
                }
                l.mask = std::move(st);
            }
        }
        g.desc.layers[g.layers.size()].name = l.name; // keep resolved names for checkpoints
        g.layers.push_back(std::move(l));
    }
    g.output_dim = shape.size() == 1 ? shape[0] : 0;
    return g;
}

} // namespace pqforge
