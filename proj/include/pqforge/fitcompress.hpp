#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pqforge/layers.hpp"

namespace pqforge {

/// Result of the joint bit-width / sparsity path search.
struct FitCompressOutcome {
    std::vector<std::pair<std::string, int>> layer_bits;
    double sparsity = 0.0;
    double achieved_ratio = 1.0;
    size_t moves = 0;
    bool monotone = true; // every accepted move strictly decreased BOPs
};

namespace detail {

/// Per-layer empirical Fisher diagonal: mean squared gradient of the task
/// loss over one calibration epoch.
template <class T>
std::vector<std::vector<double>> fisher_diagonal(ModelGraph<T>& model, const DataSplit<T>& data) {
    std::vector<PQLayer<T>*> wl;
    for (auto& l : model.layers)
        if (l.has_weights()) wl.push_back(&l);
    std::vector<std::vector<double>> fisher(wl.size());
    for (size_t i = 0; i < wl.size(); ++i) fisher[i].assign(wl[i]->weight.var->val.size(), 0.0);

    const size_t B = static_cast<size_t>(model.config.training.batch_size);
    const size_t N = data.size();
    const size_t F = data.X.size() / N;
    size_t batches = 0;
    for (size_t begin = 0; begin < N; begin += B, ++batches) {
        const size_t end = std::min(N, begin + B);
        Shape bshape = data.X.shape();
        bshape[0] = end - begin;
        Tensor<T> xb(bshape);
        std::copy(data.X.data() + begin * F, data.X.data() + end * F, xb.data());
        std::vector<int> yb(data.y.begin() + begin, data.y.begin() + end);
        model.tape.clear();
        auto loss = softmax_ce(model.tape, model.forward(xb), yb);
        model.tape.backward(loss);
        for (size_t i = 0; i < wl.size(); ++i) {
            auto& w = *wl[i]->weight.var;
            if (!w.has_grad()) continue;
            for (size_t e = 0; e < fisher[i].size(); ++e)
                fisher[i][e] += static_cast<double>(w.grad[e]) * static_cast<double>(w.grad[e]);
        }
        for (auto* p : model.parameters()) p->var->zero_grad();
    }
    if (batches)
        for (auto& f : fisher)
            for (double& v : f) v /= static_cast<double>(batches);
    return fisher;
}

} // namespace detail

/// Greedy FITCompress path search. Candidate moves decrement one layer's
/// weight width (down to the floor) or raise the global magnitude-pruning
/// sparsity by one step; each move is scored by the Fisher-weighted
/// perturbation it adds per unit of BOPs removed. Runs on the pre-trained
/// model with quantizers disabled; the caller applies the outcome.
template <class T>
FitCompressOutcome fitcompress_search(ModelGraph<T>& model, const DataSplit<T>& calib) {
    const auto& fc = model.config.fitcompress;
    std::vector<PQLayer<T>*> wl;
    for (auto& l : model.layers)
        if (l.has_weights()) wl.push_back(&l);
    if (wl.empty()) throw StateError("fitcompress: model has no weight layers");

    auto fisher = detail::fisher_diagonal(model, calib);

    const int k = model.config.quantization.default_weight_keep_negatives;
    const Granularity gran = model.config.quantization.granularity;
    std::vector<int> bits(wl.size());
    std::vector<double> bx(wl.size()), positions(wl.size());
    for (size_t i = 0; i < wl.size(); ++i) {
        bits[i] = model.config.quantization.weight_spec().width();
        bx[i] = wl[i]->in_quant.spec.width();
        positions[i] = wl[i]->kind == LayerKind::conv2d ? 0.0 : 1.0;
    }
    // conv positions depend on input size; probe one forward shape lazily:
    // at desk scale the dense path dominates, use recorded positions if any
    for (size_t i = 0; i < wl.size(); ++i)
        if (wl[i]->kind == LayerKind::conv2d)
            positions[i] = wl[i]->ebops_positions > 0 ? wl[i]->ebops_positions : 1.0;

    // pooled magnitudes for the global sparsity threshold
    std::vector<double> pooled;
    for (auto* l : wl)
        for (size_t e = 0; e < l->weight.var->val.size(); ++e)
            pooled.push_back(std::fabs(static_cast<double>(l->weight.var->val[e])));
    std::sort(pooled.begin(), pooled.end());
    auto global_threshold = [&](double s) {
        if (s <= 0.0) return -1.0; // keep everything
        const size_t idx = std::min(pooled.size() - 1,
                                    static_cast<size_t>(s * static_cast<double>(pooled.size())));
        return pooled[idx];
    };

    auto masks_at = [&](double s) {
        const double tau = global_threshold(s);
        std::vector<std::vector<uint8_t>> masks(wl.size());
        for (size_t i = 0; i < wl.size(); ++i) {
            const auto& w = wl[i]->weight.var->val;
            masks[i].assign(w.size(), 1);
            if (s > 0.0)
                for (size_t e = 0; e < w.size(); ++e)
                    if (std::fabs(static_cast<double>(w[e])) < tau) masks[i][e] = 0;
        }
        return masks;
    };

    auto bops_of = [&](const std::vector<int>& b, const std::vector<std::vector<uint8_t>>& masks) {
        double total = 0.0;
        for (size_t i = 0; i < wl.size(); ++i) {
            size_t kept = 0;
            for (uint8_t m : masks[i])
                if (m) ++kept;
            total += positions[i] * static_cast<double>(kept) * static_cast<double>(b[i]) * bx[i];
        }
        return total;
    };

    auto perturbation = [&](const std::vector<int>& b, const std::vector<std::vector<uint8_t>>& masks) {
        double total = 0.0;
        for (size_t i = 0; i < wl.size(); ++i) {
            const auto& w = wl[i]->weight.var->val;
            Tensor<T> masked = w;
            for (size_t e = 0; e < w.size(); ++e)
                if (!masks[i][e]) masked[e] = T(0);
            FixedPointSpec spec = model.config.quantization.weight_spec();
            spec.fractional_bits = std::max(0, b[i] - k - spec.integer_bits);
            if (spec.integer_bits > b[i] - k) spec.integer_bits = b[i] - k;
            Tensor<T> wq = quantize_grouped_plain(masked, spec, gran);
            for (size_t e = 0; e < w.size(); ++e) {
                const double d = static_cast<double>(w[e]) - static_cast<double>(wq[e]);
                total += fisher[i][e] * d * d;
            }
        }
        return total;
    };

    FitCompressOutcome out;
    double s_cur = 0.0;
    auto masks_cur = masks_at(s_cur);
    const double base = bops_of(bits, masks_cur);
    double bops_cur = base;
    double p_cur = perturbation(bits, masks_cur);

    while (bops_cur / base > fc.compression_goal) {
        double best_score = std::numeric_limits<double>::infinity();
        int best_layer = -1; // -1: none, otherwise layer index; sparsity move = wl.size()
        double best_bops = bops_cur, best_pert = p_cur;
        std::vector<std::vector<uint8_t>> best_masks;

        for (size_t i = 0; i < wl.size(); ++i) {
            if (bits[i] <= fc.bit_floor) continue;
            std::vector<int> b = bits;
            b[i] -= 1;
            const double bp = bops_of(b, masks_cur);
            if (bp >= bops_cur) continue;
            const double pp = perturbation(b, masks_cur);
            const double score = (pp - p_cur) / (bops_cur - bp);
            if (score < best_score) {
                best_score = score;
                best_layer = static_cast<int>(i);
                best_bops = bp;
                best_pert = pp;
            }
        }
        if (s_cur + fc.sparsity_step <= fc.max_sparsity + 1e-12) {
            const double s_next = s_cur + fc.sparsity_step;
            auto masks_next = masks_at(s_next);
            const double bp = bops_of(bits, masks_next);
            if (bp < bops_cur) {
                const double pp = perturbation(bits, masks_next);
                const double score = (pp - p_cur) / (bops_cur - bp);
                if (score < best_score) {
                    best_score = score;
                    best_layer = static_cast<int>(wl.size());
                    best_bops = bp;
                    best_pert = pp;
                    best_masks = std::move(masks_next);
                }
            }
        }

        if (best_layer < 0)
            throw StateError(format(
                "fitcompress: goal %g unreachable; best achieved BOPs ratio %.6f at floor widths",
                fc.compression_goal, bops_cur / base));
        if (best_bops >= bops_cur) out.monotone = false;
        if (best_layer == static_cast<int>(wl.size())) {
            s_cur += fc.sparsity_step;
            masks_cur = std::move(best_masks);
        } else {
            bits[best_layer] -= 1;
        }
        bops_cur = best_bops;
        p_cur = best_pert;
        ++out.moves;
    }

    out.sparsity = s_cur;
    out.achieved_ratio = bops_cur / base;
    for (size_t i = 0; i < wl.size(); ++i) out.layer_bits.emplace_back(wl[i]->name, bits[i]);
    return out;
}

/// Apply a search outcome: set each layer's weight-quantizer width and
/// install the global-magnitude hard masks.
template <class T>
void fitcompress_apply(ModelGraph<T>& model, const FitCompressOutcome& out) {
    // rebuild the global mask at the final sparsity
    std::vector<PQLayer<T>*> wl;
    for (auto& l : model.layers)
        if (l.has_weights()) wl.push_back(&l);
    std::vector<double> pooled;
    for (auto* l : wl)
        for (size_t e = 0; e < l->weight.var->val.size(); ++e)
            pooled.push_back(std::fabs(static_cast<double>(l->weight.var->val[e])));
    std::sort(pooled.begin(), pooled.end());
    double tau = -1.0;
    if (out.sparsity > 0.0) {
        const size_t idx = std::min(pooled.size() - 1,
                                    static_cast<size_t>(out.sparsity * static_cast<double>(pooled.size())));
        tau = pooled[idx];
    }
    for (size_t i = 0; i < wl.size(); ++i) {
        PQLayer<T>& l = *wl[i];
        const int b = out.layer_bits[i].second;
        const int k = l.weight_quant.spec.keep_negative;
        if (l.weight_quant.spec.integer_bits > b - k) l.weight_quant.spec.integer_bits = b - k;
        l.weight_quant.spec.fractional_bits = b - k - l.weight_quant.spec.integer_bits;

        MaskState<T> st;
        st.method = PruneMethod::none;
        st.granularity = PruneGranularity::unstructured;
        st.hard_mask = Tensor<T>(l.weight.var->val.shape(), T(1));
        if (tau >= 0.0)
            for (size_t e = 0; e < st.hard_mask.size(); ++e)
                if (std::fabs(static_cast<double>(l.weight.var->val[e])) < tau) st.hard_mask[e] = T(0);
        st.hard = true;
        l.mask = std::move(st);
    }
}

template <class T>
FitCompressOutcome run_fitcompress(ModelGraph<T>& model, const DataSplit<T>& calib) {
    auto out = fitcompress_search(model, calib);
    fitcompress_apply(model, out);
    log_info(format("fitcompress: %zu moves, sparsity %.2f, BOPs ratio %.6f", out.moves,
                    out.sparsity, out.achieved_ratio));
    return out;
}

} // namespace pqforge
