#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "pqforge/config.hpp"
#include "pqforge/fitcompress.hpp"
#include "pqforge/layers.hpp"
#include "pqforge/optim.hpp"

namespace pqforge {

enum class Stage { pretraining, training, fine_tuning };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::pretraining: return "pretraining";
        case Stage::training: return "training";
        case Stage::fine_tuning: return "fine_tuning";
    }
    return "?";
}

struct Metrics {
    double loss = 0.0;
    double accuracy = 0.0;
    double ebops = 0.0;
    double sparsity = 0.0; // over prunable weights
    std::vector<std::pair<std::string, double>> per_layer_sparsity;
};

struct EpochRecord {
    int epoch = 0; // global index across stages
    std::string stage;
    int round = 1;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double sparsity = 0.0;
    double ebops = 0.0;
};

/// One training run's log: per-epoch metrics plus a terminal summary.
struct RunRecord {
    std::string config_hash;
    std::string method;
    std::string granularity;
    std::vector<EpochRecord> epochs;
    std::string status = "complete"; // or "failed: ..."
    double wall_seconds = 0.0;
    std::string artifact_path;
    std::string bundle_hash;
    std::vector<std::pair<std::string, double>> final_layer_sparsity;
    double final_accuracy = 0.0;
    double final_ebops = 0.0;
    double final_sparsity = 0.0;
};

template <class T>
struct EpochContext {
    Stage stage = Stage::training;
    int round = 1;
    int epoch_in_stage = 0;
    int global_epoch = 0;
    const CompressionConfig* config = nullptr;
};

/// Extract a contiguous batch by precomputed row indices.
template <class T>
void gather_batch(const DataSplit<T>& d, const std::vector<size_t>& order, size_t begin, size_t end,
                  Tensor<T>& xb, std::vector<int>& yb) {
    const size_t F = d.X.size() / d.size();
    Shape bshape = d.X.shape();
    bshape[0] = end - begin;
    xb = Tensor<T>(bshape);
    yb.resize(end - begin);
    for (size_t r = begin; r < end; ++r) {
        const size_t src = order[r];
        std::copy(d.X.data() + src * F, d.X.data() + (src + 1) * F, xb.data() + (r - begin) * F);
        yb[r - begin] = d.y[src];
    }
}

/// Deterministic full-split evaluation.
template <class T>
Metrics evaluate(ModelGraph<T>& model, const DataSplit<T>& data, size_t batch = 2048) {
    if (data.size() == 0) throw DataError("evaluate: empty split");
    const bool was_training = model.training_mode;
    model.training_mode = false;
    NoGradGuard<T> ng(model.tape);
    Metrics m;
    size_t correct = 0;
    double loss_sum = 0.0;
    const size_t F = data.X.size() / data.size();
    for (size_t begin = 0; begin < data.size(); begin += batch) {
        const size_t end = std::min(data.size(), begin + batch);
        Shape bshape = data.X.shape();
        bshape[0] = end - begin;
        Tensor<T> xb(bshape);
        std::copy(data.X.data() + begin * F, data.X.data() + end * F, xb.data());
        std::vector<int> yb(data.y.begin() + begin, data.y.begin() + end);
        auto logits = model.forward(xb);
        auto loss = softmax_ce(model.tape, logits, yb);
        loss_sum += static_cast<double>(loss->val[0]) * static_cast<double>(end - begin);
        const size_t C = logits->val.dim(1);
        for (size_t r = 0; r < end - begin; ++r) {
            size_t arg = 0;
            for (size_t c = 1; c < C; ++c)
                if (logits->val[r * C + c] > logits->val[r * C + arg]) arg = c;
            if (static_cast<int>(arg) == yb[r]) ++correct;
        }
    }
    m.loss = loss_sum / static_cast<double>(data.size());
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    m.ebops = model.ebops();
    m.per_layer_sparsity = model.layer_sparsity();
    size_t total = 0, zeros = 0;
    for (auto& l : model.layers) {
        if (!l.has_weights()) continue;
        auto em = effective_mask(l);
        total += em.size();
        for (uint8_t v : em)
            if (!v) ++zeros;
    }
    m.sparsity = total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
    model.training_mode = was_training;
    return m;
}

namespace detail {

/// Stage-dependent trainability of parameters; requires_grad mirrors it so
/// no stale gradients accumulate.
template <class T>
void set_stage(ModelGraph<T>& model, Stage stage) {
    const auto& pc = model.config.pruning;
    const bool pruning_on = pc.enable_pruning && pc.method != PruneMethod::none;
    model.training_mode = true;
    model.pruning_active = stage == Stage::training && pruning_on;
    for (auto& l : model.layers) {
        const bool learn_compression = stage == Stage::training;
        if (l.prune_threshold_p.var) l.prune_threshold_p.trainable = learn_compression;
        if (l.prune_logits_p.var) l.prune_logits_p.trainable = learn_compression;
        if (l.hgq_weight_p.var) l.hgq_weight_p.trainable = learn_compression;
        if (l.hgq_input_p.var) l.hgq_input_p.trainable = learn_compression;
        if (l.relu_mult.var) l.relu_mult.trainable = learn_compression;
    }
    for (auto* p : model.parameters()) p->var->requires_grad = p->trainable;
}

template <class T>
struct QuantFlags {
    std::vector<uint8_t> flags;
};

template <class T>
QuantFlags<T> disable_quantizers(ModelGraph<T>& model) {
    QuantFlags<T> saved;
    for (auto& l : model.layers) {
        saved.flags.push_back(l.in_quant.enabled);
        saved.flags.push_back(l.weight_quant.enabled);
        saved.flags.push_back(l.bias_quant.enabled);
        saved.flags.push_back(l.out_quant.enabled);
        saved.flags.push_back(l.use_hgq);
        l.in_quant.enabled = l.weight_quant.enabled = l.bias_quant.enabled = l.out_quant.enabled = false;
        l.use_hgq = false;
    }
    return saved;
}

template <class T>
void restore_quantizers(ModelGraph<T>& model, const QuantFlags<T>& saved) {
    size_t i = 0;
    for (auto& l : model.layers) {
        l.in_quant.enabled = saved.flags[i++];
        l.weight_quant.enabled = saved.flags[i++];
        l.bias_quant.enabled = saved.flags[i++];
        l.out_quant.enabled = saved.flags[i++];
        l.use_hgq = saved.flags[i++];
    }
}

} // namespace detail

/// Restore a weight snapshot according to the rewind policy. Masks and mask
/// learnables are never rewound. Optimizer moments are reset by the caller.
template <class T>
void rewind_weights(ModelGraph<T>& model, const std::vector<Tensor<T>>& snapshot, RewindMode policy) {
    if (policy == RewindMode::never) return;
    if (snapshot.empty()) throw StateError("rewind: no weight snapshot was saved");
    model.restore_weights(snapshot);
}

/// Round every soft mask to a hard one and freeze it; bake AutoSparse
/// shrinkage into the weights. No-op for already-hard masks.
template <class T>
void finalize_masks(ModelGraph<T>& model) {
    const auto& pc = model.config.pruning;
    for (auto& l : model.layers) {
        if (!l.prunable() || l.mask->hard) continue;
        MaskState<T>& st = *l.mask;
        switch (st.method) {
            case PruneMethod::cs:
                cs_finalize(st);
                break;
            case PruneMethod::pdp:
                st.pdp_threshold = static_cast<T>(pdp_layer_threshold(
                    l.weight.var->val, static_cast<double>(st.pdp_budget),
                    st.granularity == PruneGranularity::structured));
                pdp_round(st, l.weight.var->val, st.granularity == PruneGranularity::structured);
                break;
            case PruneMethod::mdmm:
                mdmm_finalize(st, l.weight.var->val, pc.mdmm.eps_s);
                break;
            case PruneMethod::dst: {
                const T thr = std::max(st.threshold->val[0], T(0));
                st.hard_mask = Tensor<T>(l.weight.var->val.shape());
                for (size_t e = 0; e < st.hard_mask.size(); ++e)
                    st.hard_mask[e] = std::fabs(l.weight.var->val[e]) > thr ? T(1) : T(0);
                st.hard = true;
                ++st.update_count;
                break;
            }
            case PruneMethod::autosparse: {
                const double sig =
                    1.0 / (1.0 + std::exp(-static_cast<double>(st.threshold->val[0])));
                st.hard_mask = Tensor<T>(l.weight.var->val.shape());
                for (size_t e = 0; e < st.hard_mask.size(); ++e) {
                    T& w = l.weight.var->val[e];
                    const double a = std::fabs(static_cast<double>(w)) - sig;
                    if (a > 0) {
                        w = static_cast<T>(w > T(0) ? a : -a); // bake the shrinkage
                        st.hard_mask[e] = T(1);
                    } else {
                        w = T(0);
                        st.hard_mask[e] = T(0);
                    }
                }
                st.hard = true;
                ++st.update_count;
                break;
            }
            default:
                break;
        }
    }
}

/// The generic staged training loop: pre-training (pruning off), optional
/// FITCompress hook, `rounds` training stages with pruning on, then
/// fine-tuning with hard frozen masks. Rewinding follows the plan.
template <class T>
RunRecord train_model(
    ModelGraph<T>& model, const DataSplit<T>& train_data, const DataSplit<T>& val_data,
    const std::function<double(ModelGraph<T>&, Adam<T>&, const DataSplit<T>&, const EpochContext<T>&)>&
        train_epoch_fn,
    const std::function<Metrics(ModelGraph<T>&, const DataSplit<T>&, const EpochContext<T>&)>&
        validate_epoch_fn);

/// Default minibatch train-epoch callback: cross-entropy plus the model's
/// regularization terms, Adam updates, and the per-step method hooks
/// (MDMM constraint accumulation, activation-pruning updates, DST resets).
template <class T>
class DefaultTrainEpoch {
public:
    double operator()(ModelGraph<T>& model, Adam<T>& opt, const DataSplit<T>& data,
                      const EpochContext<T>& ctx) {
        const auto& cfg = *ctx.config;
        const size_t B = static_cast<size_t>(cfg.training.batch_size);
        const size_t N = data.size();
        std::vector<size_t> order(N);
        for (size_t i = 0; i < N; ++i) order[i] = i;
        Rng shuffle_rng(cfg.training.seed,
                        format("shuffle-%s-r%d-e%d", to_string(ctx.stage), ctx.round, ctx.global_epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        size_t batches = 0;
        for (size_t begin = 0; begin < N; begin += B, ++batches) {
            const size_t end = std::min(N, begin + B);
            Tensor<T> xb;
            std::vector<int> yb;
            gather_batch(data, order, begin, end, xb, yb);

            model.tape.clear();
            auto logits = model.forward(xb);
            auto loss = softmax_ce(model.tape, logits, yb);
            if (auto reg = model.regularization()) loss = vadd(model.tape, loss, reg);
            model.tape.backward(loss);
            loss_sum += static_cast<double>(loss->val[0]);

            if (cfg.training.weight_decay > 0.0) {
                const T wd = static_cast<T>(cfg.training.weight_decay);
                for (auto& l : model.layers) {
                    if (!l.has_weights()) continue;
                    l.weight.var->ensure_grad();
                    for (size_t e = 0; e < l.weight.var->val.size(); ++e)
                        l.weight.var->grad[e] += wd * l.weight.var->val[e];
                }
            }

            if (model.pruning_active && cfg.pruning.method == PruneMethod::mdmm) {
                for (auto& l : model.layers)
                    if (l.prunable() && !l.mask->hard)
                        mdmm_accumulate(*l.mask, l.weight.var, cfg.pruning.target_sparsity,
                                        cfg.pruning.mdmm.eps_s, cfg.pruning.mdmm.damping,
                                        cfg.pruning.mdmm.lambda_lr_scale * cfg.training.lr);
            }

            opt.step();
            ++step_;

            if (model.pruning_active && cfg.pruning.method == PruneMethod::activation &&
                step_ % static_cast<uint64_t>(cfg.pruning.activation.update_interval) == 0) {
                for (auto& l : model.layers)
                    if (l.prunable()) ap_update(*l.mask, cfg.pruning.activation.threshold);
            }
            if (model.pruning_active && cfg.pruning.method == PruneMethod::dst) {
                for (auto& l : model.layers) {
                    if (!l.prunable() || l.mask->hard) continue;
                    if (l.mask->threshold->val[0] < T(0)) l.mask->threshold->val[0] = T(0);
                    dst_reset_check(*l.mask, current_sparsity(*l.mask, l.weight.var->val),
                                    cfg.pruning.dst.reset_limit);
                }
            }
        }
        return batches ? loss_sum / static_cast<double>(batches) : 0.0;
    }

private:
    uint64_t step_ = 0;
};

template <class T>
Metrics default_validate_epoch(ModelGraph<T>& model, const DataSplit<T>& data,
                               const EpochContext<T>&) {
    return evaluate(model, data);
}

// ---------------------------------------------------------------------------

template <class T>
RunRecord train_model(
    ModelGraph<T>& model, const DataSplit<T>& train_data, const DataSplit<T>& val_data,
    const std::function<double(ModelGraph<T>&, Adam<T>&, const DataSplit<T>&, const EpochContext<T>&)>&
        train_epoch_fn,
    const std::function<Metrics(ModelGraph<T>&, const DataSplit<T>&, const EpochContext<T>&)>&
        validate_epoch_fn) {
    const CompressionConfig& cfg = model.config;
    validate_stage_plan(cfg);
    if (!train_epoch_fn || !validate_epoch_fn)
        throw ConfigError("train_model: train and validate callbacks are required");

    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = hex64(config_hash(cfg));
    rec.method = cfg.pruning.enable_pruning ? to_string(cfg.pruning.method) : "none";
    if (cfg.fitcompress.enabled) rec.method = "fitcompress";
    if (cfg.quantization.use_high_granularity_quantization) rec.method = rec.method == "none" ? "hgq" : rec.method;
    rec.granularity = to_string(cfg.quantization.granularity);

    auto params = model.parameters();
    Adam<T> opt(params, static_cast<T>(cfg.training.lr));

    const auto& tc = cfg.training;
    const bool pruning_on = cfg.pruning.enable_pruning && cfg.pruning.method != PruneMethod::none;
    int global_epoch = 0;

    auto run_epoch = [&](Stage stage, int round, int epoch_in_stage) {
        EpochContext<T> ctx{stage, round, epoch_in_stage, global_epoch, &cfg};
        const double train_loss = train_epoch_fn(model, opt, train_data, ctx);
        Metrics vm = validate_epoch_fn(model, val_data, ctx);
        model.training_mode = true;
        EpochRecord er;
        er.epoch = global_epoch++;
        er.stage = to_string(stage);
        er.round = round;
        er.train_loss = train_loss;
        er.val_loss = vm.loss;
        er.val_accuracy = vm.accuracy;
        er.sparsity = vm.sparsity;
        er.ebops = vm.ebops;
        rec.epochs.push_back(er);
        return vm;
    };

    // --- pre-training: pruning off; quantization off only under FITCompress
    detail::set_stage(model, Stage::pretraining);
    std::optional<detail::QuantFlags<T>> saved_quant;
    if (cfg.fitcompress.enabled) saved_quant = detail::disable_quantizers(model);
    for (int e = 0; e < tc.pretraining_epochs; ++e) run_epoch(Stage::pretraining, 1, e);

    if (cfg.fitcompress.enabled) {
        // search runs on the un-quantized pre-trained model, then applies
        // per-layer bit-widths and the global sparsity mask
        run_fitcompress(model, train_data);
        detail::restore_quantizers(model, *saved_quant);
    }

    if (pruning_on && cfg.pruning.method == PruneMethod::pdp) {
        std::vector<const Tensor<T>*> ws;
        std::vector<PQLayer<T>*> pls;
        for (auto& l : model.layers)
            if (l.prunable()) {
                ws.push_back(&l.weight.var->val);
                pls.push_back(&l);
            }
        auto budgets = pdp_budgets(ws, cfg.pruning.target_sparsity);
        for (size_t i = 0; i < pls.size(); ++i) pls[i]->mask->pdp_budget = static_cast<T>(budgets[i]);
    }

    std::vector<Tensor<T>> snapshot;
    // --- training rounds
    for (int round = 1; round <= tc.rounds; ++round) {
        detail::set_stage(model, Stage::training);

        if (pruning_on && cfg.pruning.method == PruneMethod::wanda && round == 1) {
            wanda_one_shot(model, train_data);
        }

        for (int e = 0; e < tc.epochs; ++e) {
            // per-epoch schedules
            for (auto& l : model.layers) {
                if (!l.prunable() || l.mask->hard) continue;
                MaskState<T>& st = *l.mask;
                if (st.method == PruneMethod::cs)
                    st.beta = static_cast<T>(cs_schedule(e, tc.epochs, cfg.pruning.cs.beta_final));
                if (st.method == PruneMethod::pdp)
                    st.pdp_threshold = static_cast<T>(
                        pdp_layer_threshold(l.weight.var->val, static_cast<double>(st.pdp_budget),
                                            st.granularity == PruneGranularity::structured));
                if (st.method == PruneMethod::autosparse && e > 0)
                    st.alpha = static_cast<T>(static_cast<double>(st.alpha) * cfg.pruning.autosparse.alpha_decay);
            }

            run_epoch(Stage::training, round, e);

            if (round == 1 && e == tc.save_weights_epoch && tc.rewind != RewindMode::never)
                snapshot = model.snapshot_weights();
        }

        if (round < tc.rounds) {
            if (tc.rewind == RewindMode::every_round) {
                rewind_weights(model, snapshot, tc.rewind);
                opt.reset_moments();
            }
            if (pruning_on && cfg.pruning.method == PruneMethod::cs)
                for (auto& l : model.layers)
                    if (l.prunable() && !l.mask->hard) cs_rewind(*l.mask);
        }
    }
    if (tc.rewind == RewindMode::post_training_stage) {
        rewind_weights(model, snapshot, tc.rewind);
        opt.reset_moments();
    }

    // --- fine-tuning: soft masks rounded to hard and frozen
    if (tc.fine_tuning_epochs > 0) {
        finalize_masks(model);
        detail::set_stage(model, Stage::fine_tuning);
        for (int e = 0; e < tc.fine_tuning_epochs; ++e) run_epoch(Stage::fine_tuning, tc.rounds, e);
    } else if (pruning_on || cfg.fitcompress.enabled) {
        finalize_masks(model);
    }

    Metrics fin = evaluate(model, val_data);
    rec.final_accuracy = fin.accuracy;
    rec.final_ebops = fin.ebops;
    rec.final_sparsity = fin.sparsity;
    rec.final_layer_sparsity = fin.per_layer_sparsity;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

/// Wanda one-shot step: collect input norms over calibration batches, score,
/// and set permanent hard masks.
template <class T>
void wanda_one_shot(ModelGraph<T>& model, const DataSplit<T>& data) {
    const auto& cfg = model.config;
    for (auto& l : model.layers)
        if (l.prunable()) {
            l.collect_input_norms = true;
            l.calib_sq_sum.clear();
            l.calib_rows = 0;
        }
    {
        NoGradGuard<T> ng(model.tape);
        const size_t B = static_cast<size_t>(cfg.training.batch_size);
        const size_t take = std::min<size_t>(data.size(),
                                             B * static_cast<size_t>(cfg.pruning.wanda.calibration_batches));
        const size_t F = data.X.size() / data.size();
        Shape bshape = data.X.shape();
        bshape[0] = take;
        Tensor<T> xb(bshape);
        std::copy(data.X.data(), data.X.data() + take * F, xb.data());
        const bool was_training = model.training_mode;
        model.training_mode = false;
        model.forward(xb);
        model.training_mode = was_training;
    }
    std::vector<double> budgets;
    std::vector<PQLayer<T>*> pls;
    if (cfg.pruning.wanda.use_budgets) {
        std::vector<const Tensor<T>*> ws;
        for (auto& l : model.layers)
            if (l.prunable()) {
                ws.push_back(&l.weight.var->val);
                pls.push_back(&l);
            }
        budgets = pdp_budgets(ws, cfg.pruning.target_sparsity);
    }
    size_t li = 0;
    for (auto& l : model.layers) {
        if (!l.prunable()) continue;
        l.collect_input_norms = false;
        std::vector<double> norms(l.calib_sq_sum.size());
        for (size_t i = 0; i < norms.size(); ++i) norms[i] = std::sqrt(l.calib_sq_sum[i]);
        auto scores = wanda_scores(l.weight.var->val, norms);
        if (l.mask->granularity == PruneGranularity::n_m)
            wanda_prune_nm(*l.mask, scores, l.mask->nm_n, l.mask->nm_m);
        else
            wanda_prune_unstructured(*l.mask, scores,
                                     cfg.pruning.wanda.use_budgets ? budgets[li]
                                                                   : cfg.pruning.target_sparsity);
        ++li;
    }
}

} // namespace pqforge
