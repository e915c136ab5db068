#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pqforge/autodiff.hpp"

namespace pqforge {

enum class PruneMethod { none, activation, autosparse, cs, dst, mdmm, pdp, wanda };
enum class PruneGranularity { unstructured, n_m, structured };

inline const char* to_string(PruneMethod m) {
    switch (m) {
        case PruneMethod::none: return "none";
        case PruneMethod::activation: return "activation";
        case PruneMethod::autosparse: return "autosparse";
        case PruneMethod::cs: return "cs";
        case PruneMethod::dst: return "dst";
        case PruneMethod::mdmm: return "mdmm";
        case PruneMethod::pdp: return "pdp";
        case PruneMethod::wanda: return "wanda";
    }
    return "?";
}

inline PruneMethod parse_prune_method(const std::string& s) {
    for (PruneMethod m : {PruneMethod::none, PruneMethod::activation, PruneMethod::autosparse,
                          PruneMethod::cs, PruneMethod::dst, PruneMethod::mdmm, PruneMethod::pdp,
                          PruneMethod::wanda})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown pruning method \"" + s + "\"");
}

inline const char* to_string(PruneGranularity g) {
    switch (g) {
        case PruneGranularity::unstructured: return "unstructured";
        case PruneGranularity::n_m: return "n_m";
        case PruneGranularity::structured: return "structured";
    }
    return "?";
}

inline PruneGranularity parse_prune_granularity(const std::string& s) {
    if (s == "unstructured") return PruneGranularity::unstructured;
    if (s == "n_m") return PruneGranularity::n_m;
    if (s == "structured") return PruneGranularity::structured;
    throw ConfigError("unknown pruning granularity \"" + s + "\"");
}

/// Fraction of exact zeros.
template <class T>
double sparsity(const Tensor<T>& mask) {
    if (mask.size() == 0) return 0.0;
    size_t zeros = 0;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i] == T(0)) ++zeros;
    return static_cast<double>(zeros) / static_cast<double>(mask.size());
}

/// Per-layer pruning state. Masks are weight-shaped even for structured
/// methods (unit masks are broadcast) so downstream consumers see one format.
template <class T>
struct MaskState {
    PruneMethod method = PruneMethod::none;
    PruneGranularity granularity = PruneGranularity::unstructured;

    Tensor<T> hard_mask; // weight-shaped, {0,1}; authoritative once `hard`
    bool hard = false;
    std::vector<uint8_t> unit_mask; // structured methods: per output unit keep flags
    uint64_t update_count = 0;      // bumped whenever mask state or learnables change

    // learnable pieces (registered as model parameters when present)
    VarPtr<T> threshold; // autosparse / dst: scalar per layer
    VarPtr<T> s_logits;  // cs: weight-shaped
    Tensor<T> s_init;    // cs rewind snapshot

    // schedules and method scalars
    T alpha = T(0);        // autosparse gradient factor (decayed)
    T beta = T(1);         // cs sharpness
    T lambda = T(0);       // mdmm multiplier for this layer's constraint
    T mdmm_eps = T(1e-2);  // mdmm smooth-sparsity scale
    T pdp_budget = T(0);   // per-layer sparsity budget
    T pdp_threshold = T(0); // magnitude (or channel-norm) threshold of the current epoch

    // activation-pruning statistics
    std::vector<double> act_nonzero; // per output unit, count of nonzero outputs
    uint64_t act_samples = 0;

    int nm_n = 2, nm_m = 4;
};

// ---------------------------------------------------------------------------
// Activation pruning (structured): neurons whose nonzero-output fraction
// falls below the threshold are removed permanently.

inline std::vector<uint8_t> ap_prune_units(const std::vector<double>& nonzero_fraction,
                                           double threshold) {
    if (threshold < 0.0 || threshold > 1.0)
        throw ConfigError(format("activation pruning threshold %g outside [0,1]", threshold));
    std::vector<uint8_t> keep(nonzero_fraction.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = nonzero_fraction[i] >= threshold ? 1 : 0;
    return keep;
}

/// Accumulate output-activity statistics from a layer output y[B,O]
/// (activity means the post-ReLU value would be nonzero, i.e. y > 0).
template <class T>
void ap_observe(MaskState<T>& st, const Tensor<T>& y) {
    const size_t B = y.dim(0), O = y.dim(1);
    if (st.act_nonzero.size() != O) st.act_nonzero.assign(O, 0.0);
    for (size_t r = 0; r < B; ++r)
        for (size_t o = 0; o < O; ++o)
            if (y[r * O + o] > T(0)) st.act_nonzero[o] += 1.0;
    st.act_samples += B;
}

/// Apply one activation-pruning update from the accumulated statistics.
/// Pruned units stay pruned; statistics are reset afterwards.
template <class T>
void ap_update(MaskState<T>& st, double threshold) {
    const size_t O = st.unit_mask.size();
    if (st.act_samples == 0 || st.act_nonzero.size() != O) return;
    std::vector<double> fraction(O, 0.0);
    for (size_t o = 0; o < O; ++o) fraction[o] = st.act_nonzero[o] / static_cast<double>(st.act_samples);
    auto keep = ap_prune_units(fraction, threshold);
    const size_t I = st.hard_mask.dim(0);
    for (size_t o = 0; o < O; ++o)
        if (!keep[o] && st.unit_mask[o]) {
            st.unit_mask[o] = 0;
            for (size_t i = 0; i < I; ++i) st.hard_mask[i * O + o] = T(0);
            ++st.update_count;
        }
    st.act_nonzero.assign(O, 0.0);
    st.act_samples = 0;
}

// ---------------------------------------------------------------------------
// AutoSparse: W_eff = sign(W) * relu(|W| - sigmoid(T)) with gradient 1 above
// the threshold and alpha below it.

template <class T>
VarPtr<T> autosparse_apply(Tape<T>& tape, const VarPtr<T>& w, const VarPtr<T>& threshold, T alpha) {
    if (alpha < T(0) || alpha > T(1)) throw ConfigError("autosparse: alpha must lie in [0,1]");
    const size_t n = w->val.size();
    const T sig = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(threshold->val[0]))));
    Tensor<T> y(w->val.shape());
    for (size_t e = 0; e < n; ++e) {
        const T a = std::fabs(w->val[e]) - sig;
        y[e] = a > T(0) ? (w->val[e] > T(0) ? a : -a) : T(0);
    }
    bool rg = (w->requires_grad || threshold->requires_grad) && tape.recording();
    auto out = make_var(std::move(y), rg);
    if (out->requires_grad) {
        tape.record([w, threshold, out, sig, alpha, n] {
            if (!out->has_grad()) return;
            if (w->requires_grad) {
                w->ensure_grad();
                for (size_t e = 0; e < n; ++e) {
                    const bool above = std::fabs(w->val[e]) > sig;
                    w->grad[e] += out->grad[e] * (above ? T(1) : alpha);
                }
            }
            if (threshold->requires_grad) {
                threshold->ensure_grad();
                const T dsig = sig * (T(1) - sig);
                T acc = T(0);
                for (size_t e = 0; e < n; ++e)
                    if (std::fabs(w->val[e]) > sig)
                        acc += out->grad[e] * (w->val[e] > T(0) ? -dsig : dsig);
                threshold->grad[0] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Continuous sparsification: soft mask sigmoid(beta * s).

template <class T>
VarPtr<T> cs_mask(Tape<T>& tape, const VarPtr<T>& s, T beta) {
    const size_t n = s->val.size();
    Tensor<T> m(s->val.shape());
    for (size_t e = 0; e < n; ++e)
        m[e] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(beta * s->val[e]))));
    auto out = make_var(std::move(m), s->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([s, out, beta, n] {
            if (!out->has_grad()) return;
            s->ensure_grad();
            for (size_t e = 0; e < n; ++e) {
                const T mv = out->val[e];
                s->grad[e] += out->grad[e] * beta * mv * (T(1) - mv);
            }
        });
    }
    return out;
}

/// Geometric schedule from 1 to beta_final across the training stage.
inline double cs_schedule(int epoch, int total_epochs, double beta_final) {
    if (beta_final < 1.0) throw ConfigError("cs: beta_final must be >= 1");
    if (total_epochs <= 1) return beta_final;
    const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return std::pow(beta_final, std::min(1.0, std::max(0.0, t)));
}

/// Rewind: positive logits return to their initial values, negative ones are
/// preserved; beta resets to 1.
template <class T>
void cs_rewind(MaskState<T>& st) {
    if (!st.s_logits || st.s_init.size() != st.s_logits->val.size())
        throw StateError("cs_rewind: no recorded initial logits");
    for (size_t e = 0; e < st.s_init.size(); ++e)
        if (st.s_logits->val[e] > T(0)) st.s_logits->val[e] = st.s_init[e];
    st.beta = T(1);
    ++st.update_count;
}

template <class T>
void cs_finalize(MaskState<T>& st) {
    st.hard_mask = Tensor<T>(st.s_logits->val.shape());
    for (size_t e = 0; e < st.hard_mask.size(); ++e)
        st.hard_mask[e] = st.s_logits->val[e] > T(0) ? T(1) : T(0);
    st.hard = true;
    ++st.update_count;
}

// ---------------------------------------------------------------------------
// DST: W_eff = W * step(|W| - T). The step gradient uses the piecewise-linear
// estimator max(0, 2 - 4|x|).

template <class T>
VarPtr<T> dst_apply(Tape<T>& tape, const VarPtr<T>& w, const VarPtr<T>& threshold) {
    const size_t n = w->val.size();
    const T thr = std::max(threshold->val[0], T(0));
    Tensor<T> y(w->val.shape());
    for (size_t e = 0; e < n; ++e) y[e] = std::fabs(w->val[e]) > thr ? w->val[e] : T(0);
    bool rg = (w->requires_grad || threshold->requires_grad) && tape.recording();
    auto out = make_var(std::move(y), rg);
    if (out->requires_grad) {
        tape.record([w, threshold, out, thr, n] {
            if (!out->has_grad()) return;
            auto est = [](T x) { return std::max(T(0), T(2) - T(4) * std::fabs(x)); };
            if (w->requires_grad) {
                w->ensure_grad();
                for (size_t e = 0; e < n; ++e) {
                    const T wv = w->val[e];
                    const T x = std::fabs(wv) - thr;
                    const T mask = x > T(0) ? T(1) : T(0);
                    const T sgn = wv > T(0) ? T(1) : (wv < T(0) ? T(-1) : T(0));
                    w->grad[e] += out->grad[e] * (mask + wv * est(x) * sgn);
                }
            }
            if (threshold->requires_grad) {
                threshold->ensure_grad();
                T acc = T(0);
                for (size_t e = 0; e < n; ++e)
                    acc += out->grad[e] * (-w->val[e] * est(std::fabs(w->val[e]) - thr));
                threshold->grad[0] += acc;
            }
        });
    }
    return out;
}

/// Sparse regularizer alpha * exp(-T), pushing the threshold up.
template <class T>
VarPtr<T> dst_reg(Tape<T>& tape, const VarPtr<T>& threshold, T alpha) {
    Tensor<T> v({1});
    v[0] = alpha * static_cast<T>(std::exp(-static_cast<double>(threshold->val[0])));
    auto out = make_var(std::move(v), threshold->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([threshold, out] {
            if (!out->has_grad()) return;
            threshold->ensure_grad();
            threshold->grad[0] += out->grad[0] * -out->val[0];
        });
    }
    return out;
}

/// Reset the learnable threshold when a layer pruned almost everything.
template <class T>
bool dst_reset_check(MaskState<T>& st, double layer_sparsity, double limit) {
    if (layer_sparsity > limit) {
        st.threshold->val[0] = T(0);
        ++st.update_count;
        return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// MDMM: modified differential method of multipliers.

struct MdmmConstraint {
    std::function<double(const std::vector<double>&)> value;
    std::function<std::vector<double>(const std::vector<double>&)> grad;
};

/// One descent step on theta plus multiplier ascent, for
///   min L(theta) s.t. C_k(theta) = 0.
/// Update direction: -grad(L) - sum_k (lambda_k + damping*C_k) * grad(C_k);
/// lambda_k += lr_lambda * C_k.
inline void mdmm_step(std::vector<double>& theta, std::vector<double>& lambdas,
                      const std::vector<MdmmConstraint>& constraints,
                      const std::function<std::vector<double>(const std::vector<double>&)>& loss_grad,
                      double lr, double lr_lambda, double damping) {
    if (lambdas.size() != constraints.size())
        throw ConfigError("mdmm_step: one multiplier per constraint required");
    std::vector<double> dir = loss_grad(theta);
    for (size_t k = 0; k < constraints.size(); ++k) {
        const double c = constraints[k].value(theta);
        if (std::isnan(c)) throw StateError("mdmm: NaN in constraint value");
        auto gc = constraints[k].grad(theta);
        for (size_t i = 0; i < theta.size(); ++i) dir[i] += (lambdas[k] + damping * c) * gc[i];
        lambdas[k] += lr_lambda * c;
    }
    for (size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * dir[i];
}

/// Smooth density of a weight tensor: mean of tanh^2(w / eps).
template <class T>
double mdmm_smooth_density(const Tensor<T>& w, double eps) {
    double acc = 0;
    for (size_t e = 0; e < w.size(); ++e) {
        const double t = std::tanh(static_cast<double>(w[e]) / eps);
        acc += t * t;
    }
    return acc / static_cast<double>(w.size());
}

/// Unstructured sparsity constraint C = target - (1 - smooth_density).
/// Adds (lambda + damping*C) * dC/dw into the weight gradient and performs
/// the multiplier ascent. Returns C.
template <class T>
double mdmm_accumulate(MaskState<T>& st, const VarPtr<T>& w, double target, double eps,
                       double damping, double lr_lambda) {
    const size_t n = w->val.size();
    double c;
    w->ensure_grad();
    if (st.granularity == PruneGranularity::structured) {
        const size_t I = w->val.dim(0), O = w->val.dim(1);
        std::vector<double> norms(O, 0.0);
        for (size_t i = 0; i < I; ++i)
            for (size_t o = 0; o < O; ++o)
                norms[o] += static_cast<double>(w->val[i * O + o]) * static_cast<double>(w->val[i * O + o]);
        double density = 0;
        std::vector<double> dd(O);
        for (size_t o = 0; o < O; ++o) {
            norms[o] = std::sqrt(norms[o]);
            const double t = std::tanh(norms[o] / eps);
            density += t * t / static_cast<double>(O);
            dd[o] = 2.0 * t * (1.0 - t * t) / (eps * static_cast<double>(O)); // d density / d norm_o
        }
        c = target - (1.0 - density);
        if (std::isnan(c)) throw StateError("mdmm: NaN in constraint value");
        const double coef = st.lambda + damping * c;
        for (size_t i = 0; i < I; ++i)
            for (size_t o = 0; o < O; ++o) {
                if (norms[o] <= 0) continue;
                const double dnorm_dw = static_cast<double>(w->val[i * O + o]) / norms[o];
                w->grad[i * O + o] += static_cast<T>(coef * dd[o] * dnorm_dw);
            }
    } else {
        const double density = mdmm_smooth_density(w->val, eps);
        c = target - (1.0 - density);
        if (std::isnan(c)) throw StateError("mdmm: NaN in constraint value");
        const double coef = st.lambda + damping * c;
        for (size_t e = 0; e < n; ++e) {
            const double t = std::tanh(static_cast<double>(w->val[e]) / eps);
            const double dC = 2.0 * t * (1.0 - t * t) / (eps * static_cast<double>(n));
            w->grad[e] += static_cast<T>(coef * dC);
        }
    }
    st.lambda += static_cast<T>(lr_lambda * c);
    ++st.update_count;
    return c;
}

/// Hard mask from the smooth measure: keep entries counted as dense
/// (tanh^2 > 1/2, i.e. |w| > eps * atanh(sqrt(1/2))).
template <class T>
void mdmm_finalize(MaskState<T>& st, const Tensor<T>& w, double eps) {
    const double cut = eps * 0.881373587019543; // atanh(sqrt(0.5))
    st.hard_mask = Tensor<T>(w.shape());
    if (st.granularity == PruneGranularity::structured) {
        const size_t I = w.dim(0), O = w.dim(1);
        st.unit_mask.assign(O, 0);
        for (size_t o = 0; o < O; ++o) {
            double norm = 0;
            for (size_t i = 0; i < I; ++i) norm += static_cast<double>(w[i * O + o]) * static_cast<double>(w[i * O + o]);
            st.unit_mask[o] = std::sqrt(norm) > cut ? 1 : 0;
            for (size_t i = 0; i < I; ++i) st.hard_mask[i * O + o] = st.unit_mask[o] ? T(1) : T(0);
        }
    } else {
        for (size_t e = 0; e < w.size(); ++e)
            st.hard_mask[e] = std::fabs(static_cast<double>(w[e])) > cut ? T(1) : T(0);
    }
    st.hard = true;
    ++st.update_count;
}

// ---------------------------------------------------------------------------
// PDP: distribution-aware soft masks against a per-epoch threshold.

/// Global r-quantile threshold over pooled |w|, then per-layer budgets as the
/// fraction of each layer's weights below it.
template <class T>
std::vector<double> pdp_budgets(const std::vector<const Tensor<T>*>& layer_weights, double r) {
    if (r < 0.0 || r >= 1.0) throw ConfigError(format("pdp: target sparsity %g outside [0,1)", r));
    std::vector<double> pooled;
    for (const auto* w : layer_weights)
        for (size_t e = 0; e < w->size(); ++e) pooled.push_back(std::fabs(static_cast<double>((*w)[e])));
    if (pooled.empty()) return {};
    std::sort(pooled.begin(), pooled.end());
    const size_t idx = std::min(pooled.size() - 1, static_cast<size_t>(r * static_cast<double>(pooled.size())));
    const double tau_g = pooled[idx];
    std::vector<double> budgets;
    for (const auto* w : layer_weights) {
        size_t below = 0;
        for (size_t e = 0; e < w->size(); ++e)
            if (std::fabs(static_cast<double>((*w)[e])) < tau_g) ++below;
        budgets.push_back(static_cast<double>(below) / static_cast<double>(w->size()));
    }
    return budgets;
}

/// Magnitude at the budget-quantile of |w| within one layer; the structured
/// variant takes the quantile over output-channel L2 norms instead.
template <class T>
double pdp_layer_threshold(const Tensor<T>& w, double budget, bool structured = false) {
    std::vector<double> mags;
    if (!structured) {
        mags.resize(w.size());
        for (size_t e = 0; e < w.size(); ++e) mags[e] = std::fabs(static_cast<double>(w[e]));
    } else {
        const size_t I = w.dim(0), O = w.dim(1);
        mags.resize(O, 0.0);
        for (size_t i = 0; i < I; ++i)
            for (size_t o = 0; o < O; ++o)
                mags[o] += static_cast<double>(w[i * O + o]) * static_cast<double>(w[i * O + o]);
        for (auto& m : mags) m = std::sqrt(m);
    }
    std::sort(mags.begin(), mags.end());
    // budgets are exact multiples of 1/n; round the index to keep them exact
    const size_t idx = std::min(mags.size() - 1,
                                static_cast<size_t>(std::llround(budget * static_cast<double>(mags.size()))));
    return mags[idx];
}

/// Soft mask m = sigmoid((w^2 - t^2)/tau) applied multiplicatively, with full
/// differentiation through both factors (t is constant within the epoch).
/// The structured variant compares squared channel norms instead of w^2.
template <class T>
VarPtr<T> pdp_soft_apply(Tape<T>& tape, const VarPtr<T>& w, double t, double tau, bool structured) {
    if (tau <= 0.0) throw ConfigError("pdp: temperature must be positive");
    const size_t n = w->val.size();
    Tensor<T> y(w->val.shape());
    auto mvals = std::make_shared<Tensor<T>>(w->val.shape());
    const double t2 = t * t;

    if (!structured) {
        for (size_t e = 0; e < n; ++e) {
            const double w2 = static_cast<double>(w->val[e]) * static_cast<double>(w->val[e]);
            const T m = static_cast<T>(1.0 / (1.0 + std::exp(-(w2 - t2) / tau)));
            (*mvals)[e] = m;
            y[e] = w->val[e] * m;
        }
    } else {
        const size_t I = w->val.dim(0), O = w->val.dim(1);
        for (size_t o = 0; o < O; ++o) {
            double c2 = 0;
            for (size_t i = 0; i < I; ++i)
                c2 += static_cast<double>(w->val[i * O + o]) * static_cast<double>(w->val[i * O + o]);
            const T m = static_cast<T>(1.0 / (1.0 + std::exp(-(c2 - t2) / tau)));
            for (size_t i = 0; i < I; ++i) {
                (*mvals)[i * O + o] = m;
                y[i * O + o] = w->val[i * O + o] * m;
            }
        }
    }

    auto out = make_var(std::move(y), w->requires_grad && tape.recording());
    if (out->requires_grad) {
        const T tauT = static_cast<T>(tau);
        tape.record([w, out, mvals, tauT, structured, n] {
            if (!out->has_grad()) return;
            w->ensure_grad();
            if (!structured) {
                for (size_t e = 0; e < n; ++e) {
                    const T m = (*mvals)[e];
                    const T wv = w->val[e];
                    w->grad[e] += out->grad[e] * (m + wv * m * (T(1) - m) * T(2) * wv / tauT);
                }
            } else {
                const size_t I = w->val.dim(0), O = w->val.dim(1);
                for (size_t o = 0; o < O; ++o) {
                    const T m = (*mvals)[o]; // same value down the column
                    T dot = T(0);
                    for (size_t i = 0; i < I; ++i) dot += out->grad[i * O + o] * w->val[i * O + o];
                    for (size_t i = 0; i < I; ++i) {
                        const T wv = w->val[i * O + o];
                        w->grad[i * O + o] +=
                            out->grad[i * O + o] * m + dot * m * (T(1) - m) * T(2) * wv / tauT;
                    }
                }
            }
        });
    }
    return out;
}

/// Round the soft mask at 1/2 and freeze it.
template <class T>
void pdp_round(MaskState<T>& st, const Tensor<T>& w, bool structured) {
    const double t2 = st.pdp_threshold * st.pdp_threshold;
    st.hard_mask = Tensor<T>(w.shape());
    if (!structured) {
        for (size_t e = 0; e < w.size(); ++e) {
            const double w2 = static_cast<double>(w[e]) * static_cast<double>(w[e]);
            st.hard_mask[e] = w2 >= t2 ? T(1) : T(0);
        }
    } else {
        const size_t I = w.dim(0), O = w.dim(1);
        st.unit_mask.assign(O, 0);
        for (size_t o = 0; o < O; ++o) {
            double c2 = 0;
            for (size_t i = 0; i < I; ++i) c2 += static_cast<double>(w[i * O + o]) * static_cast<double>(w[i * O + o]);
            st.unit_mask[o] = c2 >= t2 ? 1 : 0;
            for (size_t i = 0; i < I; ++i) st.hard_mask[i * O + o] = st.unit_mask[o] ? T(1) : T(0);
        }
    }
    st.hard = true;
    ++st.update_count;
}

// ---------------------------------------------------------------------------
// Wanda: one-shot scores |W| * ||X||_2 from a calibration batch.

template <class T>
Tensor<double> wanda_scores(const Tensor<T>& w, const std::vector<double>& input_norms) {
    const size_t I = w.dim(0), O = w.dim(1);
    if (input_norms.size() != I)
        throw ShapeError(format("wanda: %zu input norms for %zu inputs", input_norms.size(), I));
    Tensor<double> s({I, O});
    for (size_t i = 0; i < I; ++i)
        for (size_t o = 0; o < O; ++o) s[i * O + o] = std::fabs(static_cast<double>(w[i * O + o])) * input_norms[i];
    return s;
}

/// Unstructured one-shot pruning: per output unit, zero the lowest-score
/// fraction `target` of its input weights.
template <class T>
void wanda_prune_unstructured(MaskState<T>& st, const Tensor<double>& scores, double target) {
    if (target < 0.0 || target >= 1.0) throw ConfigError(format("wanda: target %g outside [0,1)", target));
    const size_t I = scores.dim(0), O = scores.dim(1);
    st.hard_mask = Tensor<T>(scores.shape(), T(1));
    const size_t kill = static_cast<size_t>(std::llround(target * static_cast<double>(I)));
    std::vector<size_t> order(I);
    for (size_t o = 0; o < O; ++o) {
        for (size_t i = 0; i < I; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return scores[a * O + o] < scores[b * O + o]; });
        for (size_t r = 0; r < kill && r < I; ++r) st.hard_mask[order[r] * O + o] = T(0);
    }
    st.hard = true;
    ++st.update_count;
}

/// N:M pruning: in every consecutive group of M input weights of an output
/// unit, zero the N lowest scores. M must divide the input dimension.
template <class T>
void wanda_prune_nm(MaskState<T>& st, const Tensor<double>& scores, int N, int M) {
    const size_t I = scores.dim(0), O = scores.dim(1);
    if (N < 0 || M <= 0 || N > M) throw ConfigError(format("wanda: invalid N:M = %d:%d", N, M));
    if (I % static_cast<size_t>(M) != 0)
        throw ConfigError(format("wanda: group size %d does not divide input dimension %zu", M, I));
    st.hard_mask = Tensor<T>(scores.shape(), T(1));
    std::vector<size_t> order(M);
    for (size_t o = 0; o < O; ++o)
        for (size_t g = 0; g + M <= I; g += M) {
            for (int j = 0; j < M; ++j) order[j] = g + j;
            std::stable_sort(order.begin(), order.end(),
                             [&](size_t a, size_t b) { return scores[a * O + o] < scores[b * O + o]; });
            for (int r = 0; r < N; ++r) st.hard_mask[order[r] * O + o] = T(0);
        }
    st.hard = true;
    ++st.update_count;
}

/// Current effective sparsity of a layer under its soft or hard mask.
template <class T>
double current_sparsity(const MaskState<T>& st, const Tensor<T>& w) {
    if (st.hard) return sparsity(st.hard_mask);
    switch (st.method) {
        case PruneMethod::autosparse: {
            const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(st.threshold->val[0])));
            size_t z = 0;
            for (size_t e = 0; e < w.size(); ++e)
                if (std::fabs(static_cast<double>(w[e])) <= sig) ++z;
            return static_cast<double>(z) / static_cast<double>(w.size());
        }
        case PruneMethod::cs: {
            size_t z = 0;
            for (size_t e = 0; e < st.s_logits->val.size(); ++e)
                if (st.s_logits->val[e] <= T(0)) ++z;
            return static_cast<double>(z) / static_cast<double>(st.s_logits->val.size());
        }
        case PruneMethod::dst: {
            const double thr = std::max(0.0, static_cast<double>(st.threshold->val[0]));
            size_t z = 0;
            for (size_t e = 0; e < w.size(); ++e)
                if (std::fabs(static_cast<double>(w[e])) <= thr) ++z;
            return static_cast<double>(z) / static_cast<double>(w.size());
        }
        case PruneMethod::pdp: {
            const double t2 = st.pdp_threshold * st.pdp_threshold;
            size_t z = 0;
            for (size_t e = 0; e < w.size(); ++e) {
                const double w2 = static_cast<double>(w[e]) * static_cast<double>(w[e]);
                if (w2 < t2) ++z;
            }
            return static_cast<double>(z) / static_cast<double>(w.size());
        }
        case PruneMethod::mdmm: {
            const double cut = 0.881373587019543 * static_cast<double>(st.mdmm_eps);
            size_t z = 0;
            for (size_t e = 0; e < w.size(); ++e)
                if (std::fabs(static_cast<double>(w[e])) <= cut) ++z;
            return static_cast<double>(z) / static_cast<double>(w.size());
        }
        default:
            return st.hard_mask.size() ? sparsity(st.hard_mask) : 0.0;
    }
}

} // namespace pqforge
