#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pqforge/kernels.hpp"
#include "pqforge/rng.hpp"
#include "pqforge/tensor.hpp"

namespace pqforge {

/// Node value in the dynamic reverse-mode graph. grad is allocated lazily on
/// first accumulation; an empty grad means "no gradient flowed here".
template <class T>
struct Var {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;

    explicit Var(Tensor<T> v, bool rg = false) : val(std::move(v)), requires_grad(rg) {}

    bool has_grad() const { return grad.size() == static_cast<size_t>(val.size()) && val.size() > 0; }
    void ensure_grad() {
        if (!has_grad()) grad = Tensor<T>(val.shape());
    }
    void zero_grad() {
        if (has_grad()) grad.zero();
    }
};

template <class T>
using VarPtr = std::shared_ptr<Var<T>>;

template <class T>
VarPtr<T> make_var(Tensor<T> v, bool requires_grad = false) {
    return std::make_shared<Var<T>>(std::move(v), requires_grad);
}

/// Named trainable tensor.
template <class T>
struct Parameter {
    VarPtr<T> var;
    std::string name;
    bool trainable = true;
};

/// Recording tape for one forward pass. Ops append backward closures in
/// execution order; backward() runs them in reverse and clears the graph.
template <class T>
class Tape {
public:
    bool recording() const { return enabled_; }
    void set_recording(bool on) { enabled_ = on; }

    void record(std::function<void()> fn) {
        if (enabled_) nodes_.push_back(std::move(fn));
    }

    size_t size() const { return nodes_.size(); }

    void backward(const VarPtr<T>& loss) {
        if (nodes_.empty()) throw StateError("backward called without a recorded forward graph");
        if (loss->val.size() != 1) throw StateError("backward root must be a scalar");
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
    bool enabled_ = true;
};

/// RAII pause of graph recording (evaluation passes).
template <class T>
class NoGradGuard {
public:
    explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) { tape_.set_recording(false); }
    ~NoGradGuard() { tape_.set_recording(prev_); }

private:
    Tape<T>& tape_;
    bool prev_;
};

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    const size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c, r});
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

// ---------------------------------------------------------------------------
// ops

/// y[B,O] = x[B,I] * W[I,O] + b[O]
template <class T>
VarPtr<T> dense(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
    if (x->val.ndim() != 2 || w->val.ndim() != 2 || x->val.dim(1) != w->val.dim(0))
        throw ShapeError("dense: inner dims mismatch " + shape_str(x->val.shape()) + " vs " +
                         shape_str(w->val.shape()));
    if (b->val.size() != w->val.dim(1))
        throw ShapeError("dense: bias shape " + shape_str(b->val.shape()) + " vs weights " +
                         shape_str(w->val.shape()));
    const size_t B = x->val.dim(0), I = x->val.dim(1), O = w->val.dim(1);
    Tensor<T> y({B, O});
    kernels::table<T>().matmul_acc(x->val.data(), w->val.data(), y.data(), B, I, O);
    for (size_t r = 0; r < B; ++r)
        for (size_t o = 0; o < O; ++o) y[r * O + o] += b->val[o];

    bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
    auto out = make_var(std::move(y), rg && tape.recording());
    if (out->requires_grad) {
        tape.record([x, w, b, out, B, I, O] {
            if (!out->has_grad()) return;
            const Tensor<T>& gy = out->grad;
            if (x->requires_grad) {
                x->ensure_grad();
                Tensor<T> wt = transpose2d(w->val);
                kernels::table<T>().matmul_acc(gy.data(), wt.data(), x->grad.data(), B, O, I);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                Tensor<T> xt = transpose2d(x->val);
                kernels::table<T>().matmul_acc(xt.data(), gy.data(), w->grad.data(), I, B, O);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t r = 0; r < B; ++r)
                    for (size_t o = 0; o < O; ++o) b->grad[o] += gy[r * O + o];
            }
        });
    }
    return out;
}

enum class Activation { relu, tanh_fn, hard_tanh, linear };

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh_fn;
    if (s == "hard_tanh") return Activation::hard_tanh;
    if (s == "linear") return Activation::linear;
    throw ConfigError("unknown activation kind \"" + s + "\"");
}

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh_fn: return "tanh";
        case Activation::hard_tanh: return "hard_tanh";
        case Activation::linear: return "linear";
    }
    return "?";
}

template <class T>
VarPtr<T> activation(Tape<T>& tape, const VarPtr<T>& x, Activation kind) {
    if (kind == Activation::linear) return x;
    const size_t n = x->val.size();
    Tensor<T> y(x->val.shape());
    switch (kind) {
        case Activation::relu:
            kernels::table<T>().relu_fwd(x->val.data(), y.data(), n);
            break;
        case Activation::hard_tanh:
            kernels::table<T>().hard_tanh_fwd(x->val.data(), y.data(), n);
            break;
        case Activation::tanh_fn:
            for (size_t i = 0; i < n; ++i) y[i] = std::tanh(x->val[i]);
            break;
        default:
            break;
    }
    auto out = make_var(std::move(y), x->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([x, out, kind, n] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            switch (kind) {
                case Activation::relu:
                    kernels::table<T>().relu_bwd(x->val.data(), out->grad.data(), x->grad.data(), n);
                    break;
                case Activation::hard_tanh:
                    kernels::table<T>().hard_tanh_bwd(x->val.data(), out->grad.data(), x->grad.data(), n);
                    break;
                case Activation::tanh_fn:
                    for (size_t i = 0; i < n; ++i) {
                        const T t = out->val[i];
                        x->grad[i] += out->grad[i] * (T(1) - t * t);
                    }
                    break;
                default:
                    break;
            }
        });
    }
    return out;
}

/// Elementwise product, used for mask application.
template <class T>
VarPtr<T> hadamard(Tape<T>& tape, const VarPtr<T>& a, const VarPtr<T>& b) {
    require_same_shape(a->val, b->val, "hadamard");
    const size_t n = a->val.size();
    Tensor<T> y(a->val.shape());
    for (size_t i = 0; i < n; ++i) y[i] = a->val[i] * b->val[i];
    auto out = make_var(std::move(y), (a->requires_grad || b->requires_grad) && tape.recording());
    if (out->requires_grad) {
        tape.record([a, b, out, n] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->val[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->val[i];
            }
        });
    }
    return out;
}

/// Elementwise sum (same shape); scalar losses combine through this.
template <class T>
VarPtr<T> vadd(Tape<T>& tape, const VarPtr<T>& a, const VarPtr<T>& b) {
    require_same_shape(a->val, b->val, "vadd");
    const size_t n = a->val.size();
    Tensor<T> y(a->val.shape());
    for (size_t i = 0; i < n; ++i) y[i] = a->val[i] + b->val[i];
    auto out = make_var(std::move(y), (a->requires_grad || b->requires_grad) && tape.recording());
    if (out->requires_grad) {
        tape.record([a, b, out, n] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

template <class T>
VarPtr<T> vscale(Tape<T>& tape, const VarPtr<T>& a, T c) {
    const size_t n = a->val.size();
    Tensor<T> y(a->val.shape());
    for (size_t i = 0; i < n; ++i) y[i] = a->val[i] * c;
    auto out = make_var(std::move(y), a->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([a, out, c, n] {
            if (!out->has_grad()) return;
            a->ensure_grad();
            for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

/// Mean softmax cross-entropy over the batch, log-sum-exp stabilized.
/// Gradient per sample is (softmax - onehot)/B.
template <class T>
VarPtr<T> softmax_ce(Tape<T>& tape, const VarPtr<T>& logits, const std::vector<int>& labels) {
    if (logits->val.ndim() != 2 || logits->val.dim(0) != labels.size())
        throw ShapeError("softmax_ce: logits " + shape_str(logits->val.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const size_t B = logits->val.dim(0), C = logits->val.dim(1);
    auto probs = std::make_shared<Tensor<T>>(Shape{B, C});
    T loss_sum = T(0);
    for (size_t r = 0; r < B; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<size_t>(label) >= C)
            throw DataError(format("softmax_ce: label %d out of range [0,%zu)", label, C));
        const T* row = logits->val.data() + r * C;
        T mx = row[0];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (size_t c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
        const T lse = mx + std::log(sum);
        for (size_t c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(row[c] - lse);
        loss_sum += lse - row[label];
    }
    Tensor<T> loss({1});
    loss[0] = loss_sum / static_cast<T>(B);
    auto out = make_var(std::move(loss), logits->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([logits, out, probs, labels, B, C] {
            if (!out->has_grad()) return;
            logits->ensure_grad();
            const T up = out->grad[0] / static_cast<T>(B);
            for (size_t r = 0; r < B; ++r) {
                T* g = logits->grad.data() + r * C;
                const T* p = probs->data() + r * C;
                for (size_t c = 0; c < C; ++c) g[c] += up * p[c];
                g[labels[r]] -= up;
            }
        });
    }
    return out;
}

/// Batch normalization over the feature axis of x[B,F].
template <class T>
VarPtr<T> batchnorm(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                    T eps) {
    if (x->val.ndim() != 2 || x->val.dim(1) != gamma->val.size())
        throw ShapeError("batchnorm: x " + shape_str(x->val.shape()) + " vs gamma " +
                         shape_str(gamma->val.shape()));
    const size_t B = x->val.dim(0), F = x->val.dim(1);
    if (training && B < 2) throw StateError("batchnorm: training mode requires batch size >= 2");

    auto mean = std::make_shared<Tensor<T>>(Shape{F});
    auto var = std::make_shared<Tensor<T>>(Shape{F});
    if (training) {
        for (size_t r = 0; r < B; ++r)
            for (size_t f = 0; f < F; ++f) (*mean)[f] += x->val[r * F + f];
        for (size_t f = 0; f < F; ++f) (*mean)[f] /= static_cast<T>(B);
        for (size_t r = 0; r < B; ++r)
            for (size_t f = 0; f < F; ++f) {
                const T d = x->val[r * F + f] - (*mean)[f];
                (*var)[f] += d * d;
            }
        for (size_t f = 0; f < F; ++f) (*var)[f] /= static_cast<T>(B);
        // running stats keep the unbiased variance
        const T unbias = B > 1 ? static_cast<T>(B) / static_cast<T>(B - 1) : T(1);
        for (size_t f = 0; f < F; ++f) {
            running_mean[f] = (T(1) - momentum) * running_mean[f] + momentum * (*mean)[f];
            running_var[f] = (T(1) - momentum) * running_var[f] + momentum * (*var)[f] * unbias;
        }
    } else {
        *mean = running_mean;
        *var = running_var;
    }

    auto xhat = std::make_shared<Tensor<T>>(Shape{B, F});
    auto inv_std = std::make_shared<Tensor<T>>(Shape{F});
    for (size_t f = 0; f < F; ++f) (*inv_std)[f] = T(1) / std::sqrt((*var)[f] + eps);
    Tensor<T> y({B, F});
    for (size_t r = 0; r < B; ++r)
        for (size_t f = 0; f < F; ++f) {
            const T xh = (x->val[r * F + f] - (*mean)[f]) * (*inv_std)[f];
            (*xhat)[r * F + f] = xh;
            y[r * F + f] = gamma->val[f] * xh + beta->val[f];
        }

    bool rg = (x->requires_grad || gamma->requires_grad || beta->requires_grad) && tape.recording();
    auto out = make_var(std::move(y), rg);
    if (out->requires_grad) {
        tape.record([x, gamma, beta, out, xhat, inv_std, training, B, F] {
            if (!out->has_grad()) return;
            const Tensor<T>& gy = out->grad;
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (size_t r = 0; r < B; ++r)
                    for (size_t f = 0; f < F; ++f) gamma->grad[f] += gy[r * F + f] * (*xhat)[r * F + f];
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (size_t r = 0; r < B; ++r)
                    for (size_t f = 0; f < F; ++f) beta->grad[f] += gy[r * F + f];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                if (!training) {
                    for (size_t r = 0; r < B; ++r)
                        for (size_t f = 0; f < F; ++f)
                            x->grad[r * F + f] += gy[r * F + f] * gamma->val[f] * (*inv_std)[f];
                } else {
                    // d/dx of batch-stat normalization
                    std::vector<T> sum_gy(F, T(0)), sum_gy_xh(F, T(0));
                    for (size_t r = 0; r < B; ++r)
                        for (size_t f = 0; f < F; ++f) {
                            sum_gy[f] += gy[r * F + f];
                            sum_gy_xh[f] += gy[r * F + f] * (*xhat)[r * F + f];
                        }
                    const T invB = T(1) / static_cast<T>(B);
                    for (size_t r = 0; r < B; ++r)
                        for (size_t f = 0; f < F; ++f) {
                            const T gxh = gy[r * F + f] * gamma->val[f];
                            x->grad[r * F + f] +=
                                (*inv_std)[f] *
                                (gxh - invB * gamma->val[f] * (sum_gy[f] + (*xhat)[r * F + f] * sum_gy_xh[f]));
                        }
                }
            }
        });
    }
    return out;
}

/// Reshape (copies; sizes must match).
template <class T>
VarPtr<T> reshape(Tape<T>& tape, const VarPtr<T>& x, Shape shape) {
    if (shape_numel(shape) != x->val.size())
        throw ShapeError("reshape: cannot view " + shape_str(x->val.shape()) + " as " + shape_str(shape));
    Tensor<T> y(std::move(shape), x->val.vec());
    auto out = make_var(std::move(y), x->requires_grad && tape.recording());
    if (out->requires_grad) {
        tape.record([x, out] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// initialization

/// Kaiming-uniform fan-in init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <class T>
void kaiming_uniform(Tensor<T>& w, size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

} // namespace pqforge
