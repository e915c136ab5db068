#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pqforge/autodiff.hpp"
#include "pqforge/kernels.hpp"

namespace pqforge {

/// Bias-corrected Adam over a fixed parameter list.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Parameter<T>*> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
         T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params_) {
            m_.emplace_back(p->var->val.shape());
            v_.emplace_back(p->var->val.shape());
        }
    }

    int64_t step_count() const { return step_; }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }

    /// One update; requires gradients populated by backward. Gradients are
    /// zeroed afterwards.
    void step() {
        ++step_;
        kernels::AdamParams<T> kp;
        kp.beta1 = beta1_;
        kp.beta2 = beta2_;
        kp.eps = eps_;
        kp.lr = lr_;
        kp.inv_bias1 = T(1) / (T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(step_))));
        kp.inv_bias2 = T(1) / (T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(step_))));
        for (size_t i = 0; i < params_.size(); ++i) {
            Parameter<T>* p = params_[i];
            if (!p->trainable) continue;
            if (!p->var->has_grad())
                throw StateError("adam: missing gradient for parameter \"" + p->name +
                                 "\"; run backward first");
            kernels::table<T>().adam_update(p->var->val.data(), p->var->grad.data(), m_[i].data(),
                                            v_[i].data(), p->var->val.size(), kp);
            p->var->zero_grad();
        }
    }

    /// Drop moment history (used when weights are rewound to a snapshot).
    void reset_moments() {
        for (auto& t : m_) t.zero();
        for (auto& t : v_) t.zero();
        step_ = 0;
    }

private:
    std::vector<Parameter<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    int64_t step_ = 0;
    T lr_ = T(1e-3), beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
};

} // namespace pqforge
