#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "metalora/tensor.hpp"

namespace metalora {

enum class OptKind { sgd, adam };

// Parameter-list optimizer. The step counter and moment buffers persist
// across steps; parameters are identified by their position in the list.
template <typename T>
class OptimizerT {
public:
    OptimizerT(OptKind kind, std::vector<TensorT<T>> params, T lr)
        : kind_(kind), lr_(lr), params_(std::move(params)) {
        if (kind_ == OptKind::adam) {
            m_.resize(params_.size());
            v_.resize(params_.size());
            for (size_t i = 0; i < params_.size(); ++i) {
                m_[i].assign(params_[i].numel(), T(0));
                v_[i].assign(params_[i].numel(), T(0));
            }
        }
    }

    OptKind kind() const { return kind_; }
    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }
    void set_betas(T b1, T b2) { beta1_ = b1; beta2_ = b2; }
    int64_t step_count() const { return step_count_; }
    const std::vector<TensorT<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].has_grad())
                throw state_error("optimizer step: parameter " + std::to_string(i) +
                                  " has no gradient");
        ++step_count_;
        if (kind_ == OptKind::sgd) {
            for (auto& p : params_) {
                auto& d = p.data();
                const auto& g = p.grad();
                for (size_t j = 0; j < d.size(); ++j) d[j] -= lr_ * g[j];
            }
            return;
        }
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_count_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_count_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& d = params_[i].data();
            const auto& g = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < d.size(); ++j) {
                m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                d[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    OptKind kind_;
    T lr_;
    T beta1_ = static_cast<T>(0.9);
    T beta2_ = static_cast<T>(0.999);
    T eps_ = static_cast<T>(1e-8);
    int64_t step_count_ = 0;
    std::vector<TensorT<T>> params_;
    std::vector<std::vector<T>> m_, v_;
};

enum class LrMode { cyclic_cosine_after_warmup, constant };

// Cyclic schedule: linear warmup from warmup_start to peak, then cosine
// back toward warmup_start over the rest of the cycle; repeats every
// total_iters.
struct LrSchedule {
    int warmup_iters = 25;
    double warmup_start = 1e-5;
    double peak = 1e-3;
    int total_iters = 100;
    LrMode mode = LrMode::cyclic_cosine_after_warmup;

    static LrSchedule constant_lr(double lr) {
        LrSchedule s;
        s.mode = LrMode::constant;
        s.warmup_start = lr;
        s.peak = lr;
        return s;
    }

    double at(int64_t iter) const {
        if (iter < 0) throw config_error("lr schedule: negative iteration");
        if (mode == LrMode::constant) return peak;
        const int64_t t = iter % total_iters;
        if (t < warmup_iters)
            return warmup_start + (peak - warmup_start) * static_cast<double>(t) / warmup_iters;
        const double phase = static_cast<double>(t - warmup_iters) / (total_iters - warmup_iters);
        return warmup_start + (peak - warmup_start) * 0.5 * (1.0 + std::cos(M_PI * phase));
    }
};

inline double lr_at(const LrSchedule& s, int64_t iter) { return s.at(iter); }

} // namespace metalora
