#pragma once

// Adam/AdamW with bias correction and optional decoupled weight decay.
// Parameter iteration order is the map's lexicographic name order, so update
// sequences replay deterministically.

#include <cmath>
#include <string>
#include <vector>

#include "retloc/params.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; 0 disables
};

class Adam {
public:
    Adam(ParamMap params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, t] : params_) {
            moments_m_[name] = std::vector<double>(t.size(), 0.0);
            moments_v_[name] = std::vector<double>(t.size(), 0.0);
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::int64_t step_count() const { return step_; }
    const ParamMap& params() const { return params_; }

    /// One adaptive-moment update. Every parameter must have been reached by a
    /// backward pass (its gradient buffer allocated); zero gradients are fine.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& [name, t] : params_) {
            if (t.node()->grad.empty())
                throw UsageError("optimizer step: no gradient for parameter " + name +
                                 " (backward not run?)");
            const auto& g = t.node()->grad;
            auto& m = moments_m_[name];
            auto& v = moments_v_[name];
            auto& w = t.data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (cfg_.weight_decay != 0.0) w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
            }
        }
    }

    void zero_grad() { zero_grads(params_); }

    /// Moment accumulators for checkpointing, keyed like the parameters.
    const std::vector<double>& moment_m(const std::string& name) const {
        return moments_m_.at(name);
    }
    const std::vector<double>& moment_v(const std::string& name) const {
        return moments_v_.at(name);
    }

private:
    ParamMap params_;
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::map<std::string, std::vector<double>> moments_m_, moments_v_;
};

enum class TrainStage { Coarse, Matcher, Regressor };

/// Coarse stage: base rate for the first 9 epochs, divided by 10 afterwards.
/// Fine-stage phases train at a constant rate.
inline double lr_schedule(int epoch, double base_lr, TrainStage stage) {
    if (epoch < 0) throw UsageError("lr_schedule: negative epoch");
    if (stage == TrainStage::Coarse && epoch >= 9) return base_lr / 10.0;
    return base_lr;
}

}  // namespace retloc
