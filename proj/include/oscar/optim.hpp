#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oscar/tensor.hpp"

namespace oscar {

enum class OptimizerKind { kAdam, kAdamW };

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    OptimizerKind kind = OptimizerKind::kAdam;
};

/// Adam / AdamW with bias correction. Moment buffers are kept in double and
/// indexed by parameter position; the names pin that order.
template <class Real>
class Optimizer {
   public:
    explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    std::int64_t step_count() const { return step_; }

    /// Applies one update using the gradients accumulated in each parameter.
    /// Parameters without an accumulated gradient are treated as g = 0.
    void step(ParamList<Real>& params) {
        if (names_.empty()) {
            for (auto& p : params) {
                names_.push_back(p.name);
                m_.emplace_back(p.tensor.numel(), 0.0);
                v_.emplace_back(p.tensor.numel(), 0.0);
            }
        }
        if (params.size() != names_.size()) throw ShapeError("optimizer: parameter list changed size");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].name != names_[i] || params[i].tensor.numel() != m_[i].size())
                throw ShapeError("optimizer: parameter '" + params[i].name + "' does not match its moment buffers");
            for (Real g : params[i].tensor.grad_data())
                if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in '" + params[i].name + "'");
        }
        ++step_;
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto data = params[i].tensor.mutable_data();
            auto grad = params[i].tensor.grad_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < data.size(); ++j) {
                double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
                double p = data[j];
                if (config_.kind == OptimizerKind::kAdam) {
                    g += config_.weight_decay * p;  // coupled L2
                } else {
                    p -= config_.lr * config_.weight_decay * p;  // decoupled
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                double mhat = m[j] / c1, vhat = v[j] / c2;
                p -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
                data[j] = static_cast<Real>(p);
            }
        }
    }

   private:
    OptimizerConfig config_;
    std::int64_t step_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_, v_;
};

/// target <- decay * target + (1 - decay) * source, in place.
template <class Real>
void ema_blend(BasicTensor<Real>& target, const BasicTensor<Real>& source, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw RangeError("ema_blend: decay must lie in [0, 1]");
    if (target.shape() != source.shape())
        throw ShapeError("ema_blend: shape " + shape_str(target.shape()) + " vs " + shape_str(source.shape()));
    auto t = target.mutable_data();
    auto s = source.data();
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<Real>(decay * static_cast<double>(t[i]) + (1.0 - decay) * static_cast<double>(s[i]));
}

}  // namespace oscar
