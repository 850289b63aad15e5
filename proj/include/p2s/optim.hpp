#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "p2s/tensor.hpp"

namespace p2s {

enum class OptimizerKind { adam, sgd };

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order optimizer over a fixed parameter list. step() applies one
/// update with the given learning rate and zeroes the gradients.
template <typename T>
class Optimizer {
   public:
    Optimizer(std::vector<Tensor<T>> params, OptimizerKind kind = OptimizerKind::adam, AdamOptions adam = {})
        : params_(std::move(params)), kind_(kind), adam_(adam) {
        if (kind_ == OptimizerKind::adam) {
            for (auto& p : params_) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].has_grad())
                throw std::logic_error("optimizer: parameter " + std::to_string(i) + " has no gradient");
        ++t_;
        const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto w = params_[i].mutable_data();
            auto g = params_[i].mutable_grad();
            if (kind_ == OptimizerKind::sgd) {
                for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(w[j] - lr * g[j]);
            } else {
                auto& m = m_[i];
                auto& v = v_[i];
                for (std::size_t j = 0; j < w.size(); ++j) {
                    const double gj = g[j];
                    m[j] = adam_.beta1 * m[j] + (1.0 - adam_.beta1) * gj;
                    v[j] = adam_.beta2 * v[j] + (1.0 - adam_.beta2) * gj * gj;
                    const double mhat = m[j] / bc1;
                    const double vhat = v[j] / bc2;
                    w[j] = static_cast<T>(w[j] - lr * mhat / (std::sqrt(vhat) + adam_.eps));
                }
            }
            params_[i].zero_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return t_; }

   private:
    std::vector<Tensor<T>> params_;
    OptimizerKind kind_;
    AdamOptions adam_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace p2s
