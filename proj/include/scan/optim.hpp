#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "scan/errors.hpp"
#include "scan/tensor.hpp"

namespace scan {

struct SgdConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// Decay is applied to convolution and fully connected weights only;
/// batchnorm affine parameters and biases are left undecayed.
inline bool is_decayed(const std::string& name) {
    return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

/// SGD with heavy-ball momentum:  v = mu * v + (g + wd * w);  w -= lr * v.
template <class T>
class Sgd {
public:
    Sgd(std::vector<NamedTensor<T>> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.tensor->numel(), T(0));
    }

    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
    double learning_rate() const { return cfg_.learning_rate; }
    const SgdConfig& config() const { return cfg_; }

    void step() {
        const T lr = static_cast<T>(cfg_.learning_rate);
        const T mu = static_cast<T>(cfg_.momentum);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& p = *params_[i].tensor;
            if (!p.has_grad()) continue;
            const T wd = is_decayed(params_[i].name) ? static_cast<T>(cfg_.weight_decay) : T(0);
            auto w = p.mutable_data();
            auto g = p.grad();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                v[k] = mu * v[k] + (g[k] + wd * w[k]);
                w[k] -= lr * v[k];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor->zero_grad();
    }

    const std::vector<NamedTensor<T>>& params() const { return params_; }
    std::vector<std::vector<T>>& velocity() { return velocity_; }
    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    SgdConfig cfg_;
};

}  // namespace scan
