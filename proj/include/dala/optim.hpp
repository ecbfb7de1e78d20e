#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dala/tensor.hpp"

namespace dala {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Holds first/second moment buffers per parameter.
template <class T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamOptions options = {}) : params_(std::move(params)), opt_(options) {
        if (!(opt_.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
        for (const auto& p : params_) {
            first_.emplace_back(p.numel(), 0.0);
            second_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].has_grad())
                throw UsageError("adam: parameter " + std::to_string(i) + " has no gradient");
        ++steps_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto values = params_[i].mutable_data();
            const auto grad = params_[i].grad();
            auto& m = first_[i];
            auto& v = second_[i];
            for (std::size_t j = 0; j < values.size(); ++j) {
                const double g = static_cast<double>(grad[j]);
                m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
                v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
                const double mhat = m[j] / c1;
                const double vhat = v[j] / c2;
                values[j] = static_cast<T>(static_cast<double>(values[j]) - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return steps_; }
    const AdamOptions& options() const { return opt_; }

private:
    std::vector<Tensor<T>> params_;
    AdamOptions opt_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    long steps_ = 0;
};

}  // namespace dala
