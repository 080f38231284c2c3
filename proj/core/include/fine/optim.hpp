#pragma once

#include <vector>

#include "fine/tensor.hpp"

namespace fine {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with decoupled weight decay. Only tensors whose requires_grad flag is
// set at step() time are touched; their grads are cleared afterwards.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig config);

    void step();
    void zero_grad();

    const AdamWConfig& config() const { return config_; }
    std::size_t steps_taken() const { return steps_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
    AdamWConfig config_;
    std::size_t steps_ = 0;
};

}  // namespace fine
