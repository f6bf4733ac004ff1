#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexkd/tensor.hpp"

namespace flexkd {

enum class OptMethod { sgd, adam };
OptMethod opt_method_from_string(const std::string& s);
std::string to_string(OptMethod m);

struct OptimizerConfig {
    OptMethod method = OptMethod::adam;
    double lr = 5e-4;
    double epsilon = 1e-8;
    double weight_decay = 1e-6;  // added to the gradient (L2 style)
    double beta1 = 0.9;
    double beta2 = 0.999;
    void validate() const;
};

class Optimizer {
public:
    Optimizer(std::vector<Tensor> params, OptimizerConfig config);

    // One update from the gradients currently stored on the parameter nodes.
    void step();

    const OptimizerConfig& config() const { return config_; }
    std::int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_, v_;  // adam moments, parallel to params_
    std::int64_t t_ = 0;
};

}  // namespace flexkd
