#include "flexkd/optimizer.hpp"

#include <cmath>

#include "flexkd/error.hpp"

namespace flexkd {

OptMethod opt_method_from_string(const std::string& s) {
    if (s == "sgd") return OptMethod::sgd;
    if (s == "adam") return OptMethod::adam;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

std::string to_string(OptMethod m) { return m == OptMethod::sgd ? "sgd" : "adam"; }

void OptimizerConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be positive");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    if (config_.method == OptMethod::adam) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
}

void Optimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        auto& value = p.values_mut();
        const auto& grad = p.grad();
        for (std::size_t i = 0; i < value.size(); ++i) {
            double g = grad.empty() ? 0.0 : grad[i];
            g += config_.weight_decay * value[i];
            if (config_.method == OptMethod::sgd) {
                value[i] -= config_.lr * g;
            } else {
                double& m = m_[pi][i];
                double& v = v_[pi][i];
                m = config_.beta1 * m + (1.0 - config_.beta1) * g;
                v = config_.beta2 * v + (1.0 - config_.beta2) * g * g;
                const double m_hat = m / bc1;
                const double v_hat = v / bc2;
                value[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
            }
            if (!std::isfinite(value[i])) {
                throw NumericError("optimizer produced a non-finite parameter");
            }
        }
    }
}

}  // namespace flexkd
