#include "flexkd/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "flexkd/error.hpp"

namespace flexkd {

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor shape has a zero dimension: " + shape_str(shape));
    }
}

void check_finite_data(const std::vector<double>& data) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError("tensor data contains a non-finite value");
    }
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    }
    check_finite_data(data);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rank() const { return node_->shape.size(); }

const std::vector<double>& Tensor::values() const { return node_->value; }

std::vector<double>& Tensor::values_mut() { return node_->value; }

const std::vector<double>& Tensor::grad() const { return node_->grad; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::size_t i) const { return node_->value.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw DimensionError("at(i,j) on tensor of shape " + shape_str(shape()));
    return node_->value.at(i * node_->shape[1] + j);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() on tensor of shape " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() on tensor of shape " + shape_str(shape()));
    return node_->shape[1];
}

std::vector<double> softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) {
        throw DimensionError("softmax_rows expects a rank-2 tensor, got " +
                             shape_str(logits.shape()));
    }
    const std::size_t n = logits.rows(), c = logits.cols();
    const auto& x = logits.values();
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(x[i * c + j] - mx);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    return out;
}

}  // namespace flexkd
