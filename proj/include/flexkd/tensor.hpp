#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace flexkd {

class Tape;

// One graph node: a value buffer plus, after a backward pass, a gradient
// buffer of the same shape. Nodes are shared between Tensor handles and the
// tape that recorded the op producing them.
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a backward pass touches this node
    bool requires_grad = false;
    const Tape* producer = nullptr;  // tape whose op created this node; null for leaves
};

std::string shape_str(const std::vector<std::size_t>& shape);
std::size_t shape_numel(const std::vector<std::size_t>& shape);

// Value-semantics handle onto a shared node. All math is double precision;
// leaf construction rejects non-finite data so NaN/Inf never enter a graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t rank() const;

    const std::vector<double>& values() const;
    std::vector<double>& values_mut();
    // Gradient buffer; empty when no backward pass has reached this node.
    const std::vector<double>& grad() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    double item() const;  // scalar tensors only
    double at(std::size_t i) const;
    double at(std::size_t i, std::size_t j) const;

    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> shared_node() const { return node_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// Row-stochastic softmax of a rank-2 tensor's values (plain math, no tape).
std::vector<double> softmax_rows(const Tensor& logits);

}  // namespace flexkd
