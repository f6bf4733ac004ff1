#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <unordered_set>
#include <vector>

#include "flexkd/tensor.hpp"

namespace flexkd {

// Reverse-mode tape. Ops are recorded in execution order (which is a
// topological order by construction); backward() zeroes every gradient the
// tape can reach, seeds the loss with 1 and sweeps the records in reverse.
// Gradients are materialized for every node in the graph, so grad_wrt works
// on intermediate activations, not only on leaf parameters.
//
// One tape is one thread of execution; independent tapes may run in
// parallel.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- matrix ops (rank-2) ----
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& x);
    Tensor bias_add(const Tensor& x, const Tensor& b);      // [n,d] + [d]
    Tensor select_rows(const Tensor& x, std::vector<int> rows);
    Tensor select_columns(const Tensor& x, std::vector<int> cols);

    // ---- elementwise; binary ops take equal shapes or scalar-with-tensor ----
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor div(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& x, double c);
    Tensor abs(const Tensor& x);
    Tensor tanh(const Tensor& x);
    Tensor gelu(const Tensor& x);
    Tensor relu(const Tensor& x);
    Tensor sigmoid(const Tensor& x);
    Tensor exp(const Tensor& x);
    Tensor log(const Tensor& x);   // requires strictly positive inputs
    Tensor sqrt(const Tensor& x);  // requires non-negative inputs

    // ---- reductions; no axis reduces to a scalar, axis removes that dim ----
    Tensor reduce_sum(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);
    Tensor reduce_mean(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);
    // Max routes its gradient to the first maximal element of each slice.
    Tensor reduce_max(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);

    // ---- shape ----
    Tensor reshape(const Tensor& x, std::vector<std::size_t> new_shape);

    // ---- fused numerics ----
    // Mean over rows of -log softmax(logits)[target]; stabilized by max
    // subtraction.
    Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);
    Tensor log_softmax(const Tensor& x);  // per row of a rank-2 tensor

    // Per-column correlation statistic between two [n,d] tensors, computed
    // over the row (sample) dimension; uncentered by default, Pearson-style
    // when centered. Zero-norm columns yield exactly 0 instead of NaN; their
    // count is reported through zero_norm_count and they pass no gradient.
    Tensor corr_cols(const Tensor& a, const Tensor& b, bool centered = false,
                     int* zero_norm_count = nullptr);

    // Causal running mean over the sequence axis of an [batch*seq, d] tensor:
    // output row (b,t) is the mean of input rows (b,0..t).
    Tensor causal_prefix_mean(const Tensor& x, std::size_t batch, std::size_t seq);

    // ---- driver ----
    // Deterministic reverse sweep; two calls on the same tape produce
    // bit-identical gradients.
    void backward(const Tensor& loss);
    // d(loss)/d(node); node may be any tensor recorded on this tape.
    Tensor grad_wrt(const Tensor& loss, const Tensor& node);

    bool contains(const Tensor& t) const;
    std::size_t num_ops() const { return ops_.size(); }

private:
    struct OpRecord {
        const char* name;
        std::vector<std::shared_ptr<TensorNode>> inputs;
        std::shared_ptr<TensorNode> output;
        std::function<void()> backprop;  // reads output grad, accumulates into inputs
    };

    enum class BinaryKind { add, sub, mul, div };
    enum class ReduceKind { sum, mean, max };

    Tensor binary(BinaryKind kind, const char* name, const Tensor& a, const Tensor& b);
    Tensor unary(const char* name, const Tensor& x, double (*f)(double), double (*df)(double));
    Tensor reduce(ReduceKind kind, const char* name, const Tensor& x,
                  std::optional<std::size_t> axis);

    // Creates the output node, validates finiteness, registers membership and
    // pushes an OpRecord whose backprop is filled by set_backprop.
    Tensor adopt(const char* name, std::vector<std::size_t> shape, std::vector<double> values,
                 std::initializer_list<Tensor> inputs);
    void set_backprop(std::function<void()> fn);

    std::vector<OpRecord> ops_;
    std::unordered_set<const TensorNode*> members_;
};

}  // namespace flexkd
