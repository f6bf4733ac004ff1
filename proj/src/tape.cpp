#include "flexkd/tape.hpp"

#include <algorithm>
#include <cmath>

#include "flexkd/error.hpp"

namespace flexkd {

namespace {

void ensure_zero_grad(TensorNode* n) {
    n->grad.assign(n->value.size(), 0.0);
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                             shape_str(t.shape()));
    }
}

double f_abs(double x) { return std::fabs(x); }
double df_abs(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }  // sign(0) = 0

double f_tanh(double x) { return std::tanh(x); }
double df_tanh(double x) {
    const double t = std::tanh(x);
    return 1.0 - t * t;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double f_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double df_gelu(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

double f_relu(double x) { return x > 0.0 ? x : 0.0; }
double df_relu(double x) { return x > 0.0 ? 1.0 : 0.0; }

double f_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double df_sigmoid(double x) {
    const double s = f_sigmoid(x);
    return s * (1.0 - s);
}

double f_exp(double x) { return std::exp(x); }
double df_exp(double x) { return std::exp(x); }

double f_log(double x) { return std::log(x); }
double df_log(double x) { return 1.0 / x; }

double f_sqrt(double x) { return std::sqrt(x); }
double df_sqrt(double x) { return 0.5 / std::sqrt(x); }

}  // namespace

Tensor Tape::adopt(const char* name, std::vector<std::size_t> shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(name) + " produced a non-finite value");
        }
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->producer = this;

    OpRecord rec;
    rec.name = name;
    for (const Tensor& in : inputs) {
        if (!in.defined()) throw GraphError(std::string(name) + ": undefined input tensor");
        if (in.node()->producer != nullptr && in.node()->producer != this) {
            throw GraphError(std::string(name) + ": input tensor belongs to another tape");
        }
        node->requires_grad = node->requires_grad || in.requires_grad();
        members_.insert(in.node());
        rec.inputs.push_back(in.shared_node());
    }
    members_.insert(node.get());
    rec.output = node;
    ops_.push_back(std::move(rec));
    return Tensor(std::move(node));
}

void Tape::set_backprop(std::function<void()> fn) {
    ops_.back().backprop = std::move(fn);
}

bool Tape::contains(const Tensor& t) const {
    return t.defined() && members_.count(t.node()) > 0;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined loss tensor");
    if (!contains(loss)) throw GraphError("backward: loss is not on this tape");
    if (loss.size() != 1) {
        throw GraphError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    for (auto& op : ops_) {
        ensure_zero_grad(op.output.get());
        for (auto& in : op.inputs) ensure_zero_grad(in.get());
    }
    loss.node()->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backprop();
}

Tensor Tape::grad_wrt(const Tensor& loss, const Tensor& node) {
    if (!node.defined()) throw GraphError("grad_wrt: undefined node tensor");
    if (!contains(node)) throw GraphError("grad_wrt: node is not on this tape");
    backward(loss);
    return Tensor::from(node.shape(), node.node()->grad);
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    Tensor c = adopt("matmul", {m, n}, std::move(out), {a, b});
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = c.node();
    set_backprop([an, bn, cn, m, k, n]() {
        const auto& g = cn->grad;
        // dA += g . B^T
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                double acc = 0.0;
                const double* grow = g.data() + i * n;
                const double* brow = bn->value.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                an->grad[i * k + p] += acc;
            }
        }
        // dB += A^T . g
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t i = 0; i < m; ++i) {
                const double aip = an->value[i * k + p];
                const double* grow = g.data() + i * n;
                double* brow = bn->grad.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
            }
        }
    });
    return c;
}

Tensor Tape::transpose(const Tensor& x) {
    check_rank2(x, "transpose");
    const std::size_t m = x.rows(), n = x.cols();
    const auto& xv = x.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    }
    Tensor y = adopt("transpose", {n, m}, std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, m, n]() {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += yn->grad[j * m + i];
        }
    });
    return y;
}

Tensor Tape::bias_add(const Tensor& x, const Tensor& b) {
    check_rank2(x, "bias_add");
    if (b.rank() != 1 || b.size() != x.cols()) {
        throw DimensionError("bias_add: bias shape " + shape_str(b.shape()) +
                             " does not match matrix " + shape_str(x.shape()));
    }
    const std::size_t n = x.rows(), d = x.cols();
    const auto& xv = x.values();
    const auto& bv = b.values();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + bv[j];
    }
    Tensor y = adopt("bias_add", {n, d}, std::move(out), {x, b});
    TensorNode* xn = x.node();
    TensorNode* bn = b.node();
    TensorNode* yn = y.node();
    set_backprop([xn, bn, yn, n, d]() {
        for (std::size_t i = 0; i < n * d; ++i) xn->grad[i] += yn->grad[i];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) bn->grad[j] += yn->grad[i * d + j];
        }
    });
    return y;
}

Tensor Tape::select_rows(const Tensor& x, std::vector<int> rows) {
    check_rank2(x, "select_rows");
    const std::size_t n = x.rows(), d = x.cols();
    for (int r : rows) {
        if (r < 0 || static_cast<std::size_t>(r) >= n) {
            throw DataError("select_rows: row index " + std::to_string(r) +
                            " out of range for " + shape_str(x.shape()));
        }
    }
    const auto& xv = x.values();
    std::vector<double> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = xv.data() + static_cast<std::size_t>(rows[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    Tensor y = adopt("select_rows", {rows.size(), d}, std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, rows = std::move(rows), d]() {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            double* dst = xn->grad.data() + static_cast<std::size_t>(rows[i]) * d;
            const double* src = yn->grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return y;
}

Tensor Tape::select_columns(const Tensor& x, std::vector<int> cols) {
    check_rank2(x, "select_columns");
    const std::size_t n = x.rows(), d = x.cols();
    for (int c : cols) {
        if (c < 0 || static_cast<std::size_t>(c) >= d) {
            throw DataError("select_columns: column index " + std::to_string(c) +
                            " out of range for " + shape_str(x.shape()));
        }
    }
    const auto& xv = x.values();
    const std::size_t w = cols.size();
    std::vector<double> out(n * w);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out[i * w + j] = xv[i * d + static_cast<std::size_t>(cols[j])];
        }
    }
    Tensor y = adopt("select_columns", {n, w}, std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, cols = std::move(cols), n, d, w]() {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                xn->grad[i * d + static_cast<std::size_t>(cols[j])] += yn->grad[i * w + j];
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor Tape::binary(BinaryKind kind, const char* name, const Tensor& a, const Tensor& b) {
    if (!a.defined() || !b.defined()) throw GraphError(std::string(name) + ": undefined input");
    const bool a_scalar = a.size() == 1;
    const bool b_scalar = b.size() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
        throw DimensionError(std::string(name) + ": shape mismatch: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::vector<std::size_t>& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    auto fwd = [kind](double x, double y) {
        switch (kind) {
            case BinaryKind::add: return x + y;
            case BinaryKind::sub: return x - y;
            case BinaryKind::mul: return x * y;
            case BinaryKind::div: return x / y;
        }
        return 0.0;
    };
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    }
    Tensor c = adopt(name, out_shape, std::move(out), {a, b});
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = c.node();
    set_backprop([kind, an, bn, cn, a_scalar, b_scalar, n]() {
        const auto& g = cn->grad;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = a_scalar ? 0 : i;
            const std::size_t ib = b_scalar ? 0 : i;
            const double x = an->value[ia];
            const double y = bn->value[ib];
            double da = 0.0, db = 0.0;
            switch (kind) {
                case BinaryKind::add: da = g[i]; db = g[i]; break;
                case BinaryKind::sub: da = g[i]; db = -g[i]; break;
                case BinaryKind::mul: da = g[i] * y; db = g[i] * x; break;
                case BinaryKind::div:
                    da = g[i] / y;
                    db = -g[i] * x / (y * y);
                    break;
            }
            an->grad[ia] += da;
            bn->grad[ib] += db;
        }
    });
    return c;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::add, "add", a, b); }
Tensor Tape::sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::sub, "sub", a, b); }
Tensor Tape::mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::mul, "mul", a, b); }
Tensor Tape::div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::div, "div", a, b); }

Tensor Tape::scale(const Tensor& x, double c) {
    if (!std::isfinite(c)) throw NumericError("scale: non-finite constant");
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = c * xv[i];
    Tensor y = adopt("scale", x.shape(), std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, c]() {
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += c * yn->grad[i];
    });
    return y;
}

Tensor Tape::unary(const char* name, const Tensor& x, double (*f)(double), double (*df)(double)) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    Tensor y = adopt(name, x.shape(), std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, df]() {
        for (std::size_t i = 0; i < xn->grad.size(); ++i) {
            xn->grad[i] += df(xn->value[i]) * yn->grad[i];
        }
    });
    return y;
}

Tensor Tape::abs(const Tensor& x) { return unary("abs", x, f_abs, df_abs); }
Tensor Tape::tanh(const Tensor& x) { return unary("tanh", x, f_tanh, df_tanh); }
Tensor Tape::gelu(const Tensor& x) { return unary("gelu", x, f_gelu, df_gelu); }
Tensor Tape::relu(const Tensor& x) { return unary("relu", x, f_relu, df_relu); }
Tensor Tape::sigmoid(const Tensor& x) { return unary("sigmoid", x, f_sigmoid, df_sigmoid); }
Tensor Tape::exp(const Tensor& x) { return unary("exp", x, f_exp, df_exp); }

Tensor Tape::log(const Tensor& x) {
    for (double v : x.values()) {
        if (v <= 0.0) throw NumericError("log: input must be strictly positive");
    }
    return unary("log", x, f_log, df_log);
}

Tensor Tape::sqrt(const Tensor& x) {
    for (double v : x.values()) {
        if (v < 0.0) throw NumericError("sqrt: input must be non-negative");
    }
    return unary("sqrt", x, f_sqrt, df_sqrt);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor Tape::reduce(ReduceKind kind, const char* name, const Tensor& x,
                    std::optional<std::size_t> axis) {
    const auto& shape = x.shape();
    std::size_t outer = 1, n = x.size(), inner = 1;
    std::vector<std::size_t> out_shape = {1};
    if (axis.has_value()) {
        const std::size_t ax = *axis;
        if (ax >= shape.size()) {
            throw DimensionError(std::string(name) + ": axis " + std::to_string(ax) +
                                 " invalid for shape " + shape_str(shape));
        }
        outer = 1;
        for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
        n = shape[ax];
        inner = 1;
        for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];
        out_shape.clear();
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i != ax) out_shape.push_back(shape[i]);
        }
        if (out_shape.empty()) out_shape = {1};
    }
    const auto& xv = x.values();
    std::vector<double> out(outer * inner);
    std::vector<std::size_t> argmax;  // max only
    if (kind == ReduceKind::max) argmax.resize(outer * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < inner; ++r) {
            const std::size_t oi = o * inner + r;
            if (kind == ReduceKind::max) {
                double best = xv[(o * n) * inner + r];
                std::size_t best_i = 0;
                for (std::size_t i = 1; i < n; ++i) {
                    const double v = xv[(o * n + i) * inner + r];
                    if (v > best) {  // strict: ties keep the lowest index
                        best = v;
                        best_i = i;
                    }
                }
                out[oi] = best;
                argmax[oi] = best_i;
            } else {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += xv[(o * n + i) * inner + r];
                out[oi] = kind == ReduceKind::mean ? acc / static_cast<double>(n) : acc;
            }
        }
    }
    Tensor y = adopt(name, std::move(out_shape), std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([kind, xn, yn, outer, n, inner, argmax = std::move(argmax)]() {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t r = 0; r < inner; ++r) {
                const double g = yn->grad[o * inner + r];
                switch (kind) {
                    case ReduceKind::sum:
                        for (std::size_t i = 0; i < n; ++i) xn->grad[(o * n + i) * inner + r] += g;
                        break;
                    case ReduceKind::mean:
                        for (std::size_t i = 0; i < n; ++i) {
                            xn->grad[(o * n + i) * inner + r] += g * inv_n;
                        }
                        break;
                    case ReduceKind::max:
                        xn->grad[(o * n + argmax[o * inner + r]) * inner + r] += g;
                        break;
                }
            }
        }
    });
    return y;
}

Tensor Tape::reduce_sum(const Tensor& x, std::optional<std::size_t> axis) {
    return reduce(ReduceKind::sum, "reduce_sum", x, axis);
}
Tensor Tape::reduce_mean(const Tensor& x, std::optional<std::size_t> axis) {
    return reduce(ReduceKind::mean, "reduce_mean", x, axis);
}
Tensor Tape::reduce_max(const Tensor& x, std::optional<std::size_t> axis) {
    return reduce(ReduceKind::max, "reduce_max", x, axis);
}

Tensor Tape::reshape(const Tensor& x, std::vector<std::size_t> new_shape) {
    if (shape_numel(new_shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    }
    Tensor y = adopt("reshape", std::move(new_shape), x.values(), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn]() {
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
    return y;
}

// ---------------------------------------------------------------------------
// fused numerics
// ---------------------------------------------------------------------------

Tensor Tape::softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    check_rank2(logits, "softmax_cross_entropy");
    const std::size_t n = logits.rows(), c = logits.cols();
    if (targets.size() != n) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw DataError("softmax_cross_entropy: target " + std::to_string(t) +
                            " out of range for " + std::to_string(c) + " classes");
        }
    }
    const auto& x = logits.values();
    std::vector<double> probs(n * c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(x[i * c + j] - mx);
            z += probs[i * c + j];
        }
        const double log_z = std::log(z);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
        const std::size_t t = static_cast<std::size_t>(targets[i]);
        total += -(x[i * c + t] - mx - log_z);
    }
    Tensor y = adopt("softmax_cross_entropy", {1}, {total / static_cast<double>(n)}, {logits});
    TensorNode* xn = logits.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, targets, probs = std::move(probs), n, c]() {
        const double g = yn->grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                const double onehot = static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0;
                xn->grad[i * c + j] += g * (probs[i * c + j] - onehot);
            }
        }
    });
    return y;
}

Tensor Tape::log_softmax(const Tensor& x) {
    check_rank2(x, "log_softmax");
    const std::size_t n = x.rows(), c = x.cols();
    const auto& xv = x.values();
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = xv[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xv[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(xv[i * c + j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] - lse;
    }
    Tensor y = adopt("log_softmax", x.shape(), std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, n, c]() {
        for (std::size_t i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < c; ++j) gsum += yn->grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::exp(yn->value[i * c + j]);
                xn->grad[i * c + j] += yn->grad[i * c + j] - p * gsum;
            }
        }
    });
    return y;
}

Tensor Tape::corr_cols(const Tensor& a, const Tensor& b, bool centered, int* zero_norm_count) {
    check_rank2(a, "corr_cols");
    check_rank2(b, "corr_cols");
    if (a.shape() != b.shape()) {
        throw DimensionError("corr_cols: shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t n = a.rows(), d = a.cols();
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> c_val(d), mean_a(d, 0.0), mean_b(d, 0.0), p2(d), q2(d);
    std::vector<char> dead(d, 0);
    int zero_norms = 0;
    for (std::size_t j = 0; j < d; ++j) {
        if (centered) {
            double sa = 0.0, sb = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                sa += av[i * d + j];
                sb += bv[i * d + j];
            }
            mean_a[j] = sa / static_cast<double>(n);
            mean_b[j] = sb / static_cast<double>(n);
        }
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = av[i * d + j] - mean_a[j];
            const double y = bv[i * d + j] - mean_b[j];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        p2[j] = na;
        q2[j] = nb;
        if (na == 0.0 || nb == 0.0) {
            dead[j] = 1;
            ++zero_norms;
            c_val[j] = 0.0;
        } else {
            // Clamp pure-roundoff overshoot past +/-1.
            c_val[j] = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
        }
    }
    if (zero_norm_count) *zero_norm_count += zero_norms;
    Tensor y = adopt("corr_cols", {d}, std::move(c_val), {a, b});
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* yn = y.node();
    set_backprop([an, bn, yn, centered, n, d, mean_a = std::move(mean_a),
                  mean_b = std::move(mean_b), p2 = std::move(p2), q2 = std::move(q2),
                  dead = std::move(dead)]() {
        std::vector<double> da(n), db(n);
        for (std::size_t j = 0; j < d; ++j) {
            if (dead[j]) continue;
            const double g = yn->grad[j];
            if (g == 0.0) continue;
            const double c = yn->value[j];
            const double inv_pq = 1.0 / (std::sqrt(p2[j]) * std::sqrt(q2[j]));
            double da_sum = 0.0, db_sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double x = an->value[i * d + j] - mean_a[j];
                const double y2 = bn->value[i * d + j] - mean_b[j];
                da[i] = g * (y2 * inv_pq - c * x / p2[j]);
                db[i] = g * (x * inv_pq - c * y2 / q2[j]);
                da_sum += da[i];
                db_sum += db[i];
            }
            if (centered) {
                const double da_mean = da_sum / static_cast<double>(n);
                const double db_mean = db_sum / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    an->grad[i * d + j] += da[i] - da_mean;
                    bn->grad[i * d + j] += db[i] - db_mean;
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    an->grad[i * d + j] += da[i];
                    bn->grad[i * d + j] += db[i];
                }
            }
        }
    });
    return y;
}

Tensor Tape::causal_prefix_mean(const Tensor& x, std::size_t batch, std::size_t seq) {
    check_rank2(x, "causal_prefix_mean");
    if (x.rows() != batch * seq) {
        throw DimensionError("causal_prefix_mean: " + shape_str(x.shape()) +
                             " is not batch*seq = " + std::to_string(batch * seq) + " rows");
    }
    const std::size_t d = x.cols();
    const auto& xv = x.values();
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<double> run(d, 0.0);
        for (std::size_t t = 0; t < seq; ++t) {
            const std::size_t row = (b * seq + t) * d;
            const double inv = 1.0 / static_cast<double>(t + 1);
            for (std::size_t f = 0; f < d; ++f) {
                run[f] += xv[row + f];
                out[row + f] = run[f] * inv;
            }
        }
    }
    Tensor y = adopt("causal_prefix_mean", x.shape(), std::move(out), {x});
    TensorNode* xn = x.node();
    TensorNode* yn = y.node();
    set_backprop([xn, yn, batch, seq, d]() {
        for (std::size_t b = 0; b < batch; ++b) {
            std::vector<double> acc(d, 0.0);
            for (std::size_t t = seq; t-- > 0;) {
                const std::size_t row = (b * seq + t) * d;
                const double inv = 1.0 / static_cast<double>(t + 1);
                for (std::size_t f = 0; f < d; ++f) {
                    acc[f] += yn->grad[row + f] * inv;
                    xn->grad[row + f] += acc[f];
                }
            }
        }
    });
    return y;
}

}  // namespace flexkd
