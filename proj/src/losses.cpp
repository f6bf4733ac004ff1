#include "flexkd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "flexkd/error.hpp"
#include "flexkd/rng.hpp"

namespace flexkd {

LogitMode logit_mode_from_string(const std::string& s) {
    if (s == "forward_kl") return LogitMode::forward_kl;
    if (s == "reverse_kl") return LogitMode::reverse_kl;
    if (s == "none") return LogitMode::none;
    throw ConfigError("unknown logit mode '" + s + "' (expected forward_kl|reverse_kl|none)");
}

std::string to_string(LogitMode m) {
    switch (m) {
        case LogitMode::forward_kl: return "forward_kl";
        case LogitMode::reverse_kl: return "reverse_kl";
        case LogitMode::none: return "none";
    }
    return "none";
}

void LossWeights::validate() const {
    if (alpha < 0.0 || beta < 0.0 || lambda < 0.0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (alpha + beta + lambda <= 0.0) {
        throw ConfigError("loss weights must not all be zero");
    }
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

ProjectorHead make_projector_head(std::size_t d_t, std::size_t d_s, std::uint64_t seed) {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_s));
    std::vector<double> w(d_t * d_s);
    for (double& v : w) v = rng.uniform(-bound, bound);
    return ProjectorHead{Tensor::from({d_t, d_s}, std::move(w), /*requires_grad=*/true)};
}

ProjectorMetric projector_metric_from_string(const std::string& s) {
    if (s == "mse") return ProjectorMetric::mse;
    if (s == "correlation") return ProjectorMetric::correlation;
    throw ConfigError("unknown projector metric '" + s + "'");
}

double cross_correlation(const std::vector<double>& teacher_col,
                         const std::vector<double>& student_col, CorrStats* stats) {
    if (teacher_col.size() != student_col.size() || teacher_col.empty()) {
        throw DimensionError("cross_correlation: column lengths disagree");
    }
    double dot = 0.0, nt = 0.0, ns = 0.0;
    for (std::size_t i = 0; i < teacher_col.size(); ++i) {
        dot += teacher_col[i] * student_col[i];
        nt += teacher_col[i] * teacher_col[i];
        ns += student_col[i] * student_col[i];
    }
    if (nt == 0.0 || ns == 0.0) {
        if (stats) ++stats->zero_norm_columns;
        return 0.0;
    }
    return std::clamp(dot / (std::sqrt(nt) * std::sqrt(ns)), -1.0, 1.0);
}

namespace {

// (1 - C)^2 summed over the correlation vector.
Tensor one_minus_corr_sq(Tape& tape, const Tensor& corr) {
    Tensor ones = Tensor::from({corr.size()}, std::vector<double>(corr.size(), 1.0));
    Tensor diff = tape.sub(ones, corr);
    return tape.reduce_sum(tape.mul(diff, diff));
}

}  // namespace

Tensor flex_kd_loss(Tape& tape, const Tensor& teacher_hidden, const Tensor& student_hidden,
                    const std::vector<int>& selection, bool centered, CorrStats* stats) {
    if (teacher_hidden.rank() != 2 || student_hidden.rank() != 2) {
        throw DimensionError("flex_kd_loss: hidden states must be rank-2");
    }
    if (teacher_hidden.rows() != student_hidden.rows()) {
        throw DimensionError("flex_kd_loss: batch sizes disagree: " +
                             shape_str(teacher_hidden.shape()) + " vs " +
                             shape_str(student_hidden.shape()));
    }
    if (selection.size() != student_hidden.cols()) {
        throw ConfigError("flex_kd_loss: selection size " + std::to_string(selection.size()) +
                          " does not match student width " +
                          std::to_string(student_hidden.cols()));
    }
    const std::size_t d_t = teacher_hidden.cols();
    for (int idx : selection) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= d_t) {
            throw ConfigError("flex_kd_loss: selected index " + std::to_string(idx) +
                              " out of range for teacher width " + std::to_string(d_t));
        }
    }
    // Gather the selected teacher columns into a constant leaf so no gradient
    // can reach the teacher.
    const std::size_t n = teacher_hidden.rows(), d_s = selection.size();
    const auto& tv = teacher_hidden.values();
    std::vector<double> sel(n * d_s);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < d_s; ++m) {
            sel[i * d_s + m] = tv[i * d_t + static_cast<std::size_t>(selection[m])];
        }
    }
    Tensor teacher_sel = Tensor::from({n, d_s}, std::move(sel));
    int zero_norms = 0;
    Tensor corr = tape.corr_cols(teacher_sel, student_hidden, centered, &zero_norms);
    if (stats) stats->zero_norm_columns += zero_norms;
    return one_minus_corr_sq(tape, corr);
}

Tensor logit_kd_loss(Tape& tape, const Tensor& teacher_logits, const Tensor& student_logits,
                     double temperature, LogitMode mode) {
    if (mode == LogitMode::none) throw ConfigError("logit_kd_loss: mode is none");
    if (!(temperature > 0.0)) throw ConfigError("logit_kd_loss: temperature must be positive");
    if (teacher_logits.rank() != 2 || student_logits.rank() != 2 ||
        teacher_logits.shape() != student_logits.shape()) {
        throw DimensionError("logit_kd_loss: logit shapes disagree: " +
                             shape_str(teacher_logits.shape()) + " vs " +
                             shape_str(student_logits.shape()));
    }
    const std::size_t n = teacher_logits.rows(), c = teacher_logits.cols();
    // Teacher distribution as constants.
    const auto& t = teacher_logits.values();
    std::vector<double> log_p(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = t[i * c] / temperature;
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, t[i * c + j] / temperature);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(t[i * c + j] / temperature - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) log_p[i * c + j] = t[i * c + j] / temperature - lse;
    }
    const double factor = temperature * temperature / static_cast<double>(n);
    Tensor log_q = tape.log_softmax(tape.scale(student_logits, 1.0 / temperature));
    if (mode == LogitMode::forward_kl) {
        // sum_i p_i (log p_i - log q_i)
        std::vector<double> p(n * c);
        double p_logp = 0.0;
        for (std::size_t i = 0; i < n * c; ++i) {
            p[i] = std::exp(log_p[i]);
            p_logp += p[i] * log_p[i];
        }
        Tensor p_const = Tensor::from({n, c}, std::move(p));
        Tensor cross = tape.reduce_sum(tape.mul(p_const, log_q));
        return tape.scale(tape.sub(Tensor::scalar(p_logp), cross), factor);
    }
    // reverse: sum_i q_i (log q_i - log p_i)
    Tensor q = tape.exp(log_q);
    Tensor log_p_const = Tensor::from({n, c}, std::move(log_p));
    Tensor ent = tape.reduce_sum(tape.mul(q, log_q));
    Tensor cross = tape.reduce_sum(tape.mul(q, log_p_const));
    return tape.scale(tape.sub(ent, cross), factor);
}

Tensor projector_loss(Tape& tape, const Tensor& teacher_hidden, const Tensor& student_hidden,
                      const ProjectorHead& head, ProjectorMetric metric, bool centered,
                      CorrStats* stats) {
    if (teacher_hidden.rank() != 2 || student_hidden.rank() != 2) {
        throw DimensionError("projector_loss: hidden states must be rank-2");
    }
    const std::size_t d_t = teacher_hidden.cols(), d_s = student_hidden.cols();
    if (head.weight.rank() != 2 || head.weight.rows() != d_t || head.weight.cols() != d_s) {
        throw ConfigError("projector_loss: head shape " + shape_str(head.weight.shape()) +
                          " does not map student " + std::to_string(d_s) + " to teacher " +
                          std::to_string(d_t));
    }
    if (teacher_hidden.rows() != student_hidden.rows()) {
        throw ConfigError("projector_loss: batch sizes disagree");
    }
    // Detach the teacher side.
    Tensor teacher_const = Tensor::from(teacher_hidden.shape(), teacher_hidden.values());
    Tensor projected = tape.matmul(student_hidden, tape.transpose(head.weight));  // [n, d_T]
    if (metric == ProjectorMetric::mse) {
        Tensor diff = tape.sub(projected, teacher_const);
        return tape.reduce_mean(tape.mul(diff, diff));
    }
    int zero_norms = 0;
    Tensor corr = tape.corr_cols(teacher_const, projected, centered, &zero_norms);
    if (stats) stats->zero_norm_columns += zero_norms;
    return one_minus_corr_sq(tape, corr);
}

Tensor composite_loss(Tape& tape, const CompositeParts& parts, const LossWeights& weights) {
    weights.validate();
    auto require = [](const std::optional<Tensor>& part, double w, const char* name) {
        if (w > 0.0 && !part.has_value()) {
            throw ConfigError(std::string("composite_loss: weight for ") + name +
                              " is positive but the term is missing");
        }
    };
    require(parts.feature, weights.alpha, "the feature term");
    require(parts.logit, weights.beta, "the logit term");
    require(parts.supervised, weights.lambda, "the supervised term");

    Tensor total;
    auto accumulate = [&](const std::optional<Tensor>& part, double w) {
        if (w <= 0.0 || !part.has_value()) return;
        Tensor scaled = tape.scale(*part, w);
        total = total.defined() ? tape.add(total, scaled) : scaled;
    };
    accumulate(parts.feature, weights.alpha);
    accumulate(parts.logit, weights.beta);
    accumulate(parts.supervised, weights.lambda);
    return total;
}

// ---------------------------------------------------------------------------
// task objectives
// ---------------------------------------------------------------------------

Tensor classification_logits(Tape& tape, const ForwardResult& fr, const Batch& batch) {
    if (fr.logits.rank() == 2) return fr.logits;
    if (fr.logits.rank() != 3) {
        throw DimensionError("classification_logits: unexpected logits shape " +
                             shape_str(fr.logits.shape()));
    }
    const std::size_t n = fr.logits.shape()[0], s = fr.logits.shape()[1],
                      c = fr.logits.shape()[2];
    Tensor flat = tape.reshape(fr.logits, {n * s, c});
    std::vector<int> last_rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        last_rows[i] = static_cast<int>(i * s + s - 1);
    }
    (void)batch;
    return tape.select_rows(flat, std::move(last_rows));
}

Tensor supervised_loss(Tape& tape, const ForwardResult& fr, const Batch& batch) {
    Tensor logits = classification_logits(tape, fr, batch);
    return tape.softmax_cross_entropy(logits, batch.labels);
}

Tensor distillation_logits(Tape& tape, const ForwardResult& fr, const Batch& batch) {
    (void)batch;
    if (fr.logits.rank() == 2) return fr.logits;
    const std::size_t n = fr.logits.shape()[0], s = fr.logits.shape()[1],
                      c = fr.logits.shape()[2];
    return tape.reshape(fr.logits, {n * s, c});
}

Tensor flattened_hidden(Tape& tape, const ForwardResult& fr) {
    if (fr.last_hidden.rank() == 2) return fr.last_hidden;
    const std::size_t n = fr.last_hidden.shape()[0], s = fr.last_hidden.shape()[1],
                      d = fr.last_hidden.shape()[2];
    return tape.reshape(fr.last_hidden, {n * s, d});
}

}  // namespace flexkd
