#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexkd/model.hpp"
#include "flexkd/tape.hpp"

namespace flexkd {

enum class LogitMode { forward_kl, reverse_kl, none };
LogitMode logit_mode_from_string(const std::string& s);
std::string to_string(LogitMode m);

struct LossWeights {
    double alpha = 0.0;   // feature distillation term
    double beta = 0.0;    // logit distillation term
    double lambda = 1.0;  // supervised term
    double temperature = 1.0;
    LogitMode logit_mode = LogitMode::none;
    void validate() const;
};

// Trainable linear map from the student's feature space into the teacher's.
struct ProjectorHead {
    Tensor weight;  // [d_T, d_S], requires_grad
};
ProjectorHead make_projector_head(std::size_t d_t, std::size_t d_s, std::uint64_t seed);

struct CorrStats {
    int zero_norm_columns = 0;
};

// Uncentered correlation of two equal-length batch columns; exactly 0 (with
// a stat increment) when either column has zero norm.
double cross_correlation(const std::vector<double>& teacher_col,
                         const std::vector<double>& student_col, CorrStats* stats = nullptr);

// sum_m (1 - C_mm)^2 pairing teacher column selection[m] with student column
// m. The teacher side enters as a constant: no gradient reaches it.
Tensor flex_kd_loss(Tape& tape, const Tensor& teacher_hidden, const Tensor& student_hidden,
                    const std::vector<int>& selection, bool centered = false,
                    CorrStats* stats = nullptr);

// Temperature-softened KL between teacher and student logits, scaled by T^2
// and averaged over rows; gradient flows to the student only.
Tensor logit_kd_loss(Tape& tape, const Tensor& teacher_logits, const Tensor& student_logits,
                     double temperature, LogitMode mode);

enum class ProjectorMetric { mse, correlation };
ProjectorMetric projector_metric_from_string(const std::string& s);

// Projects student hidden states into the teacher space and penalizes the
// mismatch; gradients flow to the student and to the projector weight.
Tensor projector_loss(Tape& tape, const Tensor& teacher_hidden, const Tensor& student_hidden,
                      const ProjectorHead& head, ProjectorMetric metric, bool centered = false,
                      CorrStats* stats = nullptr);

struct CompositeParts {
    std::optional<Tensor> feature;
    std::optional<Tensor> logit;
    std::optional<Tensor> supervised;
};

// alpha*feature + beta*logit + lambda*supervised; a positive weight whose
// part is missing is a config error.
Tensor composite_loss(Tape& tape, const CompositeParts& parts, const LossWeights& weights);

// ---- task objectives shared by attribution and training ----

// Per-sample classification logits: the model logits for MLPs, the
// final-position logits for causal sequence models.
Tensor classification_logits(Tape& tape, const ForwardResult& fr, const Batch& batch);

// Cross-entropy against the batch labels at the evaluation positions.
Tensor supervised_loss(Tape& tape, const ForwardResult& fr, const Batch& batch);

// Logits used for logit distillation: all positions for sequence models.
Tensor distillation_logits(Tape& tape, const ForwardResult& fr, const Batch& batch);

// Hidden states flattened to [samples, d]; sequence models flatten over
// (batch, position) so every position counts as a sample.
Tensor flattened_hidden(Tape& tape, const ForwardResult& fr);

}  // namespace flexkd
