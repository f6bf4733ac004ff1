#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexkd/attribution.hpp"
#include "flexkd/error.hpp"
#include "flexkd/dataset.hpp"
#include "flexkd/losses.hpp"
#include "flexkd/model.hpp"
#include "flexkd/optimizer.hpp"

namespace flexkd {

enum class Method { flexkd, projector_mse, projector_corr, vanilla_kd, ft_only };
Method method_from_string(const std::string& s);
std::string to_string(Method m);

struct TrainConfig {
    int epochs = 3;
    int batch_size = 8;
    OptimizerConfig opt;
    std::uint64_t seed = 0;
};

struct EpochMetric {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

struct TeacherResult {
    Checkpoint checkpoint;
    std::vector<EpochMetric> history;
};

// Thrown when training hits non-finite values; carries the last checkpoint
// that was still finite.
struct TrainingDiverged : NumericError {
    TrainingDiverged(const std::string& msg, Checkpoint last_good_ckpt)
        : NumericError(msg), last_good(std::move(last_good_ckpt)) {}
    Checkpoint last_good;
};

// Supervised training of the given model in place; deterministic in
// (model init, dataset, config.seed).
TeacherResult train_supervised(Model& model, const DatasetBundle& data,
                               const TrainConfig& config);

struct TraceRecord {
    int step = 0;
    double loss_total = 0.0;
    std::optional<double> loss_feature;  // absent when the method has no such term
    std::optional<double> loss_logit;
    double loss_supervised = 0.0;
    double lr = 0.0;
};

struct DistillationPlan {
    Checkpoint teacher;  // frozen
    std::string student_config_text;  // model config json (same schema as checkpoints)
    // When set, the student starts from this checkpoint (e.g. a brief
    // supervised warmup shared by all methods) instead of a fresh init.
    std::optional<Checkpoint> student_init;
    ImportanceProfile profile;
    LossWeights weights;
    Method method = Method::flexkd;
    int steps = 1000;
    int batch_size = 8;
    OptimizerConfig opt;
    std::uint64_t seed = 0;
    bool centered_correlation = false;

    void validate() const;  // checksum binding and selection-width checks
};

struct DistillResult {
    Checkpoint student;
    std::vector<TraceRecord> trace;
    SelectionSet selection;  // populated for flexkd
    int zero_norm_events = 0;
};

DistillResult distill(const DistillationPlan& plan, const DatasetBundle& data);

enum class EvalMetric { accuracy, nll };
// accuracy: fraction of argmax-correct predictions (ties toward the lowest
// class index); nll: mean cross-entropy over the dataset.
double evaluate(const Model& model, const LabeledDataset& dataset, EvalMetric metric);

// Student model construction from a config-text blob (shared by distill and
// the harness).
std::unique_ptr<Model> model_from_config_text(const std::string& config_text,
                                              std::uint64_t seed);

}  // namespace flexkd
