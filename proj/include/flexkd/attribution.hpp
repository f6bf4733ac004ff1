#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flexkd/dataset.hpp"
#include "flexkd/model.hpp"

namespace flexkd {

// How the model output F(x) is scalarized before taking d F / d h:
// the task loss of the sample, or the maximum output logit.
enum class OutputReduction { task_loss, predicted_logit };
OutputReduction output_reduction_from_string(const std::string& s);
std::string to_string(OutputReduction r);

struct ImportanceProfile {
    std::vector<double> scores;      // G, length d_T, non-negative
    std::vector<int> ranked_indices; // R, permutation of [0, d_T)
    std::size_t num_samples = 0;     // N
    std::string scope = "last_layer";
    OutputReduction output_reduction = OutputReduction::task_loss;
    double calibration_fraction = 1.0;
    std::uint64_t calibration_seed = 0;
    std::string teacher_checksum;

    std::size_t d_t() const { return scores.size(); }
    void validate() const;
};

struct SelectionSet {
    std::vector<int> indices;  // E, first d_S entries of R in rank order
};

struct AttributionOptions {
    double calibration_fraction = 1.0;
    std::uint64_t calibration_seed = 0;
    std::string teacher_checksum;
};

// |d F_scalar(x) / d h| for one sample; sequence inputs average the
// per-position magnitudes, yielding a length-d_T vector either way.
std::vector<double> per_sample_importance(const Model& teacher, const Batch& sample,
                                          OutputReduction reduction);

// Mean of per-sample score vectors in fixed dataset order, plus ranking.
ImportanceProfile profile_from_scores(const std::vector<std::vector<double>>& per_sample,
                                      OutputReduction reduction);

ImportanceProfile aggregate_importance(const Model& teacher, const LabeledDataset& dataset,
                                       OutputReduction reduction,
                                       const AttributionOptions& opts = {});

// Indices sorted by descending score; ties break toward the lower index.
std::vector<int> rank_neurons(const std::vector<double>& scores);

SelectionSet select_top(const ImportanceProfile& profile, std::size_t d_s);

// Percentage of activation entries with |a| < threshold, per hidden layer
// and per threshold, over the whole dataset.
struct SparsityTable {
    std::vector<double> thresholds;
    std::vector<std::vector<double>> percent;  // [layer][threshold]
};

SparsityTable activation_sparsity_profile(const Model& model, const LabeledDataset& dataset,
                                          const std::vector<double>& thresholds);

void save_profile(const ImportanceProfile& profile, const std::filesystem::path& path);
ImportanceProfile load_profile(const std::filesystem::path& path);

}  // namespace flexkd
