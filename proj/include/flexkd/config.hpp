#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace flexkd {

// Experiment configuration. The on-disk format is plain text: `key = value`
// lines grouped under `[section]` headers (sections nest with dots, e.g.
// [weights.flexkd]); `#` starts a comment. A top-level `version` key is
// mandatory. Unknown sections or keys are config errors, and resolving a
// parsed file fills in every default so the canonical form is complete.
struct ExperimentConfig {
    int version = 1;

    struct Dataset {
        std::string kind = "planted";  // planted | sequence | csv
        std::uint64_t seed = 1;
        std::size_t train_size = 2000;
        std::size_t val_size = 200;
        std::size_t test_size = 500;
        // planted
        std::size_t d_input = 64;
        std::size_t relevant = 8;
        double noise_scale = 1.0;
        std::size_t num_classes = 2;
        // sequence
        std::size_t vocab_size = 8;
        std::size_t context_len = 12;
        std::string rule = "majority";
        // csv
        std::string train_path;
        std::string val_path;
        std::string test_path;
    } dataset;

    struct ModelSection {
        std::vector<std::size_t> hidden_dims = {64};
        std::string activation = "gelu";
        // sequence family
        std::size_t embed_dim = 16;
        std::size_t num_layers = 2;
        std::size_t hidden_dim = 32;
    };
    ModelSection teacher_model;
    ModelSection student_model;

    struct TeacherTrain {
        int epochs = 6;
        int batch_size = 8;
        double lr = 5e-4;
        std::string optimizer = "adam";
        double weight_decay = 1e-6;
        double epsilon = 1e-8;
        std::uint64_t seed = 7;
    } teacher_train;

    struct Attribution {
        std::string output_reduction = "task_loss";
        double calibration_fraction = 1.0;
        std::uint64_t seed = 11;
    } attribution;

    struct Distill {
        int steps = 1500;
        int batch_size = 8;
        double lr = 5e-4;
        std::string optimizer = "adam";
        double weight_decay = 1e-6;
        double epsilon = 1e-8;
        double temperature = 1.0;
        std::string logit_mode = "forward_kl";
        bool centered_correlation = false;
    } distill;

    struct Compare {
        std::vector<std::string> methods = {"ft_only", "vanilla_kd", "projector_mse", "flexkd"};
        std::vector<std::uint64_t> seeds = {1, 2, 3};
        std::string baseline = "projector_mse";
    } compare;

    struct Weights {
        double alpha = 0.0;
        double beta = 0.0;
        double lambda = 1.0;
    };
    std::map<std::string, Weights> weights;  // per method

    // Complete text with every default materialized; parsing it back yields
    // an identical config.
    std::string canonical_text() const;
    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::filesystem::path& path);
void write_config_file(const ExperimentConfig& config, const std::filesystem::path& path);

}  // namespace flexkd
