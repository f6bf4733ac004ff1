#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flexkd/model.hpp"

namespace flexkd {

struct LabeledDataset {
    enum class Kind { features, sequences };
    Kind kind = Kind::features;
    std::size_t feature_dim = 0;
    std::size_t seq_len = 0;
    std::size_t num_classes = 0;
    std::vector<double> features;  // n x feature_dim
    std::vector<int> tokens;       // n x seq_len
    std::vector<int> labels;       // n
    std::string split_tag;         // train | val | test

    std::size_t size() const { return labels.size(); }
    bool is_sequence() const { return kind == Kind::sequences; }
    std::string checksum() const;
};

Batch make_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx);
Batch single_batch(const LabeledDataset& ds, std::size_t i);
Batch full_batch(const LabeledDataset& ds);

// Ground-truth labeling rule of a planted task: a fixed random
// linear+nonlinear map of the k relevant coordinates. Per-class offsets are
// calibrated on the train pool so the classes come out balanced (exact
// median split for two classes, proportional fitting otherwise).
struct PlantedRule {
    std::vector<int> relevant;     // k input coordinate indices, ascending
    std::size_t map_dim = 0;       // q
    std::vector<double> a_weight;  // k x q
    std::vector<double> a_bias;    // q
    std::vector<double> b_weight;  // q x num_classes (q x 1 for two classes)
    std::vector<double> offsets;   // per-class decision offsets
    std::size_t num_classes = 2;

    // Raw class scores (length 1 for the two-class case).
    std::vector<double> class_scores(const std::vector<double>& features,
                                     std::size_t d_input) const;
    int label(const std::vector<double>& features, std::size_t d_input) const;
};

struct PlantedRelevanceSpec {
    std::size_t d_input = 64;
    std::size_t num_relevant = 8;  // k
    double noise_scale = 1.0;
    std::size_t num_classes = 2;
    std::uint64_t seed = 1;
    std::size_t train_size = 2000;
    std::size_t val_size = 200;
    std::size_t test_size = 500;
    void validate() const;
};

enum class SeqRule { majority_token, parity_of_marker };
SeqRule seq_rule_from_string(const std::string& s);
std::string to_string(SeqRule r);

struct SeqTaskSpec {
    std::size_t vocab_size = 8;
    std::size_t context_len = 12;
    SeqRule rule = SeqRule::majority_token;
    std::uint64_t seed = 1;
    std::size_t train_size = 2000;
    std::size_t val_size = 200;
    std::size_t test_size = 500;
    void validate() const;
};

struct DatasetBundle {
    LabeledDataset train, val, test;
    nlohmann::json manifest() const;
    std::string provenance;
    std::uint64_t seed = 0;

    // Planted tasks only.
    std::vector<int> planted_relevant;
    PlantedRule rule;
    bool has_rule = false;
};

DatasetBundle gen_planted_task(const PlantedRelevanceSpec& spec);
DatasetBundle gen_seq_task(const SeqTaskSpec& spec);

// Deterministic reference label for one generated sequence (used by the
// recount oracle as well as by the generator itself).
int seq_label(SeqRule rule, const std::vector<int>& tokens, std::size_t vocab_size);
// Marker token used by the parity rule.
constexpr int kParityMarkerToken = 1;

struct CsvSchema {
    std::vector<std::string> feature_columns;
    std::string label_column = "label";
    std::size_t num_classes = 0;
};

LabeledDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
void save_csv(const LabeledDataset& ds, const std::filesystem::path& path);

}  // namespace flexkd
