#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flexkd/tape.hpp"
#include "flexkd/tensor.hpp"

namespace flexkd {

enum class Activation { tanh, gelu, relu };
Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct MLPConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;  // last entry is the model's hidden size d
    std::size_t num_classes = 0;
    Activation activation = Activation::gelu;
    void validate() const;
};

// Attention-free causal sequence model: embedding, then gated MLP blocks
// with causal cumulative pooling. Output head predicts over the vocabulary.
struct TinySeqConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 0;
    std::size_t num_layers = 0;
    std::size_t hidden_dim = 0;  // d
    std::size_t context_len = 0;
    void validate() const;
};

// One minibatch. Exactly one of features/tokens is populated.
struct Batch {
    std::size_t size = 0;
    std::size_t feature_dim = 0;
    std::vector<double> features;  // size x feature_dim, row-major
    std::size_t seq_len = 0;
    std::vector<int> tokens;  // size x seq_len, row-major
    std::vector<int> labels;  // size
    bool is_sequence() const { return seq_len > 0; }
};

struct ForwardResult {
    Tensor logits;       // [n, classes] for MLP, [n, seq, vocab] for sequence models
    Tensor last_hidden;  // [n, d] or [n, seq, d]; feeds only the output head
};

struct Param {
    std::string name;
    Tensor tensor;  // leaf with requires_grad = true
};

struct TrainMeta {
    std::uint64_t seed = 0;
    std::int64_t steps = 0;
    double final_loss = 0.0;
};

struct ParamBlob {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

struct Checkpoint {
    int version = 1;
    std::string kind;  // "mlp" | "tinyseq"
    nlohmann::json config() const;
    std::string config_text;  // serialized config object
    std::vector<ParamBlob> params;
    TrainMeta meta;
};

class Model {
public:
    virtual ~Model() = default;

    // Logits and the last hidden state on the same tape, so the caller can
    // take gradients with respect to the hidden activation.
    virtual ForwardResult forward(Tape& tape, const Batch& batch) const = 0;
    // All hidden activations, ordered input -> output; the last entry equals
    // forward(...).last_hidden bit for bit.
    virtual std::vector<Tensor> hidden_stack(Tape& tape, const Batch& batch) const = 0;

    virtual const std::vector<Param>& params() const = 0;
    virtual std::vector<Param>& params() = 0;
    virtual std::size_t hidden_size() const = 0;  // d
    virtual std::size_t num_outputs() const = 0;  // classes (vocab for sequence models)
    virtual std::string kind() const = 0;
    virtual nlohmann::json config_json() const = 0;

    // (weight, bias) of the final output projection.
    virtual std::pair<Tensor, Tensor> output_head() const = 0;

    std::size_t param_count() const;
    void set_requires_grad(bool rg);
};

std::unique_ptr<Model> init_mlp(const MLPConfig& config, std::uint64_t seed);
std::unique_ptr<Model> init_tinyseq(const TinySeqConfig& config, std::uint64_t seed);

Checkpoint make_checkpoint(const Model& model, TrainMeta meta);
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Content checksum over kind, parameter names, shapes and exact double bits;
// independent of file formatting.
std::string checkpoint_checksum(const Checkpoint& ckpt);

}  // namespace flexkd
