#include "flexkd/model.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "flexkd/encoding.hpp"
#include "flexkd/error.hpp"
#include "flexkd/rng.hpp"

namespace flexkd {

using nlohmann::json;

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw ConfigError("unknown activation '" + s + "' (expected tanh|gelu|relu)");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::gelu: return "gelu";
        case Activation::relu: return "relu";
    }
    return "gelu";
}

void MLPConfig::validate() const {
    if (input_dim < 1) throw ConfigError("mlp: input_dim must be >= 1");
    if (num_classes < 1) throw ConfigError("mlp: num_classes must be >= 1");
    if (hidden_dims.empty()) throw ConfigError("mlp: hidden_dims must be non-empty");
    for (std::size_t d : hidden_dims) {
        if (d < 1) throw ConfigError("mlp: hidden dims must be >= 1");
    }
}

void TinySeqConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("tinyseq: vocab_size must be >= 2");
    if (embed_dim < 1) throw ConfigError("tinyseq: embed_dim must be >= 1");
    if (num_layers < 1) throw ConfigError("tinyseq: num_layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("tinyseq: hidden_dim must be >= 1");
    if (context_len < 1) throw ConfigError("tinyseq: context_len must be >= 1");
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const Param& p : params()) n += p.tensor.size();
    return n;
}

void Model::set_requires_grad(bool rg) {
    for (Param& p : params()) p.tensor.set_requires_grad(rg);
}

namespace {

Tensor apply_activation(Tape& t, Activation a, const Tensor& x) {
    switch (a) {
        case Activation::tanh: return t.tanh(x);
        case Activation::gelu: return t.gelu(x);
        case Activation::relu: return t.relu(x);
    }
    return t.gelu(x);
}

// Scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_param(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(data), /*requires_grad=*/true);
}

// ---------------------------------------------------------------------------

class MlpModel final : public Model {
public:
    MlpModel(MLPConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        Rng rng(seed);
        std::size_t in = config_.input_dim;
        for (std::size_t l = 0; l < config_.hidden_dims.size(); ++l) {
            const std::size_t out = config_.hidden_dims[l];
            const std::string base = "layer" + std::to_string(l);
            params_.push_back({base + ".weight", init_param(rng, {in, out}, in)});
            params_.push_back({base + ".bias", init_param(rng, {out}, in)});
            in = out;
        }
        params_.push_back({"head.weight", init_param(rng, {in, config_.num_classes}, in)});
        params_.push_back({"head.bias", init_param(rng, {config_.num_classes}, in)});
    }

    ForwardResult forward(Tape& tape, const Batch& batch) const override {
        Tensor h = run_hidden(tape, batch, nullptr);
        const auto [w, b] = output_head();
        Tensor logits = tape.bias_add(tape.matmul(h, w), b);
        return {logits, h};
    }

    std::vector<Tensor> hidden_stack(Tape& tape, const Batch& batch) const override {
        std::vector<Tensor> stack;
        run_hidden(tape, batch, &stack);
        return stack;
    }

    const std::vector<Param>& params() const override { return params_; }
    std::vector<Param>& params() override { return params_; }
    std::size_t hidden_size() const override { return config_.hidden_dims.back(); }
    std::size_t num_outputs() const override { return config_.num_classes; }
    std::string kind() const override { return "mlp"; }

    nlohmann::json config_json() const override {
        return json{{"type", "mlp"},
                    {"input_dim", config_.input_dim},
                    {"hidden_dims", config_.hidden_dims},
                    {"num_classes", config_.num_classes},
                    {"activation", to_string(config_.activation)}};
    }

    std::pair<Tensor, Tensor> output_head() const override {
        const std::size_t n = params_.size();
        return {params_[n - 2].tensor, params_[n - 1].tensor};
    }

private:
    Tensor run_hidden(Tape& tape, const Batch& batch, std::vector<Tensor>* stack) const {
        if (batch.is_sequence()) throw DataError("mlp: got a token batch, expected features");
        if (batch.feature_dim != config_.input_dim) {
            throw DataError("mlp: batch feature dim " + std::to_string(batch.feature_dim) +
                            " does not match input_dim " + std::to_string(config_.input_dim));
        }
        Tensor h = Tensor::from({batch.size, batch.feature_dim}, batch.features);
        for (std::size_t l = 0; l < config_.hidden_dims.size(); ++l) {
            const Tensor& w = params_[2 * l].tensor;
            const Tensor& b = params_[2 * l + 1].tensor;
            h = apply_activation(tape, config_.activation, tape.bias_add(tape.matmul(h, w), b));
            if (stack) stack->push_back(h);
        }
        return h;
    }

    MLPConfig config_;
    std::vector<Param> params_;
};

// ---------------------------------------------------------------------------

class TinySeqModel final : public Model {
public:
    TinySeqModel(TinySeqConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const std::size_t v = config_.vocab_size;
        const std::size_t e = config_.embed_dim;
        const std::size_t d = config_.hidden_dim;
        params_.push_back({"embed.table", init_param(rng, {v, e}, e)});
        params_.push_back({"stem.weight", init_param(rng, {e, d}, e)});
        params_.push_back({"stem.bias", init_param(rng, {d}, e)});
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            const std::string base = "block" + std::to_string(l);
            params_.push_back({base + ".gate.weight", init_param(rng, {d, d}, d)});
            params_.push_back({base + ".gate.bias", init_param(rng, {d}, d)});
            params_.push_back({base + ".cand.weight", init_param(rng, {d, d}, d)});
            params_.push_back({base + ".cand.bias", init_param(rng, {d}, d)});
            params_.push_back({base + ".pool.weight", init_param(rng, {d, d}, d)});
        }
        params_.push_back({"head.weight", init_param(rng, {d, v}, d)});
        params_.push_back({"head.bias", init_param(rng, {v}, d)});
    }

    ForwardResult forward(Tape& tape, const Batch& batch) const override {
        Tensor h = run_hidden(tape, batch, nullptr);  // [(n*seq), d]
        const std::size_t n = batch.size, s = batch.seq_len, d = config_.hidden_dim;
        Tensor last_hidden = tape.reshape(h, {n, s, d});
        Tensor flat = tape.reshape(last_hidden, {n * s, d});
        const auto [w, b] = output_head();
        Tensor logits2 = tape.bias_add(tape.matmul(flat, w), b);
        Tensor logits = tape.reshape(logits2, {n, s, config_.vocab_size});
        return {logits, last_hidden};
    }

    std::vector<Tensor> hidden_stack(Tape& tape, const Batch& batch) const override {
        std::vector<Tensor> stack;
        run_hidden(tape, batch, &stack);
        const std::size_t n = batch.size, s = batch.seq_len, d = config_.hidden_dim;
        for (Tensor& t : stack) t = tape.reshape(t, {n, s, d});
        return stack;
    }

    const std::vector<Param>& params() const override { return params_; }
    std::vector<Param>& params() override { return params_; }
    std::size_t hidden_size() const override { return config_.hidden_dim; }
    std::size_t num_outputs() const override { return config_.vocab_size; }
    std::string kind() const override { return "tinyseq"; }

    nlohmann::json config_json() const override {
        return json{{"type", "tinyseq"},
                    {"vocab_size", config_.vocab_size},
                    {"embed_dim", config_.embed_dim},
                    {"num_layers", config_.num_layers},
                    {"hidden_dim", config_.hidden_dim},
                    {"context_len", config_.context_len}};
    }

    std::pair<Tensor, Tensor> output_head() const override {
        const std::size_t n = params_.size();
        return {params_[n - 2].tensor, params_[n - 1].tensor};
    }

private:
    // Gated block: candidate sees the current token, gate and mix see the
    // causal prefix mean, so position t depends only on tokens <= t.
    Tensor run_hidden(Tape& tape, const Batch& batch, std::vector<Tensor>* stack) const {
        if (!batch.is_sequence()) throw DataError("tinyseq: got a feature batch, expected tokens");
        if (batch.seq_len > config_.context_len) {
            throw DataError("tinyseq: sequence length " + std::to_string(batch.seq_len) +
                            " exceeds context_len " + std::to_string(config_.context_len));
        }
        for (int tok : batch.tokens) {
            if (tok < 0 || static_cast<std::size_t>(tok) >= config_.vocab_size) {
                throw DataError("tinyseq: token id " + std::to_string(tok) +
                                " out of range for vocab " + std::to_string(config_.vocab_size));
            }
        }
        const std::size_t n = batch.size, s = batch.seq_len;
        Tensor emb = tape.select_rows(params_[0].tensor, batch.tokens);  // [(n*s), e]
        Tensor h = apply_activation(
            tape, Activation::gelu,
            tape.bias_add(tape.matmul(emb, params_[1].tensor), params_[2].tensor));
        if (stack) stack->push_back(h);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            const std::size_t base = 3 + l * 5;
            const Tensor& wg = params_[base + 0].tensor;
            const Tensor& bg = params_[base + 1].tensor;
            const Tensor& wc = params_[base + 2].tensor;
            const Tensor& bc = params_[base + 3].tensor;
            const Tensor& wp = params_[base + 4].tensor;
            Tensor pooled = tape.causal_prefix_mean(h, n, s);
            Tensor gate = tape.sigmoid(tape.bias_add(tape.matmul(pooled, wg), bg));
            Tensor cand = apply_activation(
                tape, Activation::gelu,
                tape.bias_add(tape.add(tape.matmul(h, wc), tape.matmul(pooled, wp)), bc));
            h = tape.add(h, tape.mul(gate, cand));
            if (stack) stack->push_back(h);
        }
        return h;
    }

    TinySeqConfig config_;
    std::vector<Param> params_;
};

}  // namespace

std::unique_ptr<Model> init_mlp(const MLPConfig& config, std::uint64_t seed) {
    return std::make_unique<MlpModel>(config, seed);
}

std::unique_ptr<Model> init_tinyseq(const TinySeqConfig& config, std::uint64_t seed) {
    return std::make_unique<TinySeqModel>(config, seed);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

json Checkpoint::config() const { return json::parse(config_text); }

Checkpoint make_checkpoint(const Model& model, TrainMeta meta) {
    Checkpoint ckpt;
    ckpt.kind = model.kind();
    ckpt.config_text = model.config_json().dump();
    ckpt.meta = meta;
    for (const Param& p : model.params()) {
        ckpt.params.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    }
    return ckpt;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
    const json cfg = ckpt.config();
    std::unique_ptr<Model> model;
    if (ckpt.kind == "mlp") {
        MLPConfig mc;
        mc.input_dim = cfg.at("input_dim").get<std::size_t>();
        mc.hidden_dims = cfg.at("hidden_dims").get<std::vector<std::size_t>>();
        mc.num_classes = cfg.at("num_classes").get<std::size_t>();
        mc.activation = activation_from_string(cfg.at("activation").get<std::string>());
        model = init_mlp(mc, 0);
    } else if (ckpt.kind == "tinyseq") {
        TinySeqConfig tc;
        tc.vocab_size = cfg.at("vocab_size").get<std::size_t>();
        tc.embed_dim = cfg.at("embed_dim").get<std::size_t>();
        tc.num_layers = cfg.at("num_layers").get<std::size_t>();
        tc.hidden_dim = cfg.at("hidden_dim").get<std::size_t>();
        tc.context_len = cfg.at("context_len").get<std::size_t>();
        model = init_tinyseq(tc, 0);
    } else {
        throw ConfigError("unknown checkpoint kind '" + ckpt.kind + "'");
    }
    auto& params = model->params();
    if (params.size() != ckpt.params.size()) {
        throw ConfigError("checkpoint parameter count does not match its config");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamBlob& blob = ckpt.params[i];
        if (blob.name != params[i].name || blob.shape != params[i].tensor.shape()) {
            throw ConfigError("checkpoint parameter '" + blob.name +
                              "' does not match the model layout");
        }
        params[i].tensor.values_mut() = blob.data;
    }
    return model;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    json j;
    j["format"] = "flexkd-checkpoint";
    j["version"] = ckpt.version;
    j["kind"] = ckpt.kind;
    j["config"] = ckpt.config();
    j["metadata"] = {{"seed", ckpt.meta.seed},
                     {"steps", ckpt.meta.steps},
                     {"final_loss", ckpt.meta.final_loss}};
    json params = json::array();
    for (const ParamBlob& p : ckpt.params) {
        params.push_back(
            {{"name", p.name}, {"shape", p.shape}, {"data", hex_encode_doubles(p.data)}});
    }
    j["params"] = std::move(params);
    std::ofstream out(path);
    if (!out) throw DataError("cannot write checkpoint file " + path.string());
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "flexkd-checkpoint") {
        throw DataError(path.string() + " is not a checkpoint file");
    }
    Checkpoint ckpt;
    ckpt.version = j.at("version").get<int>();
    if (ckpt.version != 1) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(ckpt.version));
    }
    ckpt.kind = j.at("kind").get<std::string>();
    ckpt.config_text = j.at("config").dump();
    const json& meta = j.at("metadata");
    ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.meta.steps = meta.at("steps").get<std::int64_t>();
    ckpt.meta.final_loss = meta.at("final_loss").get<double>();
    for (const json& p : j.at("params")) {
        ParamBlob blob;
        blob.name = p.at("name").get<std::string>();
        blob.shape = p.at("shape").get<std::vector<std::size_t>>();
        blob.data = hex_decode_doubles(p.at("data").get<std::string>());
        if (shape_numel(blob.shape) != blob.data.size()) {
            throw DataError("checkpoint parameter '" + blob.name + "' has inconsistent shape");
        }
        ckpt.params.push_back(std::move(blob));
    }
    return ckpt;
}

std::string checkpoint_checksum(const Checkpoint& ckpt) {
    Fnv1a h;
    h.update(ckpt.kind);
    for (const ParamBlob& p : ckpt.params) {
        h.update(p.name);
        for (std::size_t d : p.shape) h.update_u64(d);
        h.update_doubles(p.data);
    }
    return "fnv1a:" + h.hex_digest();
}

}  // namespace flexkd
