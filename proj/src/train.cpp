#include "flexkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "flexkd/error.hpp"
#include "flexkd/rng.hpp"

namespace flexkd {

using nlohmann::json;

Method method_from_string(const std::string& s) {
    if (s == "flexkd") return Method::flexkd;
    if (s == "projector_mse") return Method::projector_mse;
    if (s == "projector_corr") return Method::projector_corr;
    if (s == "vanilla_kd") return Method::vanilla_kd;
    if (s == "ft_only") return Method::ft_only;
    throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(Method m) {
    switch (m) {
        case Method::flexkd: return "flexkd";
        case Method::projector_mse: return "projector_mse";
        case Method::projector_corr: return "projector_corr";
        case Method::vanilla_kd: return "vanilla_kd";
        case Method::ft_only: return "ft_only";
    }
    return "flexkd";
}

std::unique_ptr<Model> model_from_config_text(const std::string& config_text,
                                              std::uint64_t seed) {
    Checkpoint shell;
    shell.config_text = config_text;
    const json cfg = shell.config();
    shell.kind = cfg.at("type").get<std::string>();
    // Reuse the checkpoint loader's config parsing, then re-init with the seed.
    if (shell.kind == "mlp") {
        MLPConfig mc;
        mc.input_dim = cfg.at("input_dim").get<std::size_t>();
        mc.hidden_dims = cfg.at("hidden_dims").get<std::vector<std::size_t>>();
        mc.num_classes = cfg.at("num_classes").get<std::size_t>();
        mc.activation = activation_from_string(cfg.at("activation").get<std::string>());
        return init_mlp(mc, seed);
    }
    if (shell.kind == "tinyseq") {
        TinySeqConfig tc;
        tc.vocab_size = cfg.at("vocab_size").get<std::size_t>();
        tc.embed_dim = cfg.at("embed_dim").get<std::size_t>();
        tc.num_layers = cfg.at("num_layers").get<std::size_t>();
        tc.hidden_dim = cfg.at("hidden_dim").get<std::size_t>();
        tc.context_len = cfg.at("context_len").get<std::size_t>();
        return init_tinyseq(tc, seed);
    }
    throw ConfigError("unknown model type '" + shell.kind + "'");
}

namespace {

std::vector<Tensor> trainable_tensors(Model& model) {
    std::vector<Tensor> out;
    for (Param& p : model.params()) out.push_back(p.tensor);
    return out;
}

}  // namespace

TeacherResult train_supervised(Model& model, const DatasetBundle& data,
                               const TrainConfig& config) {
    if (data.train.size() == 0) throw DataError("train_supervised: empty train split");
    if (config.batch_size < 1) throw ConfigError("train_supervised: batch_size must be >= 1");
    if (config.epochs < 0) throw ConfigError("train_supervised: epochs must be >= 0");

    Optimizer opt(trainable_tensors(model), config.opt);
    Rng order_rng(Rng::derive(config.seed, 0x07de7));
    TeacherResult result;
    Checkpoint last_good = make_checkpoint(model, {config.seed, 0, 0.0});
    std::int64_t steps = 0;
    double final_loss = 0.0;
    const std::size_t n = data.train.size();
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order = order_rng.permutation(n);
        double loss_sum = 0.0;
        try {
            for (std::size_t start = 0; start < n; start += bs) {
                const std::size_t end = std::min(n, start + bs);
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(end));
                const Batch batch = make_batch(data.train, idx);
                Tape tape;
                ForwardResult fr = model.forward(tape, batch);
                Tensor loss = supervised_loss(tape, fr, batch);
                tape.backward(loss);
                opt.step();
                ++steps;
                loss_sum += loss.item() * static_cast<double>(idx.size());
            }
        } catch (const NumericError& e) {
            throw TrainingDiverged(std::string("training diverged in epoch ") +
                                       std::to_string(epoch) + ": " + e.what(),
                                   std::move(last_good));
        }
        EpochMetric m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(n);
        m.train_accuracy = evaluate(model, data.train, EvalMetric::accuracy);
        const LabeledDataset& val = data.val.size() ? data.val : data.train;
        m.val_accuracy = evaluate(model, val, EvalMetric::accuracy);
        result.history.push_back(m);
        final_loss = m.train_loss;
        last_good = make_checkpoint(model, {config.seed, steps, final_loss});
    }
    result.checkpoint = make_checkpoint(model, {config.seed, steps, final_loss});
    return result;
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

void DistillationPlan::validate() const {
    weights.validate();
    if (steps < 0) throw ConfigError("distillation plan: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("distillation plan: batch_size must be >= 1");
    const std::string teacher_sum = checkpoint_checksum(teacher);
    if (profile.teacher_checksum != teacher_sum) {
        throw ConfigError("distillation plan: profile was computed from checksum " +
                          profile.teacher_checksum + " but the teacher checkpoint hashes to " +
                          teacher_sum);
    }
    if (method == Method::flexkd) {
        std::unique_ptr<Model> student = model_from_config_text(student_config_text, 0);
        const std::size_t d_s = student->hidden_size();
        if (d_s > profile.d_t()) {
            throw ConfigError("distillation plan: student width " + std::to_string(d_s) +
                              " exceeds teacher width " + std::to_string(profile.d_t()));
        }
    }
}

DistillResult distill(const DistillationPlan& plan, const DatasetBundle& data) {
    plan.validate();
    if (data.train.size() == 0) throw DataError("distill: empty train split");

    std::unique_ptr<Model> teacher = model_from_checkpoint(plan.teacher);
    teacher->set_requires_grad(false);
    const std::string teacher_sum_before = checkpoint_checksum(plan.teacher);

    std::unique_ptr<Model> student;
    if (plan.student_init.has_value()) {
        student = model_from_checkpoint(*plan.student_init);
        if (student->config_json().dump() !=
            nlohmann::json::parse(plan.student_config_text).dump()) {
            throw ConfigError("distill: student_init checkpoint does not match the student config");
        }
    } else {
        student = model_from_config_text(plan.student_config_text, plan.seed);
    }
    const std::size_t d_s = student->hidden_size();

    DistillResult result;
    if (plan.method == Method::flexkd) {
        result.selection = select_top(plan.profile, d_s);
    }

    ProjectorHead head;
    const bool uses_projector =
        plan.method == Method::projector_mse || plan.method == Method::projector_corr;
    std::vector<Tensor> trainable = trainable_tensors(*student);
    if (uses_projector) {
        head = make_projector_head(teacher->hidden_size(), d_s,
                                   Rng::derive(plan.seed, 0xbead));
        trainable.push_back(head.weight);
    }
    Optimizer opt(std::move(trainable), plan.opt);

    Rng order_rng(Rng::derive(plan.seed, 0x0bd7));
    const std::size_t n = data.train.size();
    const std::size_t bs = static_cast<std::size_t>(plan.batch_size);
    std::vector<std::size_t> order = order_rng.permutation(n);
    std::size_t cursor = 0;

    CorrStats corr_stats;
    double final_loss = 0.0;
    for (int step = 0; step < plan.steps; ++step) {
        std::vector<std::size_t> idx;
        idx.reserve(bs);
        while (idx.size() < bs) {
            if (cursor == n) {
                order = order_rng.permutation(n);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const Batch batch = make_batch(data.train, idx);

        Tape teacher_tape;
        ForwardResult t_fr = teacher->forward(teacher_tape, batch);
        Tensor t_hidden = flattened_hidden(teacher_tape, t_fr);
        Tensor t_logits = distillation_logits(teacher_tape, t_fr, batch);

        Tape tape;
        ForwardResult s_fr = student->forward(tape, batch);
        CompositeParts parts;
        parts.supervised = supervised_loss(tape, s_fr, batch);
        switch (plan.method) {
            case Method::flexkd:
                parts.feature =
                    flex_kd_loss(tape, t_hidden, flattened_hidden(tape, s_fr),
                                 result.selection.indices, plan.centered_correlation,
                                 &corr_stats);
                break;
            case Method::projector_mse:
            case Method::projector_corr:
                parts.feature = projector_loss(
                    tape, t_hidden, flattened_hidden(tape, s_fr), head,
                    plan.method == Method::projector_mse ? ProjectorMetric::mse
                                                         : ProjectorMetric::correlation,
                    plan.centered_correlation, &corr_stats);
                break;
            case Method::vanilla_kd:
            case Method::ft_only:
                break;
        }
        if (plan.weights.beta > 0.0) {
            parts.logit = logit_kd_loss(tape, t_logits, distillation_logits(tape, s_fr, batch),
                                        plan.weights.temperature, plan.weights.logit_mode);
        }
        Tensor total = composite_loss(tape, parts, plan.weights);
        tape.backward(total);
        opt.step();

        TraceRecord rec;
        rec.step = step;
        rec.loss_total = total.item();
        if (parts.feature) rec.loss_feature = parts.feature->item();
        if (parts.logit) rec.loss_logit = parts.logit->item();
        rec.loss_supervised = parts.supervised->item();
        rec.lr = plan.opt.lr;
        result.trace.push_back(rec);
        final_loss = rec.loss_total;
    }

    if (checkpoint_checksum(plan.teacher) != teacher_sum_before) {
        throw Error("internal: teacher checkpoint changed during distillation");
    }
    result.student = make_checkpoint(*student, {plan.seed, plan.steps, final_loss});
    result.zero_norm_events = corr_stats.zero_norm_columns;
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

double evaluate(const Model& model, const LabeledDataset& dataset, EvalMetric metric) {
    if (dataset.size() == 0) throw DataError("evaluate: empty dataset");
    const std::size_t chunk = 256;
    std::size_t correct = 0;
    double nll_sum = 0.0;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(dataset.size(), start + chunk); ++i) {
            idx.push_back(i);
        }
        const Batch batch = make_batch(dataset, idx);
        Tape tape;
        ForwardResult fr = model.forward(tape, batch);
        Tensor logits = classification_logits(tape, fr, batch);
        const auto& lv = logits.values();
        const std::size_t c = logits.cols();
        for (std::size_t i = 0; i < batch.size; ++i) {
            if (metric == EvalMetric::accuracy) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < c; ++j) {
                    if (lv[i * c + j] > lv[i * c + best]) best = j;  // ties keep lowest index
                }
                if (static_cast<int>(best) == batch.labels[i]) ++correct;
            } else {
                // Same stabilized expression as softmax_cross_entropy.
                double mx = lv[i * c];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
                double z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(lv[i * c + j] - mx);
                const std::size_t t = static_cast<std::size_t>(batch.labels[i]);
                nll_sum += -(lv[i * c + t] - mx - std::log(z));
            }
        }
    }
    if (metric == EvalMetric::accuracy) {
        return static_cast<double>(correct) / static_cast<double>(dataset.size());
    }
    return nll_sum / static_cast<double>(dataset.size());
}

}  // namespace flexkd
