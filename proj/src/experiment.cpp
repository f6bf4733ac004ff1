#include "flexkd/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flexkd/encoding.hpp"
#include "flexkd/error.hpp"

namespace flexkd {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed json in " + path.string() + ": " + e.what());
    }
    return j;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir.string());
}

void write_resolved_config(const ExperimentConfig& config, const fs::path& out_dir) {
    write_text(out_dir / "resolved.cfg", config.canonical_text());
}

std::string run_dir_name(const std::string& method, std::uint64_t seed) {
    return method + "-seed" + std::to_string(seed);
}

OptimizerConfig optimizer_from(const std::string& method_name, double lr, double weight_decay,
                               double epsilon) {
    OptimizerConfig opt;
    opt.method = opt_method_from_string(method_name);
    opt.lr = lr;
    opt.weight_decay = weight_decay;
    opt.epsilon = epsilon;
    return opt;
}

}  // namespace

DatasetBundle dataset_from_config(const ExperimentConfig& config) {
    const auto& d = config.dataset;
    if (d.kind == "planted") {
        PlantedRelevanceSpec spec;
        spec.d_input = d.d_input;
        spec.num_relevant = d.relevant;
        spec.noise_scale = d.noise_scale;
        spec.num_classes = d.num_classes;
        spec.seed = d.seed;
        spec.train_size = d.train_size;
        spec.val_size = d.val_size;
        spec.test_size = d.test_size;
        return gen_planted_task(spec);
    }
    if (d.kind == "sequence") {
        SeqTaskSpec spec;
        spec.vocab_size = d.vocab_size;
        spec.context_len = d.context_len;
        spec.rule = seq_rule_from_string(d.rule);
        spec.seed = d.seed;
        spec.train_size = d.train_size;
        spec.val_size = d.val_size;
        spec.test_size = d.test_size;
        return gen_seq_task(spec);
    }
    if (d.kind == "csv") {
        CsvSchema schema;
        schema.num_classes = d.num_classes;
        DatasetBundle bundle;
        bundle.train = load_csv(d.train_path, schema);
        bundle.train.split_tag = "train";
        if (!d.val_path.empty()) {
            bundle.val = load_csv(d.val_path, schema);
            bundle.val.split_tag = "val";
        }
        bundle.test = load_csv(d.test_path, schema);
        bundle.test.split_tag = "test";
        if (bundle.train.feature_dim != bundle.test.feature_dim) {
            throw DataError("csv train and test have different feature widths");
        }
        bundle.provenance = "csv(" + d.train_path + ")";
        bundle.seed = d.seed;
        return bundle;
    }
    throw ConfigError("unknown dataset kind '" + d.kind + "'");
}

namespace {

std::string model_config_text(const ExperimentConfig::ModelSection& section,
                              const ExperimentConfig& config, const DatasetBundle& data) {
    if (config.dataset.kind == "sequence") {
        json j = {{"type", "tinyseq"},
                  {"vocab_size", config.dataset.vocab_size},
                  {"embed_dim", section.embed_dim},
                  {"num_layers", section.num_layers},
                  {"hidden_dim", section.hidden_dim},
                  {"context_len", config.dataset.context_len}};
        return j.dump();
    }
    json j = {{"type", "mlp"},
              {"input_dim", data.train.feature_dim},
              {"hidden_dims", section.hidden_dims},
              {"num_classes", data.train.num_classes},
              {"activation", section.activation}};
    return j.dump();
}

}  // namespace

std::string teacher_config_text(const ExperimentConfig& config, const DatasetBundle& data) {
    return model_config_text(config.teacher_model, config, data);
}

std::string student_config_text(const ExperimentConfig& config, const DatasetBundle& data) {
    return model_config_text(config.student_model, config, data);
}

LossWeights method_loss_weights(const ExperimentConfig& config, const std::string& method) {
    const auto it = config.weights.find(method);
    if (it == config.weights.end()) {
        throw ConfigError("no weights configured for method '" + method + "'");
    }
    LossWeights w;
    w.alpha = it->second.alpha;
    w.beta = it->second.beta;
    w.lambda = it->second.lambda;
    w.temperature = config.distill.temperature;
    w.logit_mode = w.beta > 0.0 ? logit_mode_from_string(config.distill.logit_mode)
                                : LogitMode::none;
    w.validate();
    return w;
}

fs::path stage_train_teacher(const ExperimentConfig& config,
                             std::optional<std::uint64_t> seed_override,
                             const fs::path& out_dir) {
    ensure_dir(out_dir);
    write_resolved_config(config, out_dir);
    const DatasetBundle data = dataset_from_config(config);
    write_json(out_dir / "manifest.json", data.manifest());

    std::unique_ptr<Model> teacher =
        model_from_config_text(teacher_config_text(config, data),
                               seed_override.value_or(config.teacher_train.seed));
    TrainConfig tc;
    tc.epochs = config.teacher_train.epochs;
    tc.batch_size = config.teacher_train.batch_size;
    tc.seed = seed_override.value_or(config.teacher_train.seed);
    tc.opt = optimizer_from(config.teacher_train.optimizer, config.teacher_train.lr,
                            config.teacher_train.weight_decay, config.teacher_train.epsilon);

    const fs::path ckpt_path = out_dir / "teacher.json";
    try {
        TeacherResult result = train_supervised(*teacher, data, tc);
        save_checkpoint(result.checkpoint, ckpt_path);
        json hist = json::array();
        for (const EpochMetric& m : result.history) {
            hist.push_back({{"epoch", m.epoch},
                            {"train_loss", m.train_loss},
                            {"train_accuracy", m.train_accuracy},
                            {"val_accuracy", m.val_accuracy}});
        }
        write_json(out_dir / "history.json", json{{"epochs", std::move(hist)}});
    } catch (const TrainingDiverged& e) {
        save_checkpoint(e.last_good, out_dir / "teacher.lastgood.json");
        throw;
    }
    return ckpt_path;
}

fs::path stage_score(const ExperimentConfig& config, const fs::path& teacher_path,
                     std::optional<double> calibration_fraction_override,
                     std::optional<std::uint64_t> seed_override, const fs::path& out_dir) {
    ensure_dir(out_dir);
    write_resolved_config(config, out_dir);
    const Checkpoint teacher_ckpt = load_checkpoint(teacher_path);
    std::unique_ptr<Model> teacher = model_from_checkpoint(teacher_ckpt);
    const DatasetBundle data = dataset_from_config(config);

    AttributionOptions opts;
    opts.calibration_fraction =
        calibration_fraction_override.value_or(config.attribution.calibration_fraction);
    opts.calibration_seed = seed_override.value_or(config.attribution.seed);
    opts.teacher_checksum = checkpoint_checksum(teacher_ckpt);
    const OutputReduction reduction =
        output_reduction_from_string(config.attribution.output_reduction);

    const ImportanceProfile profile = aggregate_importance(*teacher, data.train, reduction, opts);
    const fs::path profile_path = out_dir / "profile.json";
    save_profile(profile, profile_path);
    return profile_path;
}

RunOutcome stage_distill(const ExperimentConfig& config, const fs::path& teacher_path,
                         const fs::path& profile_path, const std::string& method,
                         std::uint64_t seed, const fs::path& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const DatasetBundle data = dataset_from_config(config);

    DistillationPlan plan;
    plan.teacher = load_checkpoint(teacher_path);
    plan.profile = load_profile(profile_path);
    plan.student_config_text = student_config_text(config, data);
    plan.method = method_from_string(method);
    plan.weights = method_loss_weights(config, method);
    plan.steps = config.distill.steps;
    plan.batch_size = config.distill.batch_size;
    plan.opt = optimizer_from(config.distill.optimizer, config.distill.lr,
                              config.distill.weight_decay, config.distill.epsilon);
    plan.seed = seed;
    plan.centered_correlation = config.distill.centered_correlation;

    const fs::path run_dir = out_dir / "runs" / run_dir_name(method, seed);
    ensure_dir(run_dir);
    DistillResult result = distill(plan, data);

    std::unique_ptr<Model> student = model_from_checkpoint(result.student);
    RunMetrics metrics;
    metrics.accuracy = evaluate(*student, data.test, EvalMetric::accuracy);
    metrics.nll = evaluate(*student, data.test, EvalMetric::nll);
    metrics.steps = plan.steps;
    metrics.zero_norm_events = result.zero_norm_events;

    save_checkpoint(result.student, run_dir / "student.json");
    {
        std::ofstream trace(run_dir / "trace.jsonl");
        if (!trace) throw DataError("cannot write trace in " + run_dir.string());
        for (const TraceRecord& r : result.trace) {
            json j = {{"step", r.step},
                      {"loss_total", r.loss_total},
                      {"loss_supervised", r.loss_supervised},
                      {"lr", r.lr}};
            if (r.loss_feature) j["loss_feature"] = *r.loss_feature;
            if (r.loss_logit) j["loss_logit"] = *r.loss_logit;
            trace << j.dump() << "\n";
        }
    }
    json final_j = {{"method", method},
                    {"seed", seed},
                    {"accuracy", metrics.accuracy},
                    {"nll", metrics.nll},
                    {"steps", metrics.steps},
                    {"zero_norm_events", metrics.zero_norm_events}};
    if (!result.selection.indices.empty()) final_j["selection"] = result.selection.indices;
    write_json(run_dir / "final.json", final_j);

    RunOutcome outcome;
    outcome.metrics = metrics;
    outcome.run_dir = run_dir;
    outcome.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return outcome;
}

CompareOutcome stage_compare(const ExperimentConfig& config, const fs::path& teacher_path,
                             const fs::path& profile_path, const fs::path& out_dir,
                             bool run_missing) {
    ensure_dir(out_dir);
    write_resolved_config(config, out_dir);
    CompareOutcome outcome;
    std::map<std::string, std::map<std::uint64_t, RunMetrics>> runs;
    json timings = json::object();
    double total_seconds = 0.0;

    for (const std::string& method : config.compare.methods) {
        for (std::uint64_t seed : config.compare.seeds) {
            const fs::path final_path =
                out_dir / "runs" / run_dir_name(method, seed) / "final.json";
            if (!fs::exists(final_path)) {
                if (!run_missing) {
                    outcome.missing.push_back(run_dir_name(method, seed));
                    continue;
                }
                RunOutcome run =
                    stage_distill(config, teacher_path, profile_path, method, seed, out_dir);
                timings[run_dir_name(method, seed)] = run.wall_seconds;
                total_seconds += run.wall_seconds;
            }
            const json j = read_json(final_path);
            RunMetrics m;
            m.accuracy = j.at("accuracy").get<double>();
            m.nll = j.at("nll").get<double>();
            m.steps = j.at("steps").get<int>();
            m.zero_norm_events = j.at("zero_norm_events").get<int>();
            runs[method][seed] = m;
        }
    }
    if (!outcome.missing.empty()) return outcome;

    outcome.report =
        build_report(config.compare.baseline, config.compare.methods, config.compare.seeds,
                     config.distill.steps, config.canonical_text(), runs);
    write_json(out_dir / "report.json", report_json(outcome.report));
    write_text(out_dir / "report.md", report_markdown(outcome.report));
    timings["total_seconds"] = total_seconds;
    write_json(out_dir / "timings.json", timings);
    return outcome;
}

SparsityTable stage_inspect(const ExperimentConfig& config, const fs::path& checkpoint_path,
                            const std::vector<double>& thresholds) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    std::unique_ptr<Model> model = model_from_checkpoint(ckpt);
    const DatasetBundle data = dataset_from_config(config);
    return activation_sparsity_profile(*model, data.train, thresholds);
}

double stage_evaluate(const ExperimentConfig& config, const fs::path& checkpoint_path,
                      const std::string& split, EvalMetric metric) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    std::unique_ptr<Model> model = model_from_checkpoint(ckpt);
    const DatasetBundle data = dataset_from_config(config);
    const LabeledDataset* ds = nullptr;
    if (split == "train") {
        ds = &data.train;
    } else if (split == "val") {
        ds = &data.val;
    } else if (split == "test") {
        ds = &data.test;
    } else {
        throw ConfigError("unknown split '" + split + "' (expected train|val|test)");
    }
    if (ds->size() == 0) throw DataError("split '" + split + "' is empty");
    return evaluate(*model, *ds, metric);
}

std::string sparsity_text(const SparsityTable& table) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "layer";
    for (double t : table.thresholds) out << "  |a| < " << t;
    out << "\n";
    for (std::size_t l = 0; l < table.percent.size(); ++l) {
        out << std::setw(5) << l;
        for (double p : table.percent[l]) out << "  " << std::setw(8) << p << "%";
        out << "\n";
    }
    return out.str();
}

}  // namespace flexkd
