#include "flexkd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "flexkd/error.hpp"

namespace flexkd {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// Raw key/value table: section -> key -> value text.
using RawConfig = std::map<std::string, std::map<std::string, std::string>>;

RawConfig parse_raw(const std::string& text) {
    RawConfig raw;
    std::string section;  // "" = top level
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ConfigError("config line " + std::to_string(line_no) + ": empty section");
            }
            raw[section];
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        }
        if (raw[section].count(key)) {
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                              key + "' in section [" + section + "]");
        }
        raw[section][key] = value;
    }
    return raw;
}

// Typed reads over one section; every key accessed is recorded so leftovers
// can be flagged as unknown.
class SectionReader {
public:
    SectionReader(const RawConfig& raw, std::string section) : section_(std::move(section)) {
        const auto it = raw.find(section_);
        if (it != raw.end()) entries_ = &it->second;
    }

    bool present() const { return entries_ != nullptr; }

    std::string get_string(const std::string& key, const std::string& def) {
        const std::string* v = fetch(key);
        return v ? *v : def;
    }

    double get_double(const std::string& key, double def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        double out = 0.0;
        const auto res = std::from_chars(v->data(), v->data() + v->size(), out);
        if (res.ec != std::errc{} || res.ptr != v->data() + v->size() || !std::isfinite(out)) {
            throw ConfigError(where(key) + ": expected a number, got '" + *v + "'");
        }
        return out;
    }

    std::int64_t get_int(const std::string& key, std::int64_t def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        std::int64_t out = 0;
        const auto res = std::from_chars(v->data(), v->data() + v->size(), out);
        if (res.ec != std::errc{} || res.ptr != v->data() + v->size()) {
            throw ConfigError(where(key) + ": expected an integer, got '" + *v + "'");
        }
        return out;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
        const std::int64_t v = get_int(key, static_cast<std::int64_t>(def));
        if (v < 0) throw ConfigError(where(key) + ": expected a non-negative integer");
        return static_cast<std::uint64_t>(v);
    }

    std::size_t get_size(const std::string& key, std::size_t def) {
        return static_cast<std::size_t>(get_u64(key, def));
    }

    bool get_bool(const std::string& key, bool def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        if (*v == "true") return true;
        if (*v == "false") return false;
        throw ConfigError(where(key) + ": expected true|false, got '" + *v + "'");
    }

    std::vector<std::string> get_string_list(const std::string& key,
                                             const std::vector<std::string>& def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        return split_list(*v);
    }

    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        std::vector<std::size_t> out;
        for (const std::string& item : split_list(*v)) {
            std::int64_t n = 0;
            const auto res = std::from_chars(item.data(), item.data() + item.size(), n);
            if (res.ec != std::errc{} || res.ptr != item.data() + item.size() || n < 1) {
                throw ConfigError(where(key) + ": expected positive integers, got '" + item + "'");
            }
            out.push_back(static_cast<std::size_t>(n));
        }
        return out;
    }

    std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                            const std::vector<std::uint64_t>& def) {
        const std::string* v = fetch(key);
        if (!v) return def;
        std::vector<std::uint64_t> out;
        for (const std::string& item : split_list(*v)) {
            std::int64_t n = 0;
            const auto res = std::from_chars(item.data(), item.data() + item.size(), n);
            if (res.ec != std::errc{} || res.ptr != item.data() + item.size() || n < 0) {
                throw ConfigError(where(key) + ": expected non-negative integers, got '" + item +
                                  "'");
            }
            out.push_back(static_cast<std::uint64_t>(n));
        }
        return out;
    }

    void finish() const {
        if (!entries_) return;
        for (const auto& [key, value] : *entries_) {
            if (!used_.count(key)) {
                throw ConfigError("unknown key '" + key + "' in section [" + section_ + "]");
            }
        }
    }

private:
    const std::string* fetch(const std::string& key) {
        used_.insert(key);
        if (!entries_) return nullptr;
        const auto it = entries_->find(key);
        return it == entries_->end() ? nullptr : &it->second;
    }

    std::string where(const std::string& key) const {
        return "config [" + section_ + "] " + key;
    }

    std::string section_;
    const std::map<std::string, std::string>* entries_ = nullptr;
    std::set<std::string> used_;
};

ExperimentConfig::ModelSection read_model_fields(SectionReader& sec,
                                                 const ExperimentConfig::ModelSection& defaults) {
    ExperimentConfig::ModelSection out;
    out.hidden_dims = sec.get_size_list("hidden_dims", defaults.hidden_dims);
    out.activation = sec.get_string("activation", defaults.activation);
    out.embed_dim = sec.get_size("embed_dim", defaults.embed_dim);
    out.num_layers = sec.get_size("num_layers", defaults.num_layers);
    out.hidden_dim = sec.get_size("hidden_dim", defaults.hidden_dim);
    return out;
}

const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> methods = {"ft_only", "vanilla_kd", "projector_mse",
                                                     "projector_corr", "flexkd"};
    return methods;
}

ExperimentConfig::Weights default_weights(const std::string& method) {
    // Classification regime defaults: each stand-alone KD loss at 0.5 next to
    // a 0.5 supervised term; plain fine-tuning keeps only the supervised term.
    if (method == "ft_only") return {0.0, 0.0, 1.0};
    if (method == "vanilla_kd") return {0.0, 0.5, 0.5};
    return {0.5, 0.0, 0.5};  // flexkd, projector_mse, projector_corr
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    const RawConfig raw = parse_raw(text);
    for (const auto& [section, entries] : raw) {
        (void)entries;
        static const std::set<std::string> known = {"",           "dataset", "teacher",
                                                    "student",    "attribution", "distill",
                                                    "compare"};
        if (known.count(section)) continue;
        if (section.rfind("weights.", 0) == 0) {
            const std::string method = section.substr(8);
            const auto& methods = known_methods();
            if (std::find(methods.begin(), methods.end(), method) == methods.end()) {
                throw ConfigError("unknown method in section [" + section + "]");
            }
            continue;
        }
        throw ConfigError("unknown config section [" + section + "]");
    }

    ExperimentConfig cfg;
    {
        SectionReader top(raw, "");
        const std::int64_t version = top.get_int("version", -1);
        if (version == -1) throw ConfigError("config is missing the top-level 'version' key");
        if (version != 1) {
            throw ConfigError("unsupported config version " + std::to_string(version));
        }
        cfg.version = 1;
        top.finish();
    }
    {
        SectionReader sec(raw, "dataset");
        ExperimentConfig::Dataset d;
        d.kind = sec.get_string("kind", d.kind);
        d.seed = sec.get_u64("seed", d.seed);
        d.train_size = sec.get_size("train_size", d.train_size);
        d.val_size = sec.get_size("val_size", d.val_size);
        d.test_size = sec.get_size("test_size", d.test_size);
        d.d_input = sec.get_size("d_input", d.d_input);
        d.relevant = sec.get_size("relevant", d.relevant);
        d.noise_scale = sec.get_double("noise_scale", d.noise_scale);
        d.num_classes = sec.get_size("num_classes", d.num_classes);
        d.vocab_size = sec.get_size("vocab_size", d.vocab_size);
        d.context_len = sec.get_size("context_len", d.context_len);
        d.rule = sec.get_string("rule", d.rule);
        d.train_path = sec.get_string("train_path", d.train_path);
        d.val_path = sec.get_string("val_path", d.val_path);
        d.test_path = sec.get_string("test_path", d.test_path);
        sec.finish();
        cfg.dataset = d;
    }
    {
        SectionReader sec(raw, "teacher");
        ExperimentConfig::ModelSection teacher_defaults;
        teacher_defaults.hidden_dims = {64};
        teacher_defaults.hidden_dim = 32;
        cfg.teacher_model = read_model_fields(sec, teacher_defaults);
        ExperimentConfig::TeacherTrain t;
        t.epochs = static_cast<int>(sec.get_int("epochs", t.epochs));
        t.batch_size = static_cast<int>(sec.get_int("batch_size", t.batch_size));
        t.lr = sec.get_double("lr", t.lr);
        t.optimizer = sec.get_string("optimizer", t.optimizer);
        t.weight_decay = sec.get_double("weight_decay", t.weight_decay);
        t.epsilon = sec.get_double("epsilon", t.epsilon);
        t.seed = sec.get_u64("seed", t.seed);
        sec.finish();
        cfg.teacher_train = t;
    }
    {
        SectionReader sec(raw, "student");
        ExperimentConfig::ModelSection student_defaults;
        student_defaults.hidden_dims = {16};
        student_defaults.hidden_dim = 12;
        cfg.student_model = read_model_fields(sec, student_defaults);
        sec.finish();
    }
    {
        SectionReader sec(raw, "attribution");
        ExperimentConfig::Attribution a;
        a.output_reduction = sec.get_string("output_reduction", a.output_reduction);
        a.calibration_fraction = sec.get_double("calibration_fraction", a.calibration_fraction);
        a.seed = sec.get_u64("seed", a.seed);
        sec.finish();
        cfg.attribution = a;
    }
    {
        SectionReader sec(raw, "distill");
        ExperimentConfig::Distill d;
        d.steps = static_cast<int>(sec.get_int("steps", d.steps));
        d.batch_size = static_cast<int>(sec.get_int("batch_size", d.batch_size));
        d.lr = sec.get_double("lr", d.lr);
        d.optimizer = sec.get_string("optimizer", d.optimizer);
        d.weight_decay = sec.get_double("weight_decay", d.weight_decay);
        d.epsilon = sec.get_double("epsilon", d.epsilon);
        d.temperature = sec.get_double("temperature", d.temperature);
        d.logit_mode = sec.get_string("logit_mode", d.logit_mode);
        d.centered_correlation = sec.get_bool("centered_correlation", d.centered_correlation);
        sec.finish();
        cfg.distill = d;
    }
    {
        SectionReader sec(raw, "compare");
        ExperimentConfig::Compare c;
        c.methods = sec.get_string_list("methods", c.methods);
        c.seeds = sec.get_u64_list("seeds", c.seeds);
        c.baseline = sec.get_string("baseline", c.baseline);
        sec.finish();
        cfg.compare = c;
    }
    for (const std::string& method : known_methods()) {
        SectionReader sec(raw, "weights." + method);
        const ExperimentConfig::Weights def = default_weights(method);
        ExperimentConfig::Weights w;
        w.alpha = sec.get_double("alpha", def.alpha);
        w.beta = sec.get_double("beta", def.beta);
        w.lambda = sec.get_double("lambda", def.lambda);
        sec.finish();
        cfg.weights[method] = w;
    }
    cfg.validate();
    return cfg;
}

void ExperimentConfig::validate() const {
    if (dataset.kind != "planted" && dataset.kind != "sequence" && dataset.kind != "csv") {
        throw ConfigError("dataset.kind must be planted|sequence|csv, got '" + dataset.kind +
                          "'");
    }
    if (dataset.kind == "csv") {
        if (dataset.train_path.empty() || dataset.test_path.empty()) {
            throw ConfigError("csv datasets need dataset.train_path and dataset.test_path");
        }
        if (dataset.num_classes < 2) throw ConfigError("csv datasets need dataset.num_classes");
    }
    if (!(attribution.calibration_fraction > 0.0) || attribution.calibration_fraction > 1.0) {
        throw ConfigError("attribution.calibration_fraction must lie in (0, 1]");
    }
    if (attribution.output_reduction != "task_loss" &&
        attribution.output_reduction != "predicted_logit") {
        throw ConfigError("attribution.output_reduction must be task_loss|predicted_logit");
    }
    if (compare.methods.empty()) throw ConfigError("compare.methods must not be empty");
    const auto& methods = known_methods();
    for (const std::string& m : compare.methods) {
        if (std::find(methods.begin(), methods.end(), m) == methods.end()) {
            throw ConfigError("compare.methods holds unknown method '" + m + "'");
        }
    }
    if (compare.seeds.empty()) throw ConfigError("compare.seeds must not be empty");
    if (std::find(methods.begin(), methods.end(), compare.baseline) == methods.end()) {
        throw ConfigError("compare.baseline is not a known method");
    }
    for (const auto& [method, w] : weights) {
        if (w.alpha < 0 || w.beta < 0 || w.lambda < 0 || w.alpha + w.beta + w.lambda <= 0) {
            throw ConfigError("weights." + method + ": need non-negative weights with a "
                              "positive sum");
        }
    }
}

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream out;
    out << "version = " << version << "\n\n";
    out << "[dataset]\n";
    out << "kind = " << dataset.kind << "\n";
    out << "seed = " << dataset.seed << "\n";
    out << "train_size = " << dataset.train_size << "\n";
    out << "val_size = " << dataset.val_size << "\n";
    out << "test_size = " << dataset.test_size << "\n";
    out << "d_input = " << dataset.d_input << "\n";
    out << "relevant = " << dataset.relevant << "\n";
    out << "noise_scale = " << format_double(dataset.noise_scale) << "\n";
    out << "num_classes = " << dataset.num_classes << "\n";
    out << "vocab_size = " << dataset.vocab_size << "\n";
    out << "context_len = " << dataset.context_len << "\n";
    out << "rule = " << dataset.rule << "\n";
    out << "train_path = " << dataset.train_path << "\n";
    out << "val_path = " << dataset.val_path << "\n";
    out << "test_path = " << dataset.test_path << "\n";
    auto emit_model = [&out](const ModelSection& m) {
        out << "hidden_dims = ";
        for (std::size_t i = 0; i < m.hidden_dims.size(); ++i) {
            if (i) out << ", ";
            out << m.hidden_dims[i];
        }
        out << "\n";
        out << "activation = " << m.activation << "\n";
        out << "embed_dim = " << m.embed_dim << "\n";
        out << "num_layers = " << m.num_layers << "\n";
        out << "hidden_dim = " << m.hidden_dim << "\n";
    };
    out << "\n[teacher]\n";
    emit_model(teacher_model);
    out << "epochs = " << teacher_train.epochs << "\n";
    out << "batch_size = " << teacher_train.batch_size << "\n";
    out << "lr = " << format_double(teacher_train.lr) << "\n";
    out << "optimizer = " << teacher_train.optimizer << "\n";
    out << "weight_decay = " << format_double(teacher_train.weight_decay) << "\n";
    out << "epsilon = " << format_double(teacher_train.epsilon) << "\n";
    out << "seed = " << teacher_train.seed << "\n";
    out << "\n[student]\n";
    emit_model(student_model);
    out << "\n[attribution]\n";
    out << "output_reduction = " << attribution.output_reduction << "\n";
    out << "calibration_fraction = " << format_double(attribution.calibration_fraction) << "\n";
    out << "seed = " << attribution.seed << "\n";
    out << "\n[distill]\n";
    out << "steps = " << distill.steps << "\n";
    out << "batch_size = " << distill.batch_size << "\n";
    out << "lr = " << format_double(distill.lr) << "\n";
    out << "optimizer = " << distill.optimizer << "\n";
    out << "weight_decay = " << format_double(distill.weight_decay) << "\n";
    out << "epsilon = " << format_double(distill.epsilon) << "\n";
    out << "temperature = " << format_double(distill.temperature) << "\n";
    out << "logit_mode = " << distill.logit_mode << "\n";
    out << "centered_correlation = " << (distill.centered_correlation ? "true" : "false")
        << "\n";
    out << "\n[compare]\n";
    out << "methods = ";
    for (std::size_t i = 0; i < compare.methods.size(); ++i) {
        if (i) out << ", ";
        out << compare.methods[i];
    }
    out << "\n";
    out << "seeds = ";
    for (std::size_t i = 0; i < compare.seeds.size(); ++i) {
        if (i) out << ", ";
        out << compare.seeds[i];
    }
    out << "\n";
    out << "baseline = " << compare.baseline << "\n";
    for (const auto& [method, w] : weights) {
        out << "\n[weights." << method << "]\n";
        out << "alpha = " << format_double(w.alpha) << "\n";
        out << "beta = " << format_double(w.beta) << "\n";
        out << "lambda = " << format_double(w.lambda) << "\n";
    }
    return out.str();
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void write_config_file(const ExperimentConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write config file " + path.string());
    out << config.canonical_text();
}

}  // namespace flexkd
