#include "flexkd/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "flexkd/error.hpp"
#include "flexkd/losses.hpp"
#include "flexkd/rng.hpp"
#include "flexkd/tape.hpp"

namespace flexkd {

using nlohmann::json;

OutputReduction output_reduction_from_string(const std::string& s) {
    if (s == "task_loss") return OutputReduction::task_loss;
    if (s == "predicted_logit") return OutputReduction::predicted_logit;
    throw ConfigError("unknown output reduction '" + s +
                      "' (expected task_loss|predicted_logit)");
}

std::string to_string(OutputReduction r) {
    return r == OutputReduction::task_loss ? "task_loss" : "predicted_logit";
}

void ImportanceProfile::validate() const {
    const std::size_t d = scores.size();
    if (d == 0) throw DataError("importance profile is empty");
    for (double s : scores) {
        if (!std::isfinite(s) || s < 0.0) {
            throw NumericError("importance profile holds a negative or non-finite score");
        }
    }
    if (ranked_indices.size() != d) throw DataError("ranked_indices length mismatch");
    std::vector<char> seen(d, 0);
    for (int r : ranked_indices) {
        if (r < 0 || static_cast<std::size_t>(r) >= d || seen[static_cast<std::size_t>(r)]) {
            throw DataError("ranked_indices is not a permutation");
        }
        seen[static_cast<std::size_t>(r)] = 1;
    }
    for (std::size_t i = 0; i + 1 < d; ++i) {
        const double a = scores[static_cast<std::size_t>(ranked_indices[i])];
        const double b = scores[static_cast<std::size_t>(ranked_indices[i + 1])];
        if (a < b || (a == b && ranked_indices[i] > ranked_indices[i + 1])) {
            throw DataError("ranked_indices violates the rank order");
        }
    }
}

std::vector<double> per_sample_importance(const Model& teacher, const Batch& sample,
                                          OutputReduction reduction) {
    if (sample.size != 1) {
        throw DataError("per_sample_importance expects a single-sample batch");
    }
    Tape tape;
    ForwardResult fr = teacher.forward(tape, sample);
    Tensor scalar;
    if (reduction == OutputReduction::task_loss) {
        scalar = supervised_loss(tape, fr, sample);
    } else {
        scalar = tape.reduce_max(classification_logits(tape, fr, sample));
    }
    Tensor g = tape.grad_wrt(scalar, fr.last_hidden);
    const std::size_t d = teacher.hidden_size();
    const auto& gv = g.values();
    std::vector<double> out(d, 0.0);
    if (fr.last_hidden.rank() == 3) {
        const std::size_t s = fr.last_hidden.shape()[1];
        for (std::size_t t = 0; t < s; ++t) {
            for (std::size_t j = 0; j < d; ++j) out[j] += std::fabs(gv[t * d + j]);
        }
        for (double& v : out) v /= static_cast<double>(s);
    } else {
        for (std::size_t j = 0; j < d; ++j) out[j] = std::fabs(gv[j]);
    }
    for (double v : out) {
        if (!std::isfinite(v)) throw NumericError("per-sample importance is non-finite");
    }
    return out;
}

std::vector<int> rank_neurons(const std::vector<double>& scores) {
    for (double s : scores) {
        if (std::isnan(s)) throw NumericError("rank_neurons: scores contain NaN");
    }
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double sa = scores[static_cast<std::size_t>(a)];
        const double sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    return idx;
}

ImportanceProfile profile_from_scores(const std::vector<std::vector<double>>& per_sample,
                                      OutputReduction reduction) {
    if (per_sample.empty()) throw DataError("aggregate_importance: empty dataset");
    const std::size_t d = per_sample.front().size();
    std::vector<double> g(d, 0.0);
    for (const auto& sample : per_sample) {
        if (sample.size() != d) {
            throw DimensionError("aggregate_importance: inconsistent score widths");
        }
        for (std::size_t j = 0; j < d; ++j) g[j] += sample[j];
    }
    const double inv_n = 1.0 / static_cast<double>(per_sample.size());
    for (double& v : g) v *= inv_n;
    ImportanceProfile profile;
    profile.ranked_indices = rank_neurons(g);
    profile.scores = std::move(g);
    profile.num_samples = per_sample.size();
    profile.output_reduction = reduction;
    return profile;
}

ImportanceProfile aggregate_importance(const Model& teacher, const LabeledDataset& dataset,
                                       OutputReduction reduction,
                                       const AttributionOptions& opts) {
    if (dataset.size() == 0) throw DataError("aggregate_importance: empty dataset");
    if (!(opts.calibration_fraction > 0.0) || opts.calibration_fraction > 1.0) {
        throw ConfigError("calibration_fraction must lie in (0, 1]");
    }
    std::vector<std::size_t> indices;
    if (opts.calibration_fraction < 1.0) {
        const std::size_t n = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::llround(opts.calibration_fraction * static_cast<double>(dataset.size()))));
        Rng rng(Rng::derive(opts.calibration_seed, 0xca11b));
        indices = rng.permutation(dataset.size());
        indices.resize(std::min(n, indices.size()));
        std::sort(indices.begin(), indices.end());  // fixed dataset order
    } else {
        indices.resize(dataset.size());
        std::iota(indices.begin(), indices.end(), 0);
    }
    std::vector<std::vector<double>> samples;
    samples.reserve(indices.size());
    for (std::size_t i : indices) {
        samples.push_back(per_sample_importance(teacher, single_batch(dataset, i), reduction));
    }
    ImportanceProfile profile = profile_from_scores(samples, reduction);
    profile.calibration_fraction = opts.calibration_fraction;
    profile.calibration_seed = opts.calibration_seed;
    profile.teacher_checksum = opts.teacher_checksum;
    return profile;
}

SelectionSet select_top(const ImportanceProfile& profile, std::size_t d_s) {
    if (d_s < 1 || d_s > profile.d_t()) {
        throw ConfigError("select_top: d_s = " + std::to_string(d_s) +
                          " outside [1, " + std::to_string(profile.d_t()) + "]");
    }
    SelectionSet e;
    e.indices.assign(profile.ranked_indices.begin(),
                     profile.ranked_indices.begin() + static_cast<std::ptrdiff_t>(d_s));
    return e;
}

SparsityTable activation_sparsity_profile(const Model& model, const LabeledDataset& dataset,
                                          const std::vector<double>& thresholds) {
    if (dataset.size() == 0) throw DataError("activation_sparsity_profile: empty dataset");
    if (thresholds.empty()) throw ConfigError("activation_sparsity_profile: no thresholds");
    for (double t : thresholds) {
        if (!(t > 0.0)) throw ConfigError("activation_sparsity_profile: thresholds must be > 0");
    }
    std::vector<std::vector<std::uint64_t>> below;  // [layer][threshold]
    std::vector<std::uint64_t> totals;
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(dataset.size(), start + chunk); ++i) {
            idx.push_back(i);
        }
        Tape tape;
        std::vector<Tensor> stack = model.hidden_stack(tape, make_batch(dataset, idx));
        if (below.empty()) {
            below.assign(stack.size(), std::vector<std::uint64_t>(thresholds.size(), 0));
            totals.assign(stack.size(), 0);
        }
        for (std::size_t l = 0; l < stack.size(); ++l) {
            const auto& v = stack[l].values();
            totals[l] += v.size();
            for (double a : v) {
                const double mag = std::fabs(a);
                for (std::size_t t = 0; t < thresholds.size(); ++t) {
                    if (mag < thresholds[t]) ++below[l][t];
                }
            }
        }
    }
    SparsityTable table;
    table.thresholds = thresholds;
    table.percent.resize(below.size());
    for (std::size_t l = 0; l < below.size(); ++l) {
        table.percent[l].resize(thresholds.size());
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            table.percent[l][t] =
                100.0 * static_cast<double>(below[l][t]) / static_cast<double>(totals[l]);
        }
    }
    return table;
}

void save_profile(const ImportanceProfile& profile, const std::filesystem::path& path) {
    profile.validate();
    json j;
    j["format"] = "flexkd-profile";
    j["version"] = 1;
    j["d_t"] = profile.d_t();
    j["num_samples"] = profile.num_samples;
    j["scope"] = profile.scope;
    j["output_reduction"] = to_string(profile.output_reduction);
    j["scores"] = profile.scores;
    j["ranked_indices"] = profile.ranked_indices;
    j["calibration_fraction"] = profile.calibration_fraction;
    j["calibration_seed"] = profile.calibration_seed;
    j["teacher_checksum"] = profile.teacher_checksum;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write profile file " + path.string());
    out << j.dump(2) << "\n";
}

ImportanceProfile load_profile(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open profile file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed profile " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "flexkd-profile") {
        throw DataError(path.string() + " is not a profile file");
    }
    ImportanceProfile profile;
    profile.scores = j.at("scores").get<std::vector<double>>();
    profile.ranked_indices = j.at("ranked_indices").get<std::vector<int>>();
    profile.num_samples = j.at("num_samples").get<std::size_t>();
    profile.scope = j.at("scope").get<std::string>();
    profile.output_reduction =
        output_reduction_from_string(j.at("output_reduction").get<std::string>());
    profile.calibration_fraction = j.at("calibration_fraction").get<double>();
    profile.calibration_seed = j.at("calibration_seed").get<std::uint64_t>();
    profile.teacher_checksum = j.at("teacher_checksum").get<std::string>();
    if (profile.d_t() != j.at("d_t").get<std::size_t>()) {
        throw DataError(path.string() + ": d_t disagrees with the scores array");
    }
    profile.validate();
    return profile;
}

}  // namespace flexkd
