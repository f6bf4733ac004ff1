#include "flexkd/report.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flexkd/error.hpp"

namespace flexkd {

using nlohmann::json;

double mean_of(const std::vector<double>& values) {
    if (values.empty()) throw DataError("mean of an empty value list");
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

double population_std(const std::vector<double>& values) {
    const double m = mean_of(values);
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size()));
}

ExperimentReport build_report(
    const std::string& baseline, const std::vector<std::string>& method_order,
    const std::vector<std::uint64_t>& seeds, int steps_per_run, const std::string& config_text,
    const std::map<std::string, std::map<std::uint64_t, RunMetrics>>& runs) {
    ExperimentReport report;
    report.baseline = baseline;
    report.method_order = method_order;
    report.seeds = seeds;
    report.steps_per_run = steps_per_run;
    report.config_text = config_text;

    for (const std::string& method : method_order) {
        const auto it = runs.find(method);
        if (it == runs.end() || it->second.empty()) {
            throw DataError("report: no runs recorded for method '" + method + "'");
        }
        MethodAggregate agg;
        agg.per_seed = it->second;
        std::vector<double> accs, nlls;
        for (const auto& [seed, metrics] : agg.per_seed) {
            (void)seed;
            accs.push_back(100.0 * metrics.accuracy);
            nlls.push_back(metrics.nll);
        }
        agg.mean_accuracy_pct = mean_of(accs);
        agg.std_accuracy_pct = population_std(accs);
        agg.mean_nll = mean_of(nlls);
        report.methods[method] = agg;
    }
    const auto base_it = report.methods.find(baseline);
    if (base_it != report.methods.end()) {
        const double base_mean = base_it->second.mean_accuracy_pct;
        for (auto& [method, agg] : report.methods) {
            (void)method;
            agg.delta_accuracy_pct = agg.mean_accuracy_pct - base_mean;
        }
    }
    return report;
}

json report_json(const ExperimentReport& report) {
    json methods = json::object();
    for (const std::string& name : report.method_order) {
        const MethodAggregate& agg = report.methods.at(name);
        json per_seed = json::object();
        for (const auto& [seed, metrics] : agg.per_seed) {
            per_seed[std::to_string(seed)] = {{"accuracy_pct", 100.0 * metrics.accuracy},
                                              {"nll", metrics.nll},
                                              {"steps", metrics.steps},
                                              {"zero_norm_events", metrics.zero_norm_events}};
        }
        json m = {{"per_seed", std::move(per_seed)},
                  {"mean_accuracy_pct", agg.mean_accuracy_pct},
                  {"std_accuracy_pct", agg.std_accuracy_pct},
                  {"mean_nll", agg.mean_nll}};
        if (agg.delta_accuracy_pct.has_value()) {
            m["delta_accuracy_pct_vs_baseline"] = *agg.delta_accuracy_pct;
        }
        methods[name] = std::move(m);
    }
    return json{{"format", "flexkd-report"},
                {"version", 1},
                {"baseline", report.baseline},
                {"method_order", report.method_order},
                {"seeds", report.seeds},
                {"steps_per_run", report.steps_per_run},
                {"config", report.config_text},
                {"methods", std::move(methods)}};
}

std::string report_markdown(const ExperimentReport& report) {
    std::ostringstream out;
    out << "# Distillation comparison\n\n";
    out << "Seeds: ";
    for (std::size_t i = 0; i < report.seeds.size(); ++i) {
        if (i) out << ", ";
        out << report.seeds[i];
    }
    out << " | steps per run: " << report.steps_per_run << " | baseline: " << report.baseline
        << "\n\n";
    out << "| Method | Test accuracy (%) | Mean NLL | Delta vs " << report.baseline << " |\n";
    out << "|---|---|---|---|\n";
    out << std::fixed << std::setprecision(2);
    for (const std::string& name : report.method_order) {
        const MethodAggregate& agg = report.methods.at(name);
        out << "| " << name << " | " << agg.mean_accuracy_pct << " +/- " << agg.std_accuracy_pct
            << " | " << std::setprecision(4) << agg.mean_nll << std::setprecision(2) << " | ";
        if (agg.delta_accuracy_pct.has_value()) {
            const double d = *agg.delta_accuracy_pct;
            out << (d >= 0 ? "+" : "") << d;
        } else {
            out << "n/a";
        }
        out << " |\n";
    }
    return out.str();
}

}  // namespace flexkd
