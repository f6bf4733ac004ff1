#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace flexkd {

struct RunMetrics {
    double accuracy = 0.0;  // fraction in [0, 1]
    double nll = 0.0;
    int steps = 0;
    int zero_norm_events = 0;
};

struct MethodAggregate {
    std::map<std::uint64_t, RunMetrics> per_seed;
    double mean_accuracy_pct = 0.0;
    double std_accuracy_pct = 0.0;  // population standard deviation
    double mean_nll = 0.0;
    std::optional<double> delta_accuracy_pct;  // mean(method) - mean(baseline)
};

struct ExperimentReport {
    std::string baseline;
    std::vector<std::string> method_order;
    std::vector<std::uint64_t> seeds;
    int steps_per_run = 0;
    std::string config_text;  // resolved canonical config
    std::map<std::string, MethodAggregate> methods;
};

double mean_of(const std::vector<double>& values);
double population_std(const std::vector<double>& values);

ExperimentReport build_report(
    const std::string& baseline, const std::vector<std::string>& method_order,
    const std::vector<std::uint64_t>& seeds, int steps_per_run, const std::string& config_text,
    const std::map<std::string, std::map<std::uint64_t, RunMetrics>>& runs);

nlohmann::json report_json(const ExperimentReport& report);
std::string report_markdown(const ExperimentReport& report);

}  // namespace flexkd
