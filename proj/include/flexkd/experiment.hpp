#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flexkd/attribution.hpp"
#include "flexkd/config.hpp"
#include "flexkd/dataset.hpp"
#include "flexkd/report.hpp"
#include "flexkd/train.hpp"

namespace flexkd {

// Pipeline stages shared by the CLI and the test harness. Each stage reads
// and writes on-disk artifacts so runs are resumable and independently
// inspectable:
//
//   out/teacher.json            teacher checkpoint
//   out/manifest.json           dataset manifest
//   out/history.json            per-epoch teacher metrics
//   out/profile.json            importance profile (checksum-bound)
//   out/runs/<method>-seed<k>/  student.json, trace.jsonl, final.json
//   out/report.json, report.md  comparison report
//   out/timings.json            wall-clock sidecar
//   out/resolved.cfg            config with every default materialized

DatasetBundle dataset_from_config(const ExperimentConfig& config);

std::string teacher_config_text(const ExperimentConfig& config, const DatasetBundle& data);
std::string student_config_text(const ExperimentConfig& config, const DatasetBundle& data);

LossWeights method_loss_weights(const ExperimentConfig& config, const std::string& method);

std::filesystem::path stage_train_teacher(const ExperimentConfig& config,
                                          std::optional<std::uint64_t> seed_override,
                                          const std::filesystem::path& out_dir);

std::filesystem::path stage_score(const ExperimentConfig& config,
                                  const std::filesystem::path& teacher_path,
                                  std::optional<double> calibration_fraction_override,
                                  std::optional<std::uint64_t> seed_override,
                                  const std::filesystem::path& out_dir);

struct RunOutcome {
    RunMetrics metrics;
    std::filesystem::path run_dir;
    double wall_seconds = 0.0;
};

RunOutcome stage_distill(const ExperimentConfig& config,
                         const std::filesystem::path& teacher_path,
                         const std::filesystem::path& profile_path, const std::string& method,
                         std::uint64_t seed, const std::filesystem::path& out_dir);

struct CompareOutcome {
    ExperimentReport report;
    std::vector<std::string> missing;  // "<method>-seed<k>" cells without results
};

// Aggregates per-(method, seed) results under out_dir. With run_missing the
// absent cells are executed in-process first; otherwise they are reported in
// `missing` and no report is written.
CompareOutcome stage_compare(const ExperimentConfig& config,
                             const std::filesystem::path& teacher_path,
                             const std::filesystem::path& profile_path,
                             const std::filesystem::path& out_dir, bool run_missing);

SparsityTable stage_inspect(const ExperimentConfig& config,
                            const std::filesystem::path& checkpoint_path,
                            const std::vector<double>& thresholds);

double stage_evaluate(const ExperimentConfig& config,
                      const std::filesystem::path& checkpoint_path, const std::string& split,
                      EvalMetric metric);

std::string sparsity_text(const SparsityTable& table);

}  // namespace flexkd
