// Command-line front end for the distillation pipeline. Stages communicate
// through on-disk artifacts: train-teacher -> score -> distill -> compare.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flexkd/config.hpp"
#include "flexkd/error.hpp"
#include "flexkd/experiment.hpp"

namespace fs = std::filesystem;
using namespace flexkd;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file")->required();
    cmd->add_option("--out", args.out_dir, "output directory");
}

int dispatch(const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flexkd - width-flexible feature distillation toolkit"};
    app.require_subcommand(1);

    CommonArgs train_args;
    std::optional<std::uint64_t> train_seed;
    CLI::App* cmd_train = app.add_subcommand("train-teacher", "fine-tune the teacher");
    add_common(cmd_train, train_args);
    cmd_train->add_option("--seed", train_seed, "override the teacher training seed");

    CommonArgs score_args;
    std::string score_teacher;
    std::optional<double> score_fraction;
    std::optional<std::uint64_t> score_seed;
    CLI::App* cmd_score = app.add_subcommand("score", "compute the importance profile");
    add_common(cmd_score, score_args);
    cmd_score->add_option("--teacher", score_teacher, "teacher checkpoint")->required();
    cmd_score->add_option("--calibration-fraction", score_fraction,
                          "fraction of the train split used for attribution");
    cmd_score->add_option("--seed", score_seed, "calibration subsampling seed");

    CommonArgs distill_args;
    std::string distill_teacher, distill_profile, distill_method;
    std::uint64_t distill_seed = 0;
    CLI::App* cmd_distill = app.add_subcommand("distill", "run one distillation method");
    add_common(cmd_distill, distill_args);
    cmd_distill->add_option("--teacher", distill_teacher, "teacher checkpoint")->required();
    cmd_distill->add_option("--profile", distill_profile, "importance profile")->required();
    cmd_distill->add_option("--method", distill_method, "method tag")->required();
    cmd_distill->add_option("--seed", distill_seed, "student init / run seed")->required();

    CommonArgs eval_args;
    std::string eval_checkpoint, eval_split = "test", eval_metric = "accuracy";
    CLI::App* cmd_eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    add_common(cmd_eval, eval_args);
    cmd_eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint")->required();
    cmd_eval->add_option("--split", eval_split, "train|val|test");
    cmd_eval->add_option("--metric", eval_metric, "accuracy|nll");

    CommonArgs compare_args;
    std::string compare_teacher, compare_profile;
    bool run_missing = false;
    CLI::App* cmd_compare = app.add_subcommand("compare", "aggregate runs into a report");
    add_common(cmd_compare, compare_args);
    cmd_compare->add_option("--teacher", compare_teacher, "teacher checkpoint")->required();
    cmd_compare->add_option("--profile", compare_profile, "importance profile")->required();
    cmd_compare->add_flag("--run-missing", run_missing,
                          "execute missing (method, seed) runs before aggregating");

    CommonArgs inspect_args;
    std::string inspect_checkpoint;
    std::vector<double> inspect_thresholds = {0.5, 1.0, 2.0};
    CLI::App* cmd_inspect = app.add_subcommand("inspect", "activation sparsity table");
    add_common(cmd_inspect, inspect_args);
    cmd_inspect->add_option("--checkpoint", inspect_checkpoint, "model checkpoint")->required();
    cmd_inspect->add_option("--thresholds", inspect_thresholds, "magnitude thresholds");

    CLI11_PARSE(app, argc, argv);

    if (cmd_train->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(train_args.config_path);
            const fs::path ckpt =
                stage_train_teacher(config, train_seed, train_args.out_dir);
            std::cout << "teacher checkpoint: " << ckpt.string() << "\n";
            return 0;
        });
    }
    if (cmd_score->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(score_args.config_path);
            const fs::path profile = stage_score(config, score_teacher, score_fraction,
                                                 score_seed, score_args.out_dir);
            std::cout << "importance profile: " << profile.string() << "\n";
            return 0;
        });
    }
    if (cmd_distill->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(distill_args.config_path);
            const RunOutcome run = stage_distill(config, distill_teacher, distill_profile,
                                                 distill_method, distill_seed,
                                                 distill_args.out_dir);
            std::cout << "run dir: " << run.run_dir.string() << "\n"
                      << "test accuracy: " << 100.0 * run.metrics.accuracy << "%\n";
            return 0;
        });
    }
    if (cmd_eval->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(eval_args.config_path);
            const EvalMetric metric =
                eval_metric == "nll" ? EvalMetric::nll : EvalMetric::accuracy;
            if (eval_metric != "nll" && eval_metric != "accuracy") {
                throw ConfigError("unknown metric '" + eval_metric + "'");
            }
            const double value =
                stage_evaluate(config, eval_checkpoint, eval_split, metric);
            std::cout << eval_metric << ": " << value << "\n";
            return 0;
        });
    }
    if (cmd_compare->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(compare_args.config_path);
            const CompareOutcome outcome = stage_compare(
                config, compare_teacher, compare_profile, compare_args.out_dir, run_missing);
            if (!outcome.missing.empty()) {
                std::cerr << "missing runs:\n";
                for (const std::string& cell : outcome.missing) {
                    std::cerr << "  " << cell << "\n";
                }
                std::cerr << "re-run with --run-missing or distill the cells first\n";
                return 2;
            }
            std::cout << report_markdown(outcome.report) << "\n";
            std::cout << "report: " << (fs::path(compare_args.out_dir) / "report.json").string()
                      << "\n";
            return 0;
        });
    }
    if (cmd_inspect->parsed()) {
        return dispatch([&]() {
            const ExperimentConfig config = load_config_file(inspect_args.config_path);
            const SparsityTable table =
                stage_inspect(config, inspect_checkpoint, inspect_thresholds);
            nlohmann::json j;
            j["thresholds"] = table.thresholds;
            j["percent_below"] = table.percent;
            std::error_code ec;
            fs::create_directories(inspect_args.out_dir, ec);
            std::ofstream out(fs::path(inspect_args.out_dir) / "sparsity.json");
            out << j.dump(2) << "\n";
            std::cout << sparsity_text(table);
            return 0;
        });
    }
    return 1;
}
