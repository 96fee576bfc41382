#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "pointdg/trainer.hpp"

namespace pointdg {

struct TargetRunResult {
    std::string target;
    int target_domain = -1;
    std::vector<EpochMetrics> epochs;
    double final_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    bool isolation_ok = true;
    std::vector<std::string> warnings;
};

struct LooResult {
    std::vector<TargetRunResult> runs;
    double average_accuracy = 0.0;
    std::string dataset_hash;
    double wall_seconds = 0.0;
};

// Train on every domain except `target_domain`, evaluating the target test
// split each eval interval. When `out_net` is given the trained network is
// handed back for checkpointing; `features` collects the final pooled
// features of the target test split.
TargetRunResult run_single_target(const LoadResult& data, const TrainConfig& cfg,
                                  int target_domain, std::ostream* log,
                                  std::unique_ptr<Trainer>* out_trainer, EvalResult* final_eval);

// The leave-one-out protocol over every domain. Writes metrics.csv,
// result.json, features_<target>.csv and checkpoint_<target>.pdgm into
// out_dir (unless out_dir is empty).
LooResult run_leave_one_out(const LoadResult& data, const std::string& dataset_root,
                            const TrainConfig& cfg, const std::string& out_dir,
                            std::ostream* log);

struct AblationEntry {
    std::string name;
    std::function<void(TrainConfig&)> modify;
};

std::vector<AblationEntry> ablation_preset(const std::string& name, const TrainConfig& base);

struct AblationRowResult {
    std::string name;
    std::vector<double> per_target;
    double average = 0.0;
};

// Runs each row as a full leave-one-out experiment with the shared seed.
// Every row is validated before any training starts.
std::vector<AblationRowResult> run_ablation_matrix(const LoadResult& data,
                                                   const std::string& dataset_root,
                                                   const TrainConfig& base,
                                                   const std::vector<AblationEntry>& rows,
                                                   const std::string& out_dir, std::ostream* log);

// Plain-text rendering of an ablation table (also written as CSV).
std::string render_ablation_table(const std::vector<AblationRowResult>& rows,
                                  const std::vector<std::string>& domain_names);

std::string format_double(double v);

}  // namespace pointdg
