#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "pointdg/network.hpp"
#include "pointdg/optim.hpp"
#include "pointdg/pointcloud.hpp"
#include "pointdg/threadpool.hpp"

namespace pointdg {

struct TrainConfig {
    double lr_init = 1e-4;
    double lr_final = 1e-5;
    double weight_decay = 1e-4;
    int epochs = 40;  // desk-scale default; the reference schedule is 200
    int warmup_epochs = 5;
    int batch_slots = 16;  // clouds per source domain per step
    std::uint64_t seed = 42;
    std::string scale = "tiny";  // tiny | small | base

    std::string msd = "gumbel";        // gumbel | random | similarity | off
    std::string aggregation = "scfa";  // scfa | sum | concat | off
    std::string scan = "dds";          // dds | ids | cds | forward | backward | shuffle | off
    bool use_cdf = true;
    bool use_gp = true;
    int msd_position = 1;
    int scfa_position = 1;
    std::string dds_mode = "two-pass";  // two-pass | composed

    double tau_start = 5.0;
    double tau_end = 0.5;
    double lambda_mask = 0.0;

    double jitter_sigma = 0.01;
    double jitter_clip = 0.05;
    double pointmix_prob = 0.5;
    std::string source_splits = "train+test";  // train+test | train

    int groups = 32;
    int neighbors = 16;
    int state_size = 16;
    int blocks_per_stage = 1;
    int conv_kernel = 1;
    std::string serialization = "zorder";
    std::string pool = "f1";  // f1 | all

    int threads = 4;
    int eval_every = 1;

    void validate() const;
    ModelConfig model_config(int num_classes) const;
    TrainSchedule schedule() const { return {lr_init, lr_final, epochs, warmup_epochs}; }
    double tau_at(int epoch) const;
};

// key = value file; '#' starts a comment. Every TrainConfig field by name.
TrainConfig parse_config_file(const std::string& path, TrainConfig base = {});
void apply_config_override(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string config_echo_json(const TrainConfig& cfg);

// Eq.-style soft cross entropy over a batch: -sum_i y_i log softmax(logits)_i,
// averaged over rows; labels must lie on the simplex.
Tensor cross_entropy(const Tensor& logits, const Tensor& labels);

struct SourceData {
    std::vector<std::vector<PointCloud>> storage;  // normalized clouds per source domain
    std::vector<DomainPool> pools;
    int num_classes = 0;
};
SourceData build_source_data(const LoadResult& data, const std::vector<int>& source_domains,
                             const std::string& split_policy);

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double mean_mask = 1.0;
    double lr = 0.0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();  // target accuracy if evaluated
    // keep-rate histogram of mask values over [0,1], ten equal bins
    std::array<std::int64_t, 10> mask_hist{};
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<int> predictions;
    bool isolation_ok = true;  // no cross-sample feature reads during inference
    // optional export: one row per sample
    std::vector<std::string> sample_ids;
    std::vector<int> labels;
    std::vector<std::vector<double>> pooled_features;
};

// Harness-level accuracy computation usable with any classifier.
EvalResult evaluate_with(const std::function<int(const PointCloud&)>& predict,
                         const std::vector<const PointCloud*>& clouds, int num_classes);

class Trainer {
public:
    struct SampleRef {
        int cls = 0, slot = 0, pool = 0, cloud = 0;
    };

    // SCFA pairing over one batch: same class and slot from another domain
    // when one exists, then any same-class batch member, then self.
    static std::vector<std::int64_t> assign_partners(const std::vector<SampleRef>& refs,
                                                     const IndexPlan& plan, Rng& rng,
                                                     std::vector<std::string>* warnings);

    Trainer(const TrainConfig& cfg, int num_classes);

    void set_sources(SourceData sources);

    EpochMetrics run_epoch(int epoch);

    EvalResult evaluate(const std::vector<const PointCloud*>& clouds, double tau,
                        bool collect_features);

    Network& network() { return net_; }
    const Network& network() const { return net_; }
    std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    std::int64_t samples_per_epoch() const;

private:
    struct BatchStats {
        double loss_sum = 0.0, mask_sum = 0.0;
        std::int64_t count = 0;
        std::array<std::int64_t, 10> mask_hist{};
    };
    BatchStats run_batch(int epoch, std::int64_t batch_idx, const std::vector<SampleRef>& refs,
                         double lr, double tau);

    TrainConfig cfg_;
    Network net_;
    std::vector<std::pair<std::string, Tensor>> params_;
    AdamW opt_;
    SourceData sources_;
    IndexPlan plan_;
    Rng run_rng_;
    std::unique_ptr<ThreadPool> pool_;
    std::vector<std::string> warnings_;
};

}  // namespace pointdg
