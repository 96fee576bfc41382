#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pointdg/dds.hpp"
#include "pointdg/msd.hpp"
#include "pointdg/pointcloud.hpp"
#include "pointdg/scfa.hpp"
#include "pointdg/ssm.hpp"
#include "pointdg/tokenizer.hpp"

namespace pointdg {

enum class MaskStrategy { Gumbel, Random5, SimilarityTop80, Off };
enum class AggregationMode { Scfa, Sum, ConcatProj, Off };
enum class ScanStrategy { Dds, IdsOnly, CdsOnly, Forward, Backward, Shuffle, Off };

MaskStrategy mask_strategy_from(const std::string& name);
AggregationMode aggregation_mode_from(const std::string& name);
ScanStrategy scan_strategy_from(const std::string& name);

struct StageConfig {
    int num_stages = 3;
    int blocks_per_stage = 1;
    int width = 192;
    int state_size = 16;
};

struct ModelConfig {
    StageConfig stages;
    int groups = 32;
    int neighbors = 16;
    SerializeStrategy serialization = SerializeStrategy::ZOrder;
    int num_classes = 5;

    MaskStrategy mask = MaskStrategy::Gumbel;
    AggregationMode aggregation = AggregationMode::Scfa;
    bool use_cdf = true;  // include the cross-domain feature block
    bool use_gp = true;   // include the global prompt block
    ScanStrategy scan = ScanStrategy::Dds;
    DdsMode dds_mode = DdsMode::TwoPass;
    int msd_position = 1;   // plugin inserted after this stage (1-based)
    int scfa_position = 1;  // SCFA+DDS position; must be >= msd_position
    int conv_kernel = 1;
    bool pool_f1_only = true;
    double lambda_mask = 0.0;

    // PointDGMamba scale presets: tiny = 3 stages/192 wide (the reference
    // model), base = 2 stages, small = width reduced to 128.
    static StageConfig scale_preset(const std::string& name);
    void validate() const;
    int assembled_blocks() const {
        return aggregation == AggregationMode::Off ? 1 : 1 + (use_cdf ? 1 : 0) + (use_gp ? 1 : 0);
    }
};

// Per-sample output of the shared trunk up to the mask point.
struct TrunkOut {
    Tensor f_pre;  // L x D after stages 1..msd_position
    std::vector<Point3> provenance;
};

struct MaskOut {
    Tensor m;          // undefined when masking is off
    double mean = 1.0;
};

struct TailOut {
    Tensor logits;  // C
    Tensor pooled;  // D, the feature fed to the head
};

// Scan orders for one batch, resolved once so shuffle stays batch-stable.
struct ScanOrders {
    std::vector<std::int64_t> first, second;
    bool single_pass = false;
    bool off = false;
};

class Network {
public:
    ModelConfig cfg;
    GroupEmbed embed;
    std::vector<SsmBlockParams> blocks;  // num_stages * blocks_per_stage
    Tensor mask_W;                       // D x 2
    ScfaParams scfa;
    SsmBlockParams dds1, dds2;
    Tensor head_w, head_b;  // D x C, C

    static Network init(const ModelConfig& cfg, Rng& rng);

    std::vector<std::pair<std::string, Tensor>> named_params() const;
    // Mutable handles to the same parameters in named_params order, so a
    // caller can temporarily rebind one (finite-difference probes).
    std::vector<Tensor*> param_slots();
    void load_from(const std::vector<std::pair<std::string, Tensor>>& saved);

    // ---- forward pieces (composed by the trainer) ----
    TrunkOut trunk(const std::vector<Point3>& points, std::int64_t fps_start) const;

    // similarity_ref: raw pre-mask features of the cross-domain partner
    // (only read by the similarity strategy).
    MaskOut make_mask(const Tensor& f_pre, bool train, double tau, Rng* rng,
                      const Tensor* similarity_ref) const;

    // Applies the mask and runs stages (msd_position, scfa_position].
    Tensor to_aggregation_point(const Tensor& f_pre, const MaskOut& mask) const;

    ScanOrders scan_orders_for_batch(Rng* rng) const;

    // SCFA + scanning + remaining stages + head. f2 is the partner sequence
    // (the sample's own f1 at inference).
    TailOut tail(const Tensor& f1, const Tensor& f2, const ScanOrders& orders) const;

    // Convenience single-sample inference path (self-pairing, noiseless mask).
    TailOut infer(const std::vector<Point3>& points, double tau) const;

private:
    Tensor run_stage(Tensor x, int stage_index) const;  // 1-based stage index
};

}  // namespace pointdg
