#include "pointdg/network.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace pointdg {

MaskStrategy mask_strategy_from(const std::string& name) {
    if (name == "gumbel") return MaskStrategy::Gumbel;
    if (name == "random") return MaskStrategy::Random5;
    if (name == "similarity") return MaskStrategy::SimilarityTop80;
    if (name == "off") return MaskStrategy::Off;
    throw std::invalid_argument("unknown mask strategy '" + name + "'");
}

AggregationMode aggregation_mode_from(const std::string& name) {
    if (name == "scfa") return AggregationMode::Scfa;
    if (name == "sum") return AggregationMode::Sum;
    if (name == "concat") return AggregationMode::ConcatProj;
    if (name == "off") return AggregationMode::Off;
    throw std::invalid_argument("unknown aggregation mode '" + name + "'");
}

ScanStrategy scan_strategy_from(const std::string& name) {
    if (name == "dds") return ScanStrategy::Dds;
    if (name == "ids") return ScanStrategy::IdsOnly;
    if (name == "cds") return ScanStrategy::CdsOnly;
    if (name == "forward") return ScanStrategy::Forward;
    if (name == "backward") return ScanStrategy::Backward;
    if (name == "shuffle") return ScanStrategy::Shuffle;
    if (name == "off") return ScanStrategy::Off;
    throw std::invalid_argument("unknown scan strategy '" + name + "'");
}

StageConfig ModelConfig::scale_preset(const std::string& name) {
    StageConfig s;
    if (name == "tiny") {
        s.num_stages = 3;
        s.width = 192;
    } else if (name == "base") {
        s.num_stages = 2;
        s.width = 192;
    } else if (name == "small") {
        s.num_stages = 3;
        s.width = 128;
    } else {
        throw std::invalid_argument("unknown model scale '" + name + "'");
    }
    return s;
}

void ModelConfig::validate() const {
    if (stages.num_stages < 2)
        throw std::invalid_argument("config error: num_stages must be >= 2 (a first stage must "
                                    "exist for module insertion)");
    if (stages.width % 2 != 0) throw std::invalid_argument("config error: width must be even");
    if (stages.blocks_per_stage < 1 || stages.state_size < 1 || groups < 1 || neighbors < 1)
        throw std::invalid_argument("config error: sizes must be positive");
    const bool has_msd = mask != MaskStrategy::Off;
    const bool has_scfa = aggregation != AggregationMode::Off;
    auto check_pos = [&](int pos, const char* what) {
        if (pos < 1 || pos > stages.num_stages)
            throw std::invalid_argument(std::string("config error: ") + what + " position " +
                                        std::to_string(pos) + " outside [1," +
                                        std::to_string(stages.num_stages) + "]");
    };
    if (has_msd) check_pos(msd_position, "MSD");
    if (has_scfa) check_pos(scfa_position, "SCFA");
    if (has_msd && has_scfa && msd_position > scfa_position)
        throw std::invalid_argument("config error: MSD position must not exceed SCFA position");
    if (scan != ScanStrategy::Off && !has_scfa)
        throw std::invalid_argument(
            "config error: scanning operates on aggregated features and needs SCFA "
            "(aggregation must not be off)");
    if (conv_kernel % 2 == 0)
        throw std::invalid_argument("config error: conv kernel must be odd");
    if (num_classes < 2) throw std::invalid_argument("config error: need at least 2 classes");
}

Network Network::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Network net;
    net.cfg = cfg;
    const int D = cfg.stages.width;
    net.embed = GroupEmbed::init(D, rng);
    const int nblocks = cfg.stages.num_stages * cfg.stages.blocks_per_stage;
    for (int i = 0; i < nblocks; ++i)
        net.blocks.push_back(SsmBlockParams::init(D, cfg.stages.state_size, rng));
    net.mask_W = Tensor::randn({D, 2}, rng, 1.0 / std::sqrt(static_cast<double>(D)))
                     .set_requires_grad(true);
    net.scfa = ScfaParams::init(D, cfg.groups, cfg.conv_kernel, rng);
    net.dds1 = SsmBlockParams::init(D, cfg.stages.state_size, rng);
    net.dds2 = SsmBlockParams::init(D, cfg.stages.state_size, rng);
    net.head_w = Tensor::randn({D, cfg.num_classes}, rng, 1.0 / std::sqrt(static_cast<double>(D)))
                     .set_requires_grad(true);
    net.head_b = Tensor::zeros({cfg.num_classes}).set_requires_grad(true);
    return net;
}

std::vector<std::pair<std::string, Tensor>> Network::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    embed.params(out, "embed");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const int stage = static_cast<int>(i) / cfg.stages.blocks_per_stage;
        const int blk = static_cast<int>(i) % cfg.stages.blocks_per_stage;
        blocks[i].params(out, "ssm.stage" + std::to_string(stage) + ".block" + std::to_string(blk));
    }
    out.emplace_back("msd.W_mask", mask_W);
    scfa.params(out, "scfa");
    dds1.params(out, "dds.pass1");
    dds2.params(out, "dds.pass2");
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

std::vector<Tensor*> Network::param_slots() {
    std::vector<Tensor*> out;
    auto block_slots = [&](SsmBlockParams& b) {
        out.push_back(&b.A_log);
        out.push_back(&b.W_B);
        out.push_back(&b.W_C);
        out.push_back(&b.w_delta);
        out.push_back(&b.b_delta);
        out.push_back(&b.in_proj);
        out.push_back(&b.out_proj);
        out.push_back(&b.skip);
        out.push_back(&b.ln_gamma);
        out.push_back(&b.ln_beta);
    };
    out.push_back(&embed.w1);
    out.push_back(&embed.b1);
    out.push_back(&embed.w2);
    out.push_back(&embed.b2);
    for (auto& b : blocks) block_slots(b);
    out.push_back(&mask_W);
    out.push_back(&scfa.mlp1_w1);
    out.push_back(&scfa.mlp1_b1);
    out.push_back(&scfa.mlp1_w2);
    out.push_back(&scfa.mlp1_b2);
    out.push_back(&scfa.mlp2_w1);
    out.push_back(&scfa.mlp2_b1);
    out.push_back(&scfa.mlp2_w2);
    out.push_back(&scfa.mlp2_b2);
    out.push_back(&scfa.conv_w);
    out.push_back(&scfa.conv_b);
    out.push_back(&scfa.concat_proj_w);
    out.push_back(&scfa.concat_proj_b);
    out.push_back(&scfa.global_prompt);
    block_slots(dds1);
    block_slots(dds2);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

void Network::load_from(const std::vector<std::pair<std::string, Tensor>>& saved) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : saved) by_name[name] = &t;
    for (auto& [name, t] : named_params()) {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
        if (it->second->shape() != t.shape())
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                                     shape_str(it->second->shape()) + ", expected " +
                                     shape_str(t.shape()));
        t.impl()->data = it->second->impl()->data;
    }
}

Tensor Network::run_stage(Tensor x, int stage_index) const {
    const auto order = identity_order(x.dim(0));
    for (int b = 0; b < cfg.stages.blocks_per_stage; ++b)
        x = mamba_block_forward(
            x, blocks[static_cast<std::size_t>((stage_index - 1) * cfg.stages.blocks_per_stage + b)],
            order);
    return x;
}

TrunkOut Network::trunk(const std::vector<Point3>& points, std::int64_t fps_start) const {
    TokenizerConfig tk;
    tk.groups = cfg.groups;
    tk.neighbors = cfg.neighbors;
    tk.strategy = cfg.serialization;
    TokenSequence seq = tokenize(points, tk, embed, fps_start);
    TrunkOut out;
    out.provenance = seq.provenance;
    Tensor x = seq.features;
    const int stop = cfg.mask != MaskStrategy::Off ? cfg.msd_position
                     : cfg.aggregation != AggregationMode::Off ? cfg.scfa_position
                                                               : cfg.stages.num_stages;
    for (int s = 1; s <= stop; ++s) x = run_stage(x, s);
    out.f_pre = x;
    return out;
}

MaskOut Network::make_mask(const Tensor& f_pre, bool train, double tau, Rng* rng,
                           const Tensor* similarity_ref) const {
    MaskOut out;
    switch (cfg.mask) {
        case MaskStrategy::Off:
            return out;
        case MaskStrategy::Gumbel: {
            Tensor p = predict_mask_probs(f_pre, mask_W);
            MaskVector mv = gumbel_softmax_mask(p, tau, train ? rng : nullptr);
            out.m = mv.m;
            break;
        }
        case MaskStrategy::Random5: {
            if (train && rng)
                out.m = baseline_mask_random5(f_pre.dim(0), *rng);
            else  // deterministic inference keeps every token
                out.m = Tensor::full({f_pre.dim(0)}, 1.0);
            break;
        }
        case MaskStrategy::SimilarityTop80: {
            const Tensor& ref = similarity_ref ? *similarity_ref : f_pre;
            out.m = baseline_mask_similarity_top80(f_pre, ref);
            break;
        }
    }
    double s = 0.0;
    for (std::int64_t i = 0; i < out.m.numel(); ++i) s += out.m.data()[i];
    out.mean = s / static_cast<double>(out.m.numel());
    return out;
}

Tensor Network::to_aggregation_point(const Tensor& f_pre, const MaskOut& mask) const {
    Tensor x = f_pre;
    if (cfg.mask != MaskStrategy::Off) {
        x = apply_mask(x, mask.m);
        const int from = cfg.msd_position + 1;
        const int to = cfg.aggregation != AggregationMode::Off ? cfg.scfa_position
                                                               : cfg.stages.num_stages;
        for (int s = from; s <= to; ++s) x = run_stage(x, s);
    }
    return x;
}

ScanOrders Network::scan_orders_for_batch(Rng* rng) const {
    ScanOrders o;
    if (cfg.scan == ScanStrategy::Off || cfg.aggregation == AggregationMode::Off) {
        o.off = true;
        return o;
    }
    const std::int64_t L = cfg.groups;
    const int nb = cfg.assembled_blocks();
    const std::int64_t total = L * nb;
    switch (cfg.scan) {
        case ScanStrategy::Dds:
            if (cfg.dds_mode == DdsMode::Composed) {
                o.first = cds_order(L, nb);
                o.single_pass = true;
            } else {
                o.first = ids_order(L, nb);
                o.second = cds_order(L, nb);
            }
            break;
        case ScanStrategy::IdsOnly:
            o.first = ids_order(L, nb);
            o.second = ids_order(L, nb);
            break;
        case ScanStrategy::CdsOnly:
            o.first = cds_order(L, nb);
            o.second = cds_order(L, nb);
            break;
        case ScanStrategy::Forward:
            o.first = baseline_order(BaselineScan::Forward, total, nullptr);
            o.second = o.first;
            break;
        case ScanStrategy::Backward:
            o.first = baseline_order(BaselineScan::Backward, total, nullptr);
            o.second = o.first;
            break;
        case ScanStrategy::Shuffle:
            if (rng) {
                o.first = baseline_order(BaselineScan::Shuffle, total, rng);
                o.second = baseline_order(BaselineScan::Shuffle, total, rng);
            } else {  // deterministic inference: no fresh shuffles to draw
                o.first = baseline_order(BaselineScan::Forward, total, nullptr);
                o.second = o.first;
            }
            break;
        case ScanStrategy::Off:
            break;
    }
    return o;
}

TailOut Network::tail(const Tensor& f1, const Tensor& f2, const ScanOrders& orders) const {
    const std::int64_t L = f1.dim(0);
    Tensor F = f1;
    if (cfg.aggregation != AggregationMode::Off) {
        std::vector<Tensor> blocks_v = {f1};
        if (cfg.use_cdf) {
            Tensor fprime;
            switch (cfg.aggregation) {
                case AggregationMode::Scfa: fprime = scfa_aggregate(scfa, f1, f2); break;
                case AggregationMode::Sum: fprime = aggregate_sum(f1, f2); break;
                case AggregationMode::ConcatProj:
                    fprime = aggregate_concat_proj(scfa, f1, f2);
                    break;
                default: break;
            }
            blocks_v.push_back(fprime);
        }
        if (cfg.use_gp) blocks_v.push_back(scfa.global_prompt);
        F = assemble_sequence(blocks_v);
    }
    if (!orders.off) {
        F = mamba_block_forward(F, dds1, orders.first);
        if (!orders.single_pass) F = mamba_block_forward(F, dds2, orders.second);
    }
    const int resume = cfg.aggregation != AggregationMode::Off ? cfg.scfa_position
                                                               : cfg.stages.num_stages;
    for (int s = resume + 1; s <= cfg.stages.num_stages; ++s) F = run_stage(F, s);
    Tensor pooled = cfg.pool_f1_only && cfg.aggregation != AggregationMode::Off
                        ? mean(slice(F, 0, 0, L), 0)
                        : mean(F, 0);
    TailOut out;
    out.pooled = pooled;
    out.logits = add(matmul(pooled.reshape({1, cfg.stages.width}), head_w).reshape(
                         {cfg.num_classes}),
                     head_b);
    return out;
}

TailOut Network::infer(const std::vector<Point3>& points, double tau) const {
    NoGradGuard ng;
    TrunkOut t = trunk(points, 0);
    MaskOut m = make_mask(t.f_pre, false, tau, nullptr, nullptr);
    Tensor f1 = to_aggregation_point(t.f_pre, m);
    ScanOrders orders = scan_orders_for_batch(nullptr);
    return tail(f1, f1, orders);
}

}  // namespace pointdg
