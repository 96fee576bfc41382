#include "pointdg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

namespace pointdg {

void TrainConfig::validate() const {
    if (!(lr_final < lr_init))
        throw std::invalid_argument("config error: lr_final must be below lr_init");
    if (epochs < 1 || warmup_epochs < 0 || warmup_epochs >= epochs)
        throw std::invalid_argument("config error: need 0 <= warmup_epochs < epochs");
    if (batch_slots < 1) throw std::invalid_argument("config error: batch_slots must be >= 1");
    if (threads < 1) throw std::invalid_argument("config error: threads must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("config error: eval_every must be >= 1");
    if (source_splits != "train+test" && source_splits != "train")
        throw std::invalid_argument("config error: source_splits must be 'train+test' or 'train'");
    if (pool != "f1" && pool != "all")
        throw std::invalid_argument("config error: pool must be 'f1' or 'all'");
    if (tau_start <= 0.0 || tau_end <= 0.0)
        throw std::invalid_argument("config error: temperatures must be positive");
    if (pointmix_prob < 0.0 || pointmix_prob > 1.0)
        throw std::invalid_argument("config error: pointmix_prob outside [0,1]");
    if (jitter_sigma < 0.0) throw std::invalid_argument("config error: jitter_sigma < 0");
    model_config(5).validate();  // structural checks with a nominal class count
}

ModelConfig TrainConfig::model_config(int num_classes) const {
    ModelConfig m;
    m.stages = ModelConfig::scale_preset(scale);
    m.stages.state_size = state_size;
    m.stages.blocks_per_stage = blocks_per_stage;
    m.groups = groups;
    m.neighbors = neighbors;
    m.serialization = serialize_strategy_from(serialization);
    m.num_classes = num_classes;
    m.mask = mask_strategy_from(msd);
    m.aggregation = aggregation_mode_from(aggregation);
    m.use_cdf = use_cdf;
    m.use_gp = use_gp;
    m.scan = scan_strategy_from(scan);
    m.dds_mode = dds_mode == "composed" ? DdsMode::Composed : DdsMode::TwoPass;
    m.msd_position = msd_position;
    m.scfa_position = scfa_position;
    m.conv_kernel = conv_kernel;
    m.pool_f1_only = pool == "f1";
    m.lambda_mask = lambda_mask;
    return m;
}

double TrainConfig::tau_at(int epoch) const {
    // linear anneal over the first half of training, then hold
    const int half = std::max(1, epochs / 2);
    const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(half));
    return tau_start + (tau_end - tau_start) * t;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config error: bad boolean '" + v + "'");
}

}  // namespace

void apply_config_override(TrainConfig& c, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "lr_init") c.lr_init = std::stod(v);
    else if (key == "lr_final") c.lr_final = std::stod(v);
    else if (key == "weight_decay") c.weight_decay = std::stod(v);
    else if (key == "epochs") c.epochs = std::stoi(v);
    else if (key == "warmup_epochs") c.warmup_epochs = std::stoi(v);
    else if (key == "batch_slots") c.batch_slots = std::stoi(v);
    else if (key == "seed") c.seed = std::stoull(v);
    else if (key == "scale") c.scale = v;
    else if (key == "msd") c.msd = v;
    else if (key == "aggregation") c.aggregation = v;
    else if (key == "scan") c.scan = v;
    else if (key == "use_cdf") c.use_cdf = parse_bool(v);
    else if (key == "use_gp") c.use_gp = parse_bool(v);
    else if (key == "msd_position") c.msd_position = std::stoi(v);
    else if (key == "scfa_position") c.scfa_position = std::stoi(v);
    else if (key == "dds_mode") c.dds_mode = v;
    else if (key == "tau_start") c.tau_start = std::stod(v);
    else if (key == "tau_end") c.tau_end = std::stod(v);
    else if (key == "lambda_mask") c.lambda_mask = std::stod(v);
    else if (key == "jitter_sigma") c.jitter_sigma = std::stod(v);
    else if (key == "jitter_clip") c.jitter_clip = std::stod(v);
    else if (key == "pointmix_prob") c.pointmix_prob = std::stod(v);
    else if (key == "source_splits") c.source_splits = v;
    else if (key == "groups") c.groups = std::stoi(v);
    else if (key == "neighbors") c.neighbors = std::stoi(v);
    else if (key == "state_size") c.state_size = std::stoi(v);
    else if (key == "blocks_per_stage") c.blocks_per_stage = std::stoi(v);
    else if (key == "conv_kernel") c.conv_kernel = std::stoi(v);
    else if (key == "serialization") c.serialization = v;
    else if (key == "pool") c.pool = v;
    else if (key == "threads") c.threads = std::stoi(v);
    else if (key == "eval_every") c.eval_every = std::stoi(v);
    else throw std::invalid_argument("config error: unknown key '" + key + "'");
}

TrainConfig parse_config_file(const std::string& path, TrainConfig base) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config error: cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config error: " + path + ":" + std::to_string(lineno) +
                                        ": expected 'key = value'");
        apply_config_override(base, trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return base;
}

std::string config_echo_json(const TrainConfig& c) {
    nlohmann::json j;
    j["lr_init"] = c.lr_init;
    j["lr_final"] = c.lr_final;
    j["weight_decay"] = c.weight_decay;
    j["epochs"] = c.epochs;
    j["warmup_epochs"] = c.warmup_epochs;
    j["batch_slots"] = c.batch_slots;
    j["seed"] = c.seed;
    j["scale"] = c.scale;
    j["msd"] = c.msd;
    j["aggregation"] = c.aggregation;
    j["scan"] = c.scan;
    j["use_cdf"] = c.use_cdf;
    j["use_gp"] = c.use_gp;
    j["msd_position"] = c.msd_position;
    j["scfa_position"] = c.scfa_position;
    j["dds_mode"] = c.dds_mode;
    j["tau_start"] = c.tau_start;
    j["tau_end"] = c.tau_end;
    j["lambda_mask"] = c.lambda_mask;
    j["jitter_sigma"] = c.jitter_sigma;
    j["jitter_clip"] = c.jitter_clip;
    j["pointmix_prob"] = c.pointmix_prob;
    j["source_splits"] = c.source_splits;
    j["groups"] = c.groups;
    j["neighbors"] = c.neighbors;
    j["state_size"] = c.state_size;
    j["blocks_per_stage"] = c.blocks_per_stage;
    j["conv_kernel"] = c.conv_kernel;
    j["serialization"] = c.serialization;
    j["pool"] = c.pool;
    j["threads"] = c.threads;
    j["eval_every"] = c.eval_every;
    return j.dump(2);
}

Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
    if (logits.rank() != 2 || labels.rank() != 2 || logits.shape() != labels.shape())
        throw std::invalid_argument("cross_entropy: logits and labels must both be (batch,C)");
    const std::int64_t B = labels.dim(0), C = labels.dim(1);
    for (std::int64_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            const double y = labels.data()[b * C + c];
            if (y < -1e-6)
                throw std::invalid_argument("cross_entropy: negative label entry");
            s += y;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("cross_entropy: label row " + std::to_string(b) +
                                        " sums to " + std::to_string(s) + ", not 1");
    }
    Tensor p = clamp(softmax(logits, 1), 1e-12, 1.0);
    Tensor per_entry = mul(log(p), labels);
    return scale(sum_all(per_entry), -1.0 / static_cast<double>(B));
}

SourceData build_source_data(const LoadResult& data, const std::vector<int>& source_domains,
                             const std::string& split_policy) {
    SourceData out;
    out.num_classes = static_cast<int>(data.manifest.classes.size());
    const bool include_test = split_policy == "train+test";
    for (int d : source_domains) {
        std::vector<PointCloud> clouds;
        for (const auto& ds : data.datasets) {
            if (ds.domain_id != d) continue;
            if (ds.split == "test" && !include_test) continue;
            for (const auto& c : ds.clouds)
                clouds.push_back(normalize_and_jitter(c, false, 0.0, nullptr));
        }
        out.storage.push_back(std::move(clouds));
    }
    for (std::size_t i = 0; i < out.storage.size(); ++i) {
        DomainPool pool;
        pool.domain_id = source_domains[i];
        pool.domain_name = data.manifest.domains[static_cast<std::size_t>(source_domains[i])];
        for (const auto& c : out.storage[i]) pool.clouds.push_back(&c);
        out.pools.push_back(std::move(pool));
    }
    return out;
}

EvalResult evaluate_with(const std::function<int(const PointCloud&)>& predict,
                         const std::vector<const PointCloud*>& clouds, int num_classes) {
    if (clouds.empty()) throw std::runtime_error("protocol error: empty test set");
    EvalResult r;
    std::vector<std::int64_t> correct(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> total(static_cast<std::size_t>(num_classes), 0);
    std::int64_t hits = 0;
    for (const auto* c : clouds) {
        const int pred = predict(*c);
        r.predictions.push_back(pred);
        ++total[static_cast<std::size_t>(c->class_id)];
        if (pred == c->class_id) {
            ++hits;
            ++correct[static_cast<std::size_t>(c->class_id)];
        }
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(clouds.size());
    for (int c = 0; c < num_classes; ++c)
        r.per_class_accuracy.push_back(
            total[static_cast<std::size_t>(c)] == 0
                ? std::numeric_limits<double>::quiet_NaN()
                : static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                      static_cast<double>(total[static_cast<std::size_t>(c)]));
    return r;
}

std::vector<std::int64_t> Trainer::assign_partners(const std::vector<SampleRef>& refs,
                                                   const IndexPlan& plan, Rng& rng,
                                                   std::vector<std::string>* warnings) {
    const std::int64_t B = static_cast<std::int64_t>(refs.size());
    std::vector<std::int64_t> partner(static_cast<std::size_t>(B));
    std::map<std::tuple<int, int, int>, std::int64_t> where;  // (class, slot, pool) -> index
    for (std::int64_t i = 0; i < B; ++i)
        where[{refs[static_cast<std::size_t>(i)].cls, refs[static_cast<std::size_t>(i)].slot,
               refs[static_cast<std::size_t>(i)].pool}] = i;
    for (std::int64_t i = 0; i < B; ++i) {
        const auto& r = refs[static_cast<std::size_t>(i)];
        std::vector<std::int64_t> candidates;
        for (int p : plan.participating[static_cast<std::size_t>(r.cls)]) {
            if (p == r.pool) continue;
            const auto it = where.find({r.cls, r.slot, p});
            if (it != where.end()) candidates.push_back(it->second);
        }
        if (candidates.empty()) {
            // same-domain fallback: any other same-class sample in the batch
            for (std::int64_t j = 0; j < B; ++j)
                if (j != i && refs[static_cast<std::size_t>(j)].cls == r.cls)
                    candidates.push_back(j);
        }
        if (candidates.empty()) {
            partner[static_cast<std::size_t>(i)] = i;  // self; single-domain class
            if (warnings &&
                (warnings->empty() || warnings->back().find("self-pairing") == std::string::npos))
                warnings->push_back("class " + std::to_string(r.cls) +
                                    " has one source domain; SCFA fell back to self-pairing");
        } else {
            partner[static_cast<std::size_t>(i)] =
                candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
        }
    }
    return partner;
}

Trainer::Trainer(const TrainConfig& cfg, int num_classes) : cfg_(cfg) {
    cfg_.validate();
    Rng init_rng = Rng(cfg.seed).fork(0x1017);
    net_ = Network::init(cfg.model_config(num_classes), init_rng);
    params_ = net_.named_params();
    opt_.init(params_);
    run_rng_ = Rng(cfg.seed).fork(0x77a1);
    pool_ = std::make_unique<ThreadPool>(cfg.threads);
}

void Trainer::set_sources(SourceData sources) {
    sources_ = std::move(sources);
    plan_ = balanced_resample(sources_.pools, sources_.num_classes, cfg_.seed);
    for (const auto& w : plan_.warnings) warnings_.push_back(w);
}

std::int64_t Trainer::samples_per_epoch() const {
    std::int64_t n = 0;
    for (int c = 0; c < plan_.num_classes; ++c)
        n += static_cast<std::int64_t>(plan_.max_count[static_cast<std::size_t>(c)]) *
             static_cast<std::int64_t>(plan_.participating[static_cast<std::size_t>(c)].size());
    return n;
}

EpochMetrics Trainer::run_epoch(int epoch) {
    if (sources_.pools.empty()) throw std::logic_error("Trainer: sources not set");
    const double lr = lr_at(epoch, cfg_.schedule());
    const double tau = cfg_.tau_at(epoch);

    std::vector<std::pair<int, int>> slots;  // (class, k)
    for (int c = 0; c < plan_.num_classes; ++c)
        for (int k = 0; k < plan_.max_count[static_cast<std::size_t>(c)]; ++k)
            slots.emplace_back(c, k);
    Rng shuffle_rng = run_rng_.fork(0xe70c, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(slots.data(), slots.size());

    BatchStats totals;
    std::int64_t batch_idx = 0;
    for (std::size_t off = 0; off < slots.size(); off += static_cast<std::size_t>(cfg_.batch_slots)) {
        const std::size_t hi = std::min(slots.size(), off + static_cast<std::size_t>(cfg_.batch_slots));
        std::vector<SampleRef> refs;
        for (std::size_t s = off; s < hi; ++s) {
            const auto [c, k] = slots[s];
            for (int p : plan_.participating[static_cast<std::size_t>(c)]) {
                SampleRef r;
                r.cls = c;
                r.slot = k;
                r.pool = p;
                r.cloud = plan_.plan[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)]
                                    [static_cast<std::size_t>(k)];
                refs.push_back(r);
            }
        }
        const BatchStats bs = run_batch(epoch, batch_idx, refs, lr, tau);
        totals.loss_sum += bs.loss_sum;
        totals.mask_sum += bs.mask_sum;
        totals.count += bs.count;
        for (std::size_t b = 0; b < totals.mask_hist.size(); ++b)
            totals.mask_hist[b] += bs.mask_hist[b];
        ++batch_idx;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.loss = totals.loss_sum / static_cast<double>(totals.count);
    m.mean_mask = totals.mask_sum / static_cast<double>(totals.count);
    m.mask_hist = totals.mask_hist;
    return m;
}

Trainer::BatchStats Trainer::run_batch(int epoch, std::int64_t batch_idx,
                                       const std::vector<SampleRef>& refs, double lr, double tau) {
    const std::int64_t B = static_cast<std::int64_t>(refs.size());
    const int C = sources_.num_classes;
    Rng batch_rng = run_rng_.fork(0xba7c, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(batch_idx));

    // ---- main-thread randomness, drawn in deterministic index order ----
    std::vector<Rng> sample_rng;
    sample_rng.reserve(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i)
        sample_rng.push_back(run_rng_.fork(0x5a8f, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(batch_idx) * 1000003ull +
                                               static_cast<std::uint64_t>(i)));

    const std::vector<std::int64_t> partner =
        assign_partners(refs, plan_, batch_rng, &warnings_);

    const bool mix_on = batch_rng.uniform() < cfg_.pointmix_prob;
    std::vector<std::int64_t> mix_partner(static_cast<std::size_t>(B), -1);
    std::vector<double> mix_lambda(static_cast<std::size_t>(B), 1.0);
    if (mix_on && B > 1) {
        for (std::int64_t i = 0; i < B; ++i) {
            std::int64_t j = static_cast<std::int64_t>(batch_rng.below(static_cast<std::uint64_t>(B)));
            if (j == i) j = (i + 1) % B;
            mix_partner[static_cast<std::size_t>(i)] = j;
            mix_lambda[static_cast<std::size_t>(i)] = batch_rng.uniform();  // Beta(1,1)
        }
    }

    // ---- phase A: augmentation (jitter, then mixing against jittered copies)
    std::vector<PointCloud> clouds(static_cast<std::size_t>(B));
    std::vector<std::vector<double>> labels(static_cast<std::size_t>(B));
    pool_->parallel_for(0, B, [&](std::int64_t i) {
        const auto& r = refs[static_cast<std::size_t>(i)];
        const PointCloud* src =
            sources_.pools[static_cast<std::size_t>(r.pool)].clouds[static_cast<std::size_t>(r.cloud)];
        // pools hold normalized clouds; re-normalizing centers the jitter
        clouds[static_cast<std::size_t>(i)] = normalize_and_jitter(
            *src, true, cfg_.jitter_sigma, &sample_rng[static_cast<std::size_t>(i)],
            cfg_.jitter_clip);
        std::vector<double> y(static_cast<std::size_t>(C), 0.0);
        y[static_cast<std::size_t>(r.cls)] = 1.0;
        labels[static_cast<std::size_t>(i)] = std::move(y);
    });
    if (mix_on && B > 1) {
        std::vector<PointCloud> premix = clouds;
        std::vector<std::vector<double>> prelab = labels;
        pool_->parallel_for(0, B, [&](std::int64_t i) {
            const std::int64_t j = mix_partner[static_cast<std::size_t>(i)];
            MixResult mr = pointmix(premix[static_cast<std::size_t>(i)],
                                    premix[static_cast<std::size_t>(j)],
                                    mix_lambda[static_cast<std::size_t>(i)],
                                    prelab[static_cast<std::size_t>(i)],
                                    prelab[static_cast<std::size_t>(j)]);
            clouds[static_cast<std::size_t>(i)] = std::move(mr.cloud);
            labels[static_cast<std::size_t>(i)] = std::move(mr.soft_label);
        });
    }

    // ---- phase B: shared trunk up to the mask point
    std::vector<TrunkOut> trunks(static_cast<std::size_t>(B));
    pool_->parallel_for(0, B, [&](std::int64_t i) {
        auto& rng = sample_rng[static_cast<std::size_t>(i)];
        const auto& pts = clouds[static_cast<std::size_t>(i)].points;
        const std::int64_t start = static_cast<std::int64_t>(rng.below(pts.size()));
        trunks[static_cast<std::size_t>(i)] = net_.trunk(pts, start);
    });

    // ---- phase C: masks (similarity strategy reads the partner's raw tokens)
    std::vector<MaskOut> masks(static_cast<std::size_t>(B));
    std::vector<Tensor> f1(static_cast<std::size_t>(B));
    pool_->parallel_for(0, B, [&](std::int64_t i) {
        const std::int64_t j = partner[static_cast<std::size_t>(i)];
        const Tensor& ref = trunks[static_cast<std::size_t>(j)].f_pre;
        masks[static_cast<std::size_t>(i)] =
            net_.make_mask(trunks[static_cast<std::size_t>(i)].f_pre, true, tau,
                           &sample_rng[static_cast<std::size_t>(i)], &ref);
        f1[static_cast<std::size_t>(i)] = net_.to_aggregation_point(
            trunks[static_cast<std::size_t>(i)].f_pre, masks[static_cast<std::size_t>(i)]);
    });

    // ---- phase D: aggregation tail, loss, per-sample backward
    const ScanOrders orders = net_.scan_orders_for_batch(&batch_rng);
    std::vector<GradSink> sinks(static_cast<std::size_t>(B));
    std::vector<double> losses(static_cast<std::size_t>(B));
    pool_->parallel_for(0, B, [&](std::int64_t i) {
        const std::int64_t j = partner[static_cast<std::size_t>(i)];
        // partner features act as constant context; gradients flow through the
        // sample's own path only, which keeps per-sample graphs independent
        Tensor f2 = j == i ? f1[static_cast<std::size_t>(i)]
                           : f1[static_cast<std::size_t>(j)].detach();
        TailOut t = net_.tail(f1[static_cast<std::size_t>(i)], f2, orders);
        Tensor y = Tensor::from(labels[static_cast<std::size_t>(i)], {1, C});
        Tensor loss = cross_entropy(t.logits.reshape({1, C}), y);
        if (cfg_.lambda_mask != 0.0 && masks[static_cast<std::size_t>(i)].m.defined())
            loss = add(loss, scale(mean_all(masks[static_cast<std::size_t>(i)].m),
                                   cfg_.lambda_mask));
        losses[static_cast<std::size_t>(i)] = loss.value();
        backward(loss, &sinks[static_cast<std::size_t>(i)]);
    });

    BatchStats stats;
    for (std::int64_t i = 0; i < B; ++i) {
        const double l = losses[static_cast<std::size_t>(i)];
        if (!std::isfinite(l)) {
            std::ostringstream os;
            os << "training aborted: non-finite loss at epoch " << epoch << " batch " << batch_idx
               << "; batch samples:";
            for (const auto& r : refs)
                os << " " << sources_.pools[static_cast<std::size_t>(r.pool)]
                              .clouds[static_cast<std::size_t>(r.cloud)]
                              ->sample_id;
            throw std::runtime_error(os.str());
        }
        stats.loss_sum += l;
        stats.mask_sum += masks[static_cast<std::size_t>(i)].mean;
        if (masks[static_cast<std::size_t>(i)].m.defined()) {
            const Tensor& mv = masks[static_cast<std::size_t>(i)].m;
            for (std::int64_t t = 0; t < mv.numel(); ++t) {
                int bin = static_cast<int>(mv.data()[t] * 10.0);
                bin = std::clamp(bin, 0, 9);
                ++stats.mask_hist[static_cast<std::size_t>(bin)];
            }
        }
    }
    stats.count = B;

    // merge per-sample gradients in sample order (deterministic for any
    // thread count), parallel across parameters
    GradSink merged;
    std::vector<double*> dst(params_.size());
    for (std::size_t pi = 0; pi < params_.size(); ++pi)
        dst[pi] = merged.buf(params_[pi].second.impl(), params_[pi].second.numel());
    pool_->parallel_for(0, static_cast<std::int64_t>(params_.size()), [&](std::int64_t pi) {
        TensorImpl* key = params_[static_cast<std::size_t>(pi)].second.impl();
        const std::int64_t n = params_[static_cast<std::size_t>(pi)].second.numel();
        double* d = dst[static_cast<std::size_t>(pi)];
        for (std::int64_t i = 0; i < B; ++i) {
            const DataVec* g = sinks[static_cast<std::size_t>(i)].find(key);
            if (!g) continue;
            for (std::int64_t j = 0; j < n; ++j) d[j] += (*g)[static_cast<std::size_t>(j)];
        }
        const double inv = 1.0 / static_cast<double>(B);
        for (std::int64_t j = 0; j < n; ++j) d[j] *= inv;
    });
    opt_.step(params_, merged, lr, cfg_.weight_decay, pool_.get());
    return stats;
}

EvalResult Trainer::evaluate(const std::vector<const PointCloud*>& clouds, double tau,
                             bool collect_features) {
    if (clouds.empty()) throw std::runtime_error("protocol error: empty test set");
    const int C = net_.cfg.num_classes;
    const ScanOrders orders = net_.scan_orders_for_batch(nullptr);
    const std::int64_t N = static_cast<std::int64_t>(clouds.size());
    std::vector<int> preds(static_cast<std::size_t>(N), -1);
    std::vector<std::vector<double>> pooled(static_cast<std::size_t>(N));
    std::vector<char> self_paired(static_cast<std::size_t>(N), 0);
    pool_->parallel_for(0, N, [&](std::int64_t i) {
        NoGradGuard ng;
        const PointCloud* c = clouds[static_cast<std::size_t>(i)];
        PointCloud norm = normalize_and_jitter(*c, false, 0.0, nullptr);
        TrunkOut t = net_.trunk(norm.points, 0);
        MaskOut m = net_.make_mask(t.f_pre, false, tau, nullptr, nullptr);
        Tensor fs = net_.to_aggregation_point(t.f_pre, m);
        // inference substitutes the sample's own features for the partner
        const Tensor& f2 = fs;
        self_paired[static_cast<std::size_t>(i)] = (f2.impl() == fs.impl()) ? 1 : 0;
        TailOut out = net_.tail(fs, f2, orders);
        int best = 0;
        for (int k = 1; k < C; ++k)
            if (out.logits.data()[k] > out.logits.data()[best]) best = k;
        preds[static_cast<std::size_t>(i)] = best;
        if (collect_features)
            pooled[static_cast<std::size_t>(i)] =
                std::vector<double>(out.pooled.data(), out.pooled.data() + out.pooled.numel());
    });

    std::size_t next = 0;
    EvalResult r = evaluate_with(
        [&](const PointCloud&) { return preds[next++]; }, clouds, C);
    r.isolation_ok = std::all_of(self_paired.begin(), self_paired.end(),
                                 [](char v) { return v == 1; });
    if (collect_features) {
        r.pooled_features = std::move(pooled);
        for (const auto* c : clouds) {
            r.sample_ids.push_back(c->sample_id);
            r.labels.push_back(c->class_id);
        }
    }
    return r;
}

}  // namespace pointdg
