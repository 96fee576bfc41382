#include "pointdg/protocol.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "pointdg/checkpoint.hpp"

namespace fs = std::filesystem;

namespace pointdg {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

std::vector<const PointCloud*> test_split_of(const LoadResult& data, int domain) {
    std::vector<const PointCloud*> out;
    for (const auto& ds : data.datasets)
        if (ds.domain_id == domain && ds.split == "test")
            for (const auto& c : ds.clouds) out.push_back(&c);
    return out;
}

void write_features_csv(const std::string& path, const EvalResult& eval) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "sample_id,class_id";
    if (!eval.pooled_features.empty())
        for (std::size_t j = 0; j < eval.pooled_features.front().size(); ++j) os << ",f" << j;
    os << "\n";
    for (std::size_t i = 0; i < eval.sample_ids.size(); ++i) {
        os << eval.sample_ids[i] << "," << eval.labels[i];
        for (double v : eval.pooled_features[i]) os << "," << format_double(v);
        os << "\n";
    }
}

}  // namespace

TargetRunResult run_single_target(const LoadResult& data, const TrainConfig& cfg,
                                  int target_domain, std::ostream* log,
                                  std::unique_ptr<Trainer>* out_trainer, EvalResult* final_eval) {
    const int num_domains = static_cast<int>(data.manifest.domains.size());
    if (target_domain < 0 || target_domain >= num_domains)
        throw std::runtime_error("protocol error: target domain out of range");
    std::vector<int> sources;
    for (int d = 0; d < num_domains; ++d)
        if (d != target_domain) sources.push_back(d);
    if (sources.size() < 2)
        throw std::runtime_error("protocol error: fewer than 2 source domains");

    TargetRunResult result;
    result.target = data.manifest.domains[static_cast<std::size_t>(target_domain)];
    result.target_domain = target_domain;

    auto trainer = std::make_unique<Trainer>(cfg, static_cast<int>(data.manifest.classes.size()));
    trainer->set_sources(build_source_data(data, sources, cfg.source_splits));
    const auto test_clouds = test_split_of(data, target_domain);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochMetrics m = trainer->run_epoch(epoch);
        const bool eval_now = (epoch % cfg.eval_every == 0) || epoch == cfg.epochs - 1;
        if (eval_now) {
            EvalResult ev = trainer->evaluate(test_clouds, cfg.tau_at(epoch), false);
            m.accuracy = ev.accuracy;
        }
        if (log)
            *log << "[" << result.target << "] epoch " << epoch << " loss " << std::setprecision(6)
                 << m.loss << " acc "
                 << (std::isnan(m.accuracy) ? std::string("-") : format_double(m.accuracy))
                 << " mask " << m.mean_mask << "\n"
                 << std::flush;
        result.epochs.push_back(m);
    }
    EvalResult ev = trainer->evaluate(test_clouds, cfg.tau_at(cfg.epochs - 1), true);
    result.final_accuracy = ev.accuracy;
    result.per_class_accuracy = ev.per_class_accuracy;
    result.isolation_ok = ev.isolation_ok;
    result.warnings = trainer->warnings();
    if (final_eval) *final_eval = std::move(ev);
    if (out_trainer) *out_trainer = std::move(trainer);
    return result;
}

LooResult run_leave_one_out(const LoadResult& data, const std::string& dataset_root,
                            const TrainConfig& cfg, const std::string& out_dir,
                            std::ostream* log) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    LooResult loo;
    loo.dataset_hash = dataset_hash(dataset_root);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    std::ofstream metrics, mask_stats;
    if (!out_dir.empty()) {
        metrics.open(out_dir + "/metrics.csv", std::ios::binary | std::ios::trunc);
        metrics << "epoch,split,loss,accuracy,mean_mask,lr\n";
        mask_stats.open(out_dir + "/mask_stats.csv", std::ios::binary | std::ios::trunc);
        mask_stats << "epoch,split,mean_mask";
        for (int b = 0; b < 10; ++b)
            mask_stats << ",keep_" << b * 10 << "_" << (b + 1) * 10;
        mask_stats << "\n";
    }

    double acc_sum = 0.0;
    for (int target = 0; target < static_cast<int>(data.manifest.domains.size()); ++target) {
        std::unique_ptr<Trainer> trainer;
        EvalResult final_eval;
        TargetRunResult r =
            run_single_target(data, cfg, target, log, out_dir.empty() ? nullptr : &trainer,
                              &final_eval);
        if (metrics.is_open()) {
            for (const auto& m : r.epochs) {
                metrics << m.epoch << "," << r.target << "," << format_double(m.loss) << ","
                        << format_double(m.accuracy) << "," << format_double(m.mean_mask) << ","
                        << format_double(m.lr) << "\n";
                mask_stats << m.epoch << "," << r.target << "," << format_double(m.mean_mask);
                for (std::int64_t c : m.mask_hist) mask_stats << "," << c;
                mask_stats << "\n";
            }
            metrics << cfg.epochs << "," << r.target << "_final,"
                    << format_double(r.epochs.back().loss) << ","
                    << format_double(r.final_accuracy) << ","
                    << format_double(r.epochs.back().mean_mask) << ",0\n";
        }
        if (!out_dir.empty() && trainer) {
            save_checkpoint(out_dir + "/checkpoint_" + r.target + ".pdgm",
                            trainer->params());
            write_features_csv(out_dir + "/features_" + r.target + ".csv", final_eval);
        }
        acc_sum += r.final_accuracy;
        loo.runs.push_back(std::move(r));
    }
    loo.average_accuracy = acc_sum / static_cast<double>(loo.runs.size());
    loo.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        nlohmann::json j;
        j["config"] = nlohmann::json::parse(config_echo_json(cfg));
        j["seed"] = cfg.seed;
        j["dataset_hash"] = loo.dataset_hash;
        j["wall_seconds"] = loo.wall_seconds;
        j["average_accuracy"] = loo.average_accuracy;
        nlohmann::json per;
        for (const auto& r : loo.runs) {
            nlohmann::json e;
            e["accuracy"] = r.final_accuracy;
            e["per_class_accuracy"] = r.per_class_accuracy;
            e["isolation_ok"] = r.isolation_ok;
            per[r.target] = e;
        }
        j["targets"] = per;
        std::ofstream os(out_dir + "/result.json", std::ios::binary | std::ios::trunc);
        os << j.dump(2) << "\n";
    }
    return loo;
}

std::vector<AblationEntry> ablation_preset(const std::string& name, const TrainConfig& base) {
    std::vector<AblationEntry> rows;
    auto add = [&](const std::string& n, std::function<void(TrainConfig&)> f) {
        rows.push_back({n, std::move(f)});
    };
    if (name == "table2") {
        add("baseline", [](TrainConfig& c) {
            c.msd = "off";
            c.aggregation = "off";
            c.scan = "off";
        });
        add("+cdf", [](TrainConfig& c) {
            c.msd = "off";
            c.use_gp = false;
        });
        add("+cdf+gp", [](TrainConfig& c) { c.msd = "off"; });
        add("+cdf+gp+msd", [](TrainConfig&) {});
    } else if (name == "masks") {
        add("gumbel", [](TrainConfig& c) { c.msd = "gumbel"; });
        add("random-5pct", [](TrainConfig& c) { c.msd = "random"; });
        add("similarity-top80", [](TrainConfig& c) { c.msd = "similarity"; });
    } else if (name == "aggregation") {
        add("scfa", [](TrainConfig& c) { c.aggregation = "scfa"; });
        add("sum", [](TrainConfig& c) { c.aggregation = "sum"; });
        add("concat", [](TrainConfig& c) { c.aggregation = "concat"; });
    } else if (name == "scans") {
        add("dds", [](TrainConfig& c) { c.scan = "dds"; });
        add("ids-only", [](TrainConfig& c) { c.scan = "ids"; });
        add("cds-only", [](TrainConfig& c) { c.scan = "cds"; });
        add("forward", [](TrainConfig& c) { c.scan = "forward"; });
        add("backward", [](TrainConfig& c) { c.scan = "backward"; });
        add("shuffle", [](TrainConfig& c) { c.scan = "shuffle"; });
        add("no-scan", [](TrainConfig& c) { c.scan = "off"; });
    } else if (name == "positions") {
        const std::vector<std::pair<int, int>> pos = {{3, 3}, {2, 3}, {2, 2},
                                                      {1, 3}, {1, 2}, {1, 1}};
        for (auto [m, s] : pos)
            add("msd@" + std::to_string(m) + ",scfa@" + std::to_string(s), [m, s](TrainConfig& c) {
                c.msd_position = m;
                c.scfa_position = s;
            });
    } else if (name == "scales") {
        add("tiny", [](TrainConfig& c) { c.scale = "tiny"; });
        add("small", [](TrainConfig& c) { c.scale = "small"; });
        add("base", [](TrainConfig& c) { c.scale = "base"; });
    } else {
        throw std::invalid_argument("unknown ablation preset '" + name + "'");
    }
    (void)base;
    return rows;
}

std::vector<AblationRowResult> run_ablation_matrix(const LoadResult& data,
                                                   const std::string& dataset_root,
                                                   const TrainConfig& base,
                                                   const std::vector<AblationEntry>& rows,
                                                   const std::string& out_dir,
                                                   std::ostream* log) {
    // validate the whole grid before any training starts
    std::vector<TrainConfig> cfgs;
    for (const auto& row : rows) {
        TrainConfig c = base;
        row.modify(c);
        c.validate();
        cfgs.push_back(c);
    }
    std::vector<AblationRowResult> results;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (log) *log << "=== ablation row '" << rows[i].name << "' ===\n";
        const std::string row_dir =
            out_dir.empty() ? "" : out_dir + "/" + std::to_string(i) + "_" + rows[i].name;
        LooResult loo = run_leave_one_out(data, dataset_root, cfgs[i], row_dir, log);
        AblationRowResult r;
        r.name = rows[i].name;
        for (const auto& run : loo.runs) r.per_target.push_back(run.final_accuracy);
        r.average = loo.average_accuracy;
        results.push_back(std::move(r));
    }
    if (!out_dir.empty()) {
        std::ofstream os(out_dir + "/ablation.csv", std::ios::binary | std::ios::trunc);
        os << "row";
        for (const auto& d : data.manifest.domains) os << ",to_" << d;
        os << ",avg\n";
        for (const auto& r : results) {
            os << r.name;
            for (double v : r.per_target) os << "," << format_double(v);
            os << "," << format_double(r.average) << "\n";
        }
        std::ofstream txt(out_dir + "/ablation.txt", std::ios::binary | std::ios::trunc);
        txt << render_ablation_table(results, data.manifest.domains);
    }
    return results;
}

std::string render_ablation_table(const std::vector<AblationRowResult>& rows,
                                  const std::vector<std::string>& domain_names) {
    std::ostringstream os;
    std::size_t w = 12;
    for (const auto& r : rows) w = std::max(w, r.name.size() + 2);
    os << std::left << std::setw(static_cast<int>(w)) << "row";
    for (const auto& d : domain_names) os << std::right << std::setw(10) << ("to_" + d);
    os << std::right << std::setw(10) << "avg" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(w)) << r.name;
        os << std::fixed << std::setprecision(4);
        for (double v : r.per_target) os << std::right << std::setw(10) << v;
        os << std::right << std::setw(10) << r.average << "\n";
        os.unsetf(std::ios::fixed);
    }
    return os.str();
}

}  // namespace pointdg
