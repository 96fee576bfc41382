// pointdg: domain-generalized point cloud classification with a selective
// state-space backbone. Subcommands cover data generation, training, the
// leave-one-out protocol, ablations, gradient checking and diagnostics.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "pointdg/checkpoint.hpp"
#include "pointdg/gradcheck.hpp"
#include "pointdg/protocol.hpp"
#include "pointdg/synthetic.hpp"
#include "pointdg/trainer.hpp"

using namespace pointdg;
namespace fs = std::filesystem;

namespace {

struct ConfigCli {
    std::string config_file;
    std::vector<std::string> overrides;

    TrainConfig resolve() const {
        TrainConfig cfg;
        if (!config_file.empty()) cfg = parse_config_file(config_file, cfg);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
            apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

void add_config_options(CLI::App* cmd, ConfigCli& cc) {
    cmd->add_option("--config", cc.config_file, "key = value config file");
    cmd->add_option("--set", cc.overrides, "override a config key, e.g. --set epochs=40")
        ->take_all();
}

void require_new_dir(const std::string& dir, bool force) {
    if (dir.empty()) return;
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw std::invalid_argument("output directory '" + dir +
                                    "' is not empty; pass --force to reuse it");
    fs::create_directories(dir);
}

int domain_index(const LoadResult& data, const std::string& name) {
    for (std::size_t i = 0; i < data.manifest.domains.size(); ++i)
        if (data.manifest.domains[i] == name) return static_cast<int>(i);
    try {
        const int idx = std::stoi(name);
        if (idx >= 0 && idx < static_cast<int>(data.manifest.domains.size())) return idx;
    } catch (...) {
    }
    throw std::invalid_argument("unknown domain '" + name + "'");
}

std::vector<const PointCloud*> split_clouds(const LoadResult& data, int domain,
                                            const std::string& split) {
    std::vector<const PointCloud*> out;
    for (const auto& ds : data.datasets)
        if (ds.domain_id == domain && ds.split == split)
            for (const auto& c : ds.clouds) out.push_back(&c);
    return out;
}

// ---- grad-check / scan-bench ------------------------------------------------

int cmd_grad_check(std::uint64_t seed) {
    GradCheckReport rep = run_gradient_suite(seed);
    std::printf("%-18s %12s %10s  %s\n", "check", "max-rel-err", "tol", "status");
    for (const auto& r : rep.rows)
        std::printf("%-18s %12.3e %10.0e  %s\n", r.name.c_str(), r.err, r.tol,
                    r.pass() ? "ok" : "FAIL");
    std::printf("full-model sweep over every parameter coordinate took %.1fs\n",
                rep.model_sweep_seconds);
    std::printf("total %.1fs; %s\n", rep.total_seconds,
                rep.all_pass() ? "all gradients verified" : "FAILURES above");
    return rep.all_pass() ? 0 : 2;
}

int cmd_scan_bench(const std::string& out_csv, int reps) {
    const auto rows = run_scan_bench(reps);
    std::printf("%8s %12s %12s %12s %14s\n", "L", "mean_ms", "std_ms", "median_ms",
                "ratio_vs_half");
    bool ok = true;
    for (const auto& r : rows) {
        std::printf("%8lld %12.4f %12.4f %12.4f %14.3f\n", static_cast<long long>(r.L),
                    r.mean_ms, r.std_ms, r.median_ms, r.ratio_vs_half);
        if (r.L >= 256 && r.ratio_vs_half > 2.5) ok = false;
    }
    if (!out_csv.empty()) {
        std::ofstream os(out_csv, std::ios::trunc);
        os << "L,mean_ms,std_ms,ratio_vs_half\n";
        for (const auto& r : rows)
            os << r.L << "," << format_double(r.mean_ms) << "," << format_double(r.std_ms)
               << "," << format_double(r.ratio_vs_half) << "\n";
    }
    std::printf("linear-complexity check (ratio <= 2.5 for L >= 256): %s\n",
                ok ? "ok" : "FAIL");
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"pointdg: domain-generalized point cloud classification"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain benchmark");
    SynthConfig synth;
    std::string gen_root;
    gen->add_option("--root", gen_root, "output dataset directory")->required();
    gen->add_option("--seed", synth.seed, "generator seed");
    gen->add_option("--train-per-class", synth.train_per_class, "train clouds per class/domain");
    gen->add_option("--test-per-class", synth.test_per_class, "test clouds per class/domain");
    gen->add_option("--points", synth.points, "points per cloud");
    gen->add_flag("--force", synth.force, "overwrite a non-empty directory");

    // train
    auto* train = app.add_subcommand("train", "train one leave-one-out target");
    ConfigCli train_cfg;
    std::string train_root, train_target, train_out;
    bool train_force = false;
    train->add_option("--root", train_root, "dataset directory")->required();
    train->add_option("--target", train_target, "held-out target domain")->required();
    train->add_option("--out", train_out, "run output directory");
    train->add_flag("--force", train_force, "reuse a non-empty output directory");
    add_config_options(train, train_cfg);

    // loo
    auto* loo = app.add_subcommand("loo", "full leave-one-out protocol over all domains");
    ConfigCli loo_cfg;
    std::string loo_root, loo_out;
    bool loo_force = false;
    loo->add_option("--root", loo_root, "dataset directory")->required();
    loo->add_option("--out", loo_out, "run output directory")->required();
    loo->add_flag("--force", loo_force, "reuse a non-empty output directory");
    add_config_options(loo, loo_cfg);

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid of configurations");
    ConfigCli ab_cfg;
    std::string ab_root, ab_out, ab_preset = "table2";
    bool ab_force = false;
    ablate->add_option("--root", ab_root, "dataset directory")->required();
    ablate->add_option("--out", ab_out, "output directory")->required();
    ablate
        ->add_option("--preset", ab_preset,
                     "grid preset: table2|masks|aggregation|scans|positions|scales")
        ->required();
    ablate->add_flag("--force", ab_force, "reuse a non-empty output directory");
    add_config_options(ablate, ab_cfg);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one domain split");
    ConfigCli ev_cfg;
    std::string ev_root, ev_ckpt, ev_domain, ev_split = "test";
    eval->add_option("--root", ev_root, "dataset directory")->required();
    eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    eval->add_option("--domain", ev_domain, "domain to evaluate")->required();
    eval->add_option("--split", ev_split, "train or test split");
    add_config_options(eval, ev_cfg);

    // export-features
    auto* exf = app.add_subcommand("export-features", "write pooled features of a split to CSV");
    ConfigCli xf_cfg;
    std::string xf_root, xf_ckpt, xf_domain, xf_split = "test", xf_out;
    exf->add_option("--root", xf_root, "dataset directory")->required();
    exf->add_option("--checkpoint", xf_ckpt, "checkpoint file")->required();
    exf->add_option("--domain", xf_domain, "domain to export")->required();
    exf->add_option("--split", xf_split, "train or test split");
    exf->add_option("--out", xf_out, "output CSV path")->required();
    add_config_options(exf, xf_cfg);

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
    std::uint64_t gc_seed = 1;
    gc->add_option("--seed", gc_seed, "random seed");

    // scan-bench
    auto* sb = app.add_subcommand("scan-bench", "selective scan timing over doubling lengths");
    std::string sb_out = "bench.csv";
    int sb_reps = 20;
    sb->add_option("--out", sb_out, "output CSV path");
    sb->add_option("--reps", sb_reps, "repetitions per length");

    // inspect-scan
    auto* insp = app.add_subcommand("inspect-scan", "print IDS and CDS permutations");
    std::int64_t insp_L = 2;
    insp->add_option("--L", insp_L, "block length")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);  // usage text; nonzero on bad flags
    }

    try {
        if (*gen) {
            generate_synthetic_benchmark(gen_root, synth);
            std::cout << "benchmark written to " << gen_root << "\n";
            std::cout << "dataset hash: " << dataset_hash(gen_root) << "\n";
            return 0;
        }
        if (*train) {
            TrainConfig cfg = train_cfg.resolve();
            require_new_dir(train_out, train_force);
            LoadResult data = load_dataset(train_root);
            for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
            const int target = domain_index(data, train_target);
            std::unique_ptr<Trainer> trainer;
            EvalResult final_eval;
            TargetRunResult r =
                run_single_target(data, cfg, target, &std::cout, &trainer, &final_eval);
            std::cout << "final accuracy on " << r.target << ": " << r.final_accuracy << "\n";
            if (!train_out.empty()) {
                std::ofstream metrics(train_out + "/metrics.csv", std::ios::trunc);
                metrics << "epoch,split,loss,accuracy,mean_mask,lr\n";
                for (const auto& m : r.epochs)
                    metrics << m.epoch << "," << r.target << "," << format_double(m.loss) << ","
                            << format_double(m.accuracy) << "," << format_double(m.mean_mask)
                            << "," << format_double(m.lr) << "\n";
                save_checkpoint(train_out + "/checkpoint_" + r.target + ".pdgm",
                                trainer->params());
            }
            return 0;
        }
        if (*loo) {
            TrainConfig cfg = loo_cfg.resolve();
            require_new_dir(loo_out, loo_force);
            LoadResult data = load_dataset(loo_root);
            for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
            LooResult res = run_leave_one_out(data, loo_root, cfg, loo_out, &std::cout);
            for (const auto& r : res.runs)
                std::cout << "target " << r.target << ": " << r.final_accuracy << "\n";
            std::cout << "average: " << res.average_accuracy << "  (wall "
                      << res.wall_seconds << "s)\n";
            return 0;
        }
        if (*ablate) {
            TrainConfig cfg = ab_cfg.resolve();
            require_new_dir(ab_out, ab_force);
            LoadResult data = load_dataset(ab_root);
            auto rows = ablation_preset(ab_preset, cfg);
            auto results = run_ablation_matrix(data, ab_root, cfg, rows, ab_out, &std::cout);
            std::cout << render_ablation_table(results, data.manifest.domains);
            return 0;
        }
        if (*eval || *exf) {
            const bool exporting = static_cast<bool>(*exf);
            TrainConfig cfg = (exporting ? xf_cfg : ev_cfg).resolve();
            const std::string root = exporting ? xf_root : ev_root;
            const std::string ckpt = exporting ? xf_ckpt : ev_ckpt;
            const std::string domain = exporting ? xf_domain : ev_domain;
            const std::string split = exporting ? xf_split : ev_split;
            LoadResult data = load_dataset(root);
            const int dom = domain_index(data, domain);
            Trainer trainer(cfg, static_cast<int>(data.manifest.classes.size()));
            trainer.network().load_from(load_checkpoint(ckpt));
            auto clouds = split_clouds(data, dom, split);
            EvalResult ev = trainer.evaluate(clouds, cfg.tau_at(cfg.epochs - 1), exporting);
            std::cout << "accuracy on " << domain << "/" << split << ": " << ev.accuracy << "\n";
            for (std::size_t c = 0; c < ev.per_class_accuracy.size(); ++c)
                std::cout << "  " << data.manifest.classes[c] << ": " << ev.per_class_accuracy[c]
                          << "\n";
            if (exporting) {
                std::ofstream os(xf_out, std::ios::trunc);
                os << "sample_id,class_id";
                for (std::size_t j = 0; j < ev.pooled_features.front().size(); ++j)
                    os << ",f" << j;
                os << "\n";
                for (std::size_t i = 0; i < ev.sample_ids.size(); ++i) {
                    os << ev.sample_ids[i] << "," << ev.labels[i];
                    for (double v : ev.pooled_features[i]) os << "," << format_double(v);
                    os << "\n";
                }
                std::cout << "features written to " << xf_out << "\n";
            }
            return 0;
        }
        if (*gc) return cmd_grad_check(gc_seed);
        if (*sb) return cmd_scan_bench(sb_out, sb_reps);
        if (*insp) {
            auto print = [](const char* name, const std::vector<std::int64_t>& p) {
                std::cout << name << ": [";
                for (std::size_t i = 0; i < p.size(); ++i) std::cout << (i ? "," : "") << p[i];
                std::cout << "]\n";
            };
            print("IDS", ids_order(insp_L));
            print("CDS", cds_order(insp_L));
            return 0;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
