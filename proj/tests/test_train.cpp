#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pointdg/checkpoint.hpp"
#include "pointdg/optim.hpp"
#include "pointdg/protocol.hpp"
#include "pointdg/synthetic.hpp"
#include "pointdg/trainer.hpp"

using namespace pointdg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("pointdg_train_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainConfig fast_config() {
    TrainConfig c;
    c.scale = "small";
    c.groups = 8;
    c.neighbors = 4;
    c.state_size = 4;
    c.epochs = 2;
    c.warmup_epochs = 1;
    c.batch_slots = 4;
    c.eval_every = 1;
    c.threads = 2;
    c.source_splits = "train";
    return c;
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
    SUBCASE("confident correct prediction has zero loss") {
        Tensor logits = Tensor::from({1000, 0, 0, 0, 0}, {1, 5});
        Tensor y = Tensor::from({1, 0, 0, 0, 0}, {1, 5});
        CHECK(cross_entropy(logits, y).value() == 0.0);
    }
    SUBCASE("uniform prediction over 5 classes costs ln 5") {
        Tensor logits = Tensor::zeros({1, 5});
        Tensor y = Tensor::from({0, 0, 1, 0, 0}, {1, 5});
        CHECK(cross_entropy(logits, y).value() ==
              doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("matched soft distributions cost the entropy") {
        Tensor logits = Tensor::from({0.5, 0.5}, {1, 2});
        Tensor y = Tensor::from({0.5, 0.5}, {1, 2});
        CHECK(cross_entropy(logits, y).value() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("labels off the simplex are rejected") {
        Tensor logits = Tensor::zeros({1, 3});
        CHECK_THROWS_AS(cross_entropy(logits, Tensor::from({0.5, 0.2, 0.2}, {1, 3})),
                        std::invalid_argument);
        CHECK_THROWS_AS(cross_entropy(logits, Tensor::from({1.2, -0.2, 0.0}, {1, 3})),
                        std::invalid_argument);
    }
}

TEST_CASE("adamw") {
    auto one_param = [](double v) {
        std::vector<std::pair<std::string, Tensor>> params;
        params.emplace_back("p", Tensor::from({v}, {}).set_requires_grad(true));
        return params;
    };
    SUBCASE("zero gradient and zero decay is a fixed point") {
        auto params = one_param(1.5);
        AdamW opt;
        opt.init(params);
        GradSink g;
        g.buf(params[0].second.impl(), 1);  // zero gradient
        opt.step(params, g, 1e-3, 0.0);
        CHECK(params[0].second.value() == 1.5);
    }
    SUBCASE("first step matches the closed form") {
        const double p0 = 0.8, grad = 0.37, lr = 1e-3, wd = 1e-2;
        auto params = one_param(p0);
        AdamW opt;
        opt.init(params);
        GradSink g;
        g.add(params[0].second.impl(), &grad, 1);
        opt.step(params, g, lr, wd);
        const double decayed = p0 - lr * wd * p0;
        const double expect = decayed - lr * grad / (std::sqrt(grad * grad) + 1e-8);
        CHECK(params[0].second.value() == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("decay-only path shrinks by (1 - lr*wd)") {
        auto params = one_param(2.0);
        AdamW opt;
        opt.init(params);
        GradSink g;
        g.buf(params[0].second.impl(), 1);
        opt.step(params, g, 0.1, 0.5);
        CHECK(params[0].second.value() == doctest::Approx(2.0 * (1 - 0.1 * 0.5)).epsilon(1e-12));
    }
    SUBCASE("non-finite gradients abort naming the tensor") {
        auto params = one_param(1.0);
        params[0].first = "scfa.global_prompt";
        AdamW opt;
        opt.init(params);
        GradSink g;
        const double bad = std::numeric_limits<double>::quiet_NaN();
        g.add(params[0].second.impl(), &bad, 1);
        try {
            opt.step(params, g, 1e-3, 0.0);
            FAIL("expected abort");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("scfa.global_prompt") != std::string::npos);
        }
    }
}

TEST_CASE("learning rate schedule") {
    TrainSchedule s;  // 1e-4 -> 1e-5, 40 epochs, 5 warmup
    SUBCASE("pinned values") {
        CHECK(lr_at(5, s) == 1e-4);
        CHECK(lr_at(39, s) == 1e-5);
        CHECK(lr_at(0, s) == doctest::Approx(1e-4 / 5).epsilon(1e-12));
    }
    SUBCASE("midpoint of an even cosine span is the average") {
        TrainSchedule t{1e-4, 1e-5, 46, 5};  // span 40, midpoint at epoch 25
        CHECK(lr_at(25, t) == doctest::Approx((1e-4 + 1e-5) / 2).epsilon(1e-12));
    }
    SUBCASE("continuous at the warmup junction and non-increasing after") {
        double prev = lr_at(s.warmup_epochs, s);
        CHECK(prev == s.lr_init);
        for (int e = s.warmup_epochs + 1; e < s.epochs; ++e) {
            const double cur = lr_at(e, s);
            CHECK(cur <= prev + 1e-18);
            prev = cur;
        }
        // warmup is increasing up to lr_init
        CHECK(lr_at(s.warmup_epochs - 1, s) < s.lr_init);
    }
    SUBCASE("epoch bounds") {
        CHECK_THROWS(lr_at(-1, s));
        CHECK_THROWS(lr_at(40, s));
    }
}

TEST_CASE("config validation") {
    TrainConfig c = fast_config();
    CHECK_NOTHROW(c.validate());
    SUBCASE("scan without aggregation is rejected") {
        c.aggregation = "off";
        c.scan = "dds";
        CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("SCFA"), std::invalid_argument);
    }
    SUBCASE("bad insertion positions") {
        c.msd_position = 0;
        CHECK_THROWS(c.validate());
        c.msd_position = 4;  // beyond the 3 stages of small
        CHECK_THROWS(c.validate());
        c.msd_position = 2;
        c.scfa_position = 1;  // MSD must not come after SCFA
        CHECK_THROWS(c.validate());
    }
    SUBCASE("config file round trip with overrides") {
        TempDir dir("cfg");
        const fs::path p = dir.path / "run.cfg";
        std::ofstream(p) << "# comment\nepochs = 7\nscan=cds\nuse_gp = false\nseed = 99\n";
        TrainConfig parsed = parse_config_file(p.string(), fast_config());
        CHECK(parsed.epochs == 7);
        CHECK(parsed.scan == "cds");
        CHECK(parsed.use_gp == false);
        CHECK(parsed.seed == 99);
        apply_config_override(parsed, "epochs", "9");
        CHECK(parsed.epochs == 9);
        CHECK_THROWS(apply_config_override(parsed, "not_a_key", "1"));
    }
}

TEST_CASE("partner assignment is balanced across domains") {
    // synthetic plan: 3 pools, one class, plenty of slots
    IndexPlan plan;
    plan.num_classes = 1;
    plan.max_count = {4000};
    plan.participating = {{0, 1, 2}};
    plan.plan = {{std::vector<int>(4000), std::vector<int>(4000), std::vector<int>(4000)}};
    std::vector<Trainer::SampleRef> refs;
    for (int k = 0; k < 4000; ++k)
        for (int p = 0; p < 3; ++p) refs.push_back({0, k, p, 0});
    Rng rng(77);
    auto partners = Trainer::assign_partners(refs, plan, rng, nullptr);
    // chi^2 for partner-domain uniformity per source domain: 12000 draws total
    double chi2 = 0.0;
    for (int self = 0; self < 3; ++self) {
        std::int64_t counts[3] = {0, 0, 0};
        std::int64_t n = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            if (refs[i].pool != self) continue;
            const auto& pr = refs[static_cast<std::size_t>(partners[i])];
            CHECK(pr.cls == refs[i].cls);
            CHECK(pr.slot == refs[i].slot);
            CHECK(pr.pool != self);
            ++counts[pr.pool];
            ++n;
        }
        const double expect = static_cast<double>(n) / 2.0;
        for (int p = 0; p < 3; ++p) {
            if (p == self) continue;
            chi2 += (counts[p] - expect) * (counts[p] - expect) / expect;
        }
    }
    // 3 independent binomials -> 3 dof; p > 0.01 requires chi2 < 11.34
    CHECK(chi2 < 11.34);
}

TEST_CASE("oracle classifier scores perfect accuracy through the harness") {
    std::vector<PointCloud> clouds(10);
    std::vector<const PointCloud*> ptrs;
    for (int i = 0; i < 10; ++i) {
        clouds[static_cast<std::size_t>(i)].class_id = i % 5;
        clouds[static_cast<std::size_t>(i)].sample_id = "s" + std::to_string(i);
        ptrs.push_back(&clouds[static_cast<std::size_t>(i)]);
    }
    EvalResult r = evaluate_with([](const PointCloud& c) { return c.class_id; }, ptrs, 5);
    CHECK(r.accuracy == 1.0);
    for (double a : r.per_class_accuracy) CHECK(a == 1.0);
    CHECK_THROWS_WITH_AS(evaluate_with([](const PointCloud&) { return 0; }, {}, 5),
                         doctest::Contains("protocol error"), std::runtime_error);
}

TEST_CASE("end-to-end training smoke on a tiny benchmark") {
    TempDir dir("smoke");
    SynthConfig sc;
    sc.seed = 7;
    sc.train_per_class = 3;
    sc.test_per_class = 2;
    sc.points = 96;
    generate_synthetic_benchmark(dir.path.string(), sc);
    LoadResult data = load_dataset(dir.path.string());

    TrainConfig cfg = fast_config();

    SUBCASE("identical seeds give bitwise-identical training") {
        auto run = [&](std::vector<double>* losses) {
            Trainer tr(cfg, 5);
            tr.set_sources(build_source_data(data, {0, 1, 2}, cfg.source_splits));
            for (int e = 0; e < cfg.epochs; ++e) losses->push_back(tr.run_epoch(e).loss);
            return tr.params()[0].second.detach();
        };
        std::vector<double> l1, l2;
        Tensor p1 = run(&l1);
        Tensor p2 = run(&l2);
        CHECK(l1 == l2);
        for (std::int64_t i = 0; i < p1.numel(); ++i) CHECK(p1.data()[i] == p2.data()[i]);
    }

    SUBCASE("thread count does not change results") {
        auto run = [&](int threads) {
            TrainConfig c = cfg;
            c.threads = threads;
            Trainer tr(c, 5);
            tr.set_sources(build_source_data(data, {0, 1, 2}, c.source_splits));
            double last = 0;
            for (int e = 0; e < c.epochs; ++e) last = tr.run_epoch(e).loss;
            return last;
        };
        CHECK(run(1) == run(2));
    }

    SUBCASE("single LOO target trains, evaluates and stays deterministic") {
        std::unique_ptr<Trainer> trainer;
        EvalResult ev1;
        TargetRunResult r = run_single_target(data, cfg, 3, nullptr, &trainer, &ev1);
        CHECK(r.epochs.size() == static_cast<std::size_t>(cfg.epochs));
        CHECK(r.final_accuracy >= 0.0);
        CHECK(r.final_accuracy <= 1.0);
        CHECK(r.isolation_ok);
        for (const auto& m : r.epochs) CHECK(std::isfinite(m.loss));
        // evaluating the same model twice is bitwise stable
        std::vector<const PointCloud*> test;
        for (const auto& ds : data.datasets)
            if (ds.domain_id == 3 && ds.split == "test")
                for (const auto& c : ds.clouds) test.push_back(&c);
        EvalResult a = trainer->evaluate(test, cfg.tau_at(cfg.epochs - 1), true);
        EvalResult b = trainer->evaluate(test, cfg.tau_at(cfg.epochs - 1), true);
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.predictions == b.predictions);
        REQUIRE(a.pooled_features.size() == b.pooled_features.size());
        for (std::size_t i = 0; i < a.pooled_features.size(); ++i)
            CHECK(a.pooled_features[i] == b.pooled_features[i]);
    }

    SUBCASE("checkpoint round trip restores the exact model") {
        Trainer tr(cfg, 5);
        tr.set_sources(build_source_data(data, {0, 1, 2}, cfg.source_splits));
        tr.run_epoch(0);
        const std::string path = (dir.path / "model.pdgm").string();
        save_checkpoint(path, tr.params());
        auto loaded = load_checkpoint(path);
        Trainer fresh(cfg, 5);
        fresh.network().load_from(loaded);
        auto& a = tr.params();
        auto& b = fresh.params();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].first == b[i].first);
            for (std::int64_t j = 0; j < a[i].second.numel(); ++j)
                CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
        }
        CHECK_THROWS(load_checkpoint((dir.path / "manifest.json").string()));  // bad magic
    }
}
