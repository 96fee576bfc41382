#include "pointdg/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "pointdg/network.hpp"
#include "pointdg/trainer.hpp"

namespace pointdg {

namespace {

// Full forward + loss on a two-sample batch as a function of each parameter
// tensor in turn; both samples share one graph so cross-sample paths (SCFA
// pairing, the global prompt) are exercised.
double model_fd_check(std::uint64_t seed, double* out_seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig mc;
    mc.stages = {2, 1, 16, 4};
    mc.groups = 8;
    mc.neighbors = 4;
    mc.num_classes = 3;
    Rng rng(seed);
    Network net = Network::init(mc, rng);
    // nudge every parameter off its initialization so no relu/max input sits
    // exactly on a kink (zero biases meet all-zero center patches otherwise)
    for (Tensor* slot : net.param_slots())
        for (std::int64_t i = 0; i < (*slot).numel(); ++i)
            (*slot).data()[i] += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.02, 0.05);

    std::vector<std::vector<Point3>> clouds(2);
    for (int s = 0; s < 2; ++s)
        for (int i = 0; i < 64; ++i)
            clouds[static_cast<std::size_t>(s)].push_back(
                {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    Tensor labels = Tensor::from({1, 0, 0, 0, 1, 0}, {2, 3});

    auto loss_fn = [&](const Network& m) {
        TrunkOut t0s = m.trunk(clouds[0], 0);
        TrunkOut t1s = m.trunk(clouds[1], 0);
        MaskOut m0 = m.make_mask(t0s.f_pre, false, 0.8, nullptr, &t1s.f_pre);
        MaskOut m1 = m.make_mask(t1s.f_pre, false, 0.8, nullptr, &t0s.f_pre);
        Tensor f0 = m.to_aggregation_point(t0s.f_pre, m0);
        Tensor f1 = m.to_aggregation_point(t1s.f_pre, m1);
        ScanOrders orders = m.scan_orders_for_batch(nullptr);
        TailOut o0 = m.tail(f0, f1, orders);
        TailOut o1 = m.tail(f1, f0, orders);
        Tensor logits = concat({o0.logits.reshape({1, 3}), o1.logits.reshape({1, 3})}, 0);
        return cross_entropy(logits, labels);
    };

    double worst = 0.0;
    for (Tensor* slot : net.param_slots()) {
        const Tensor orig = *slot;
        const double err = finite_difference_check_adaptive(
            [&](const Tensor& x) {
                *slot = x;  // rebind the live parameter to the probe tensor
                Tensor loss = loss_fn(net);
                *slot = orig;
                return loss;
            },
            orig.detach(), 1e-5, {1e-3, 1e-4, 1e-6}, 1e-5, 1e-9);
        worst = std::max(worst, err);
    }
    if (out_seconds)
        *out_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return worst;
}

}  // namespace

GradCheckReport run_gradient_suite(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport report;
    Rng rng(seed);
    auto prim = [&](const char* name, Shape shape, std::function<Tensor(const Tensor&)> f,
                    double keepout = 0.0) {
        Tensor x = Tensor::randn(shape, rng);
        if (keepout > 0.0)
            for (std::int64_t i = 0; i < x.numel(); ++i)
                if (std::abs(x.data()[i]) < keepout)
                    x.data()[i] = x.data()[i] >= 0 ? 2 * keepout : -2 * keepout;
        report.rows.push_back({name, finite_difference_check(f, x), 1e-6});
    };

    Tensor wsum = Tensor::randn({4, 6}, rng);
    prim("add", {4, 6}, [&](const Tensor& x) { return sum_all(mul(add(x, x), wsum)); });
    prim("mul", {4, 6}, [&](const Tensor& x) { return sum_all(mul(mul(x, x), wsum)); });
    prim("neg", {4, 6}, [&](const Tensor& x) { return sum_all(mul(neg(x), wsum)); });
    prim("exp", {4, 6}, [&](const Tensor& x) { return sum_all(mul(exp(x), wsum)); });
    prim("log", {4, 6},
         [&](const Tensor& x) { return sum_all(mul(log(add_scalar(mul(x, x), 0.5)), wsum)); });
    prim("reciprocal", {4, 6}, [&](const Tensor& x) {
        return sum_all(mul(reciprocal(add_scalar(mul(x, x), 1.0)), wsum));
    });
    prim("relu", {4, 6}, [&](const Tensor& x) { return sum_all(mul(relu(x), wsum)); }, 1e-3);
    prim("softplus", {4, 6}, [&](const Tensor& x) { return sum_all(mul(softplus(x), wsum)); });
    prim("sigmoid", {4, 6}, [&](const Tensor& x) { return sum_all(mul(sigmoid(x), wsum)); });
    prim("silu", {4, 6}, [&](const Tensor& x) { return sum_all(mul(silu(x), wsum)); });
    prim("matmul", {4, 5}, [&](const Tensor& x) {
        Rng r(seed + 1);
        Tensor w = Tensor::randn({5, 6}, r);
        return sum_all(mul(matmul(x, w), wsum));
    });
    prim("softmax", {4, 6}, [&](const Tensor& x) { return sum_all(mul(softmax(x, 1), wsum)); });
    prim("sum-axis", {4, 6}, [&](const Tensor& x) {
        Tensor m = sum(x, 0);
        return sum_all(mul(m, slice(wsum, 0, 0, 1).reshape({6})));
    });
    prim("mean-axis", {4, 6}, [&](const Tensor& x) {
        Tensor m = mean(x, 0);
        return sum_all(mul(m, slice(wsum, 0, 0, 1).reshape({6})));
    });
    prim("max-axis", {4, 6}, [&](const Tensor& x) {
        Tensor m = max(x, 0);
        return sum_all(mul(m, slice(wsum, 0, 0, 1).reshape({6})));
    }, 1e-2);
    prim("concat+slice", {4, 6}, [&](const Tensor& x) {
        Tensor y = concat({x, scale(x, 2.0)}, 0);
        return sum_all(mul(slice(y, 0, 2, 4), wsum));
    });
    prim("gather", {5, 6}, [&](const Tensor& x) {
        return sum_all(mul(gather(x, {4, 0, 2, 2}), gather(wsum, {0, 1, 2, 3})));
    });
    prim("scatter", {4, 6}, [&](const Tensor& x) {
        return sum_all(mul(scatter(x, {2, 0, 3, 1}), wsum));
    });
    prim("layernorm", {4, 6}, [&](const Tensor& x) {
        Rng r(seed + 2);
        Tensor g = Tensor::randn({6}, r);
        Tensor b = Tensor::randn({6}, r);
        return sum_all(mul(layernorm(x, g, b), wsum));
    });
    prim("conv1d", {6, 3}, [&](const Tensor& x) {
        Rng r(seed + 3);
        Tensor w = Tensor::randn({2, 3, 3}, r);
        Tensor b = Tensor::randn({2}, r);
        return sum_all(mul(conv1d(x, w, b), Tensor::randn({6, 2}, r)));
    });
    prim("rowscale", {5}, [&](const Tensor& s) {
        Rng r(seed + 4);
        Tensor x = Tensor::randn({5, 4}, r);
        return sum_all(mul(rowscale(x, s), Tensor::randn({5, 4}, r)));
    });
    prim("clamp", {4, 6},
         [&](const Tensor& x) { return sum_all(mul(clamp(x, -0.9, 0.9), wsum)); }, 1e-2);
    prim("scan", {8, 3}, [&](const Tensor& u) {
        Rng r(seed + 5);
        Tensor delta = softplus(Tensor::randn({8}, r));
        Tensor B = Tensor::randn({8, 2}, r);
        Tensor C = Tensor::randn({8, 2}, r);
        Tensor A = Tensor::randn({3, 2}, r, 0.4);
        Tensor y = scan_recurrence(u, delta, B, C, A, {3, 0, 7, 1, 6, 2, 5, 4});
        return sum_all(mul(y, Tensor::randn({8, 3}, r)));
    });

    const double model_err = model_fd_check(seed, &report.model_sweep_seconds);
    report.rows.push_back({"full-model-step", model_err, 1e-4});
    report.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::vector<ScanBenchRow> run_scan_bench(int reps) {
    const int D = 192, S = 16;
    Rng rng(1);
    SsmBlockParams p = SsmBlockParams::init(D, S, rng);
    std::vector<ScanBenchRow> rows;
    double prev_median = 0.0;
    for (std::int64_t L : {128, 256, 512, 1024, 2048}) {
        Tensor x = Tensor::randn({L, D}, rng);
        NoGradGuard ng;
        selective_scan(x, p, identity_order(L));  // warm-up
        std::vector<double> ms;
        for (int r = 0; r < reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor y = selective_scan(x, p, identity_order(L));
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(ms.begin(), ms.end());
        ScanBenchRow row;
        row.L = L;
        row.median_ms = ms[ms.size() / 2];
        for (double v : ms) row.mean_ms += v;
        row.mean_ms /= static_cast<double>(ms.size());
        for (double v : ms) row.std_ms += (v - row.mean_ms) * (v - row.mean_ms);
        row.std_ms = std::sqrt(row.std_ms / static_cast<double>(ms.size()));
        row.ratio_vs_half = prev_median > 0 ? row.median_ms / prev_median : 0.0;
        prev_median = row.median_ms;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace pointdg
