#include <cmath>

#include "doctest.h"
#include "pointdg/msd.hpp"

using namespace pointdg;

TEST_CASE("predict_mask_probs") {
    SUBCASE("zero weights give uniform probabilities") {
        Tensor seq = Tensor::from({1, 2, 3, 4, 5, 6}, {3, 2});
        Tensor W = Tensor::zeros({2, 2});
        Tensor p = predict_mask_probs(seq, W);
        for (std::int64_t i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == 0.5);
    }
    SUBCASE("rows sum to one") {
        Rng rng(2);
        Tensor seq = Tensor::randn({5, 4}, rng);
        Tensor W = Tensor::randn({4, 2}, rng);
        Tensor p = predict_mask_probs(seq, W);
        for (std::int64_t t = 0; t < 5; ++t)
            CHECK(p.at({t, 0}) + p.at({t, 1}) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("gradient w.r.t. the projection matches finite differences") {
        Rng rng(3);
        Tensor seq = Tensor::randn({4, 3}, rng);
        Tensor W0 = Tensor::randn({3, 2}, rng);
        Tensor weights = Tensor::from({1, -2, 0.5, 1.5, -1, 2, 0.25, -0.75}, {4, 2});
        double err = finite_difference_check(
            [&](const Tensor& W) { return sum_all(mul(predict_mask_probs(seq, W), weights)); },
            W0);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gumbel softmax mask") {
    SUBCASE("uniform probabilities with equal noise give m = 0.5") {
        Tensor p = Tensor::from({0.5, 0.5, 0.5, 0.5}, {2, 2});
        MaskVector mv = gumbel_softmax_mask(p, 0.7, nullptr);  // noiseless: g0 = g1 = 0
        CHECK(mv.m.data()[0] == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(mv.m.data()[1] == doctest::Approx(0.5).epsilon(1e-14));
    }
    SUBCASE("degenerate keep probability dominates any noise") {
        Tensor p = Tensor::from({1e-8, 1.0 - 1e-8}, {1, 2});
        Rng rng(5);
        int above = 0;
        for (int i = 0; i < 1000; ++i) {
            MaskVector mv = gumbel_softmax_mask(p, 0.5, &rng);
            if (mv.m.data()[0] > 0.5) ++above;
        }
        CHECK(above == 1000);
    }
    SUBCASE("keep rate follows the Gumbel-max law at low temperature") {
        Tensor p = Tensor::from({0.3, 0.7}, {1, 2});
        Rng rng(7);
        int kept = 0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            MaskVector mv = gumbel_softmax_mask(p, 0.1, &rng);
            if (mv.m.data()[0] > 0.5) ++kept;
        }
        const double rate = static_cast<double>(kept) / n;
        CHECK(rate > 0.69);
        CHECK(rate < 0.71);
    }
    SUBCASE("keep and drop components sum to one") {
        Rng rng(11);
        Tensor p = Tensor::from({0.2, 0.8, 0.6, 0.4, 0.45, 0.55}, {3, 2});
        for (int trial = 0; trial < 200; ++trial) {
            MaskVector mv = gumbel_softmax_mask(p, 0.3, &rng);
            for (std::int64_t t = 0; t < 3; ++t) {
                const double z = (mv.g[static_cast<std::size_t>(2 * t + 1)] -
                                  mv.g[static_cast<std::size_t>(2 * t)] +
                                  std::log(p.at({t, 1})) - std::log(p.at({t, 0}))) /
                                 mv.tau;
                const double drop = 1.0 / (1.0 + std::exp(z));
                CHECK(std::abs(mv.m.data()[t] + drop - 1.0) < 1e-12);
            }
        }
    }
    SUBCASE("monotone in the keep probability under fixed noise") {
        // noiseless path: m = sigmoid(log(p1/p0)/tau) is strictly increasing in p1
        double prev = -1.0;
        for (double p1 : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
            Tensor p = Tensor::from({1.0 - p1, p1}, {1, 2});
            MaskVector mv = gumbel_softmax_mask(p, 0.8, nullptr);
            CHECK(mv.m.data()[0] > prev);
            prev = mv.m.data()[0];
        }
    }
    SUBCASE("gradient flows through the mask to the probabilities") {
        Rng rng(13);
        Tensor seq = Tensor::randn({6, 4}, rng);
        Tensor W = Tensor::randn({4, 2}, rng).set_requires_grad(true);
        Tensor p = predict_mask_probs(seq, W);
        Rng noise(17);
        MaskVector mv = gumbel_softmax_mask(p, 0.7, &noise);
        Tensor F = apply_mask(seq, mv.m);
        backward(sum_all(mul(F, F)));
        double norm = 0.0;
        for (double g : W.grad()) norm += g * g;
        CHECK(norm > 0.0);
    }
    SUBCASE("tau must be positive") {
        Tensor p = Tensor::from({0.5, 0.5}, {1, 2});
        CHECK_THROWS(gumbel_softmax_mask(p, 0.0, nullptr));
    }
}

TEST_CASE("apply_mask") {
    Tensor f = Tensor::from({1, 2, 3, 4}, {2, 2});
    SUBCASE("broadcast multiply") {
        Tensor F = apply_mask(f, Tensor::from({1, 0}, {2}));
        CHECK(F.at({0, 0}) == 1.0);
        CHECK(F.at({0, 1}) == 2.0);
        CHECK(F.at({1, 0}) == 0.0);
        CHECK(F.at({1, 1}) == 0.0);
    }
    SUBCASE("all-ones mask is the identity") {
        Tensor F = apply_mask(f, Tensor::full({2}, 1.0));
        for (std::int64_t i = 0; i < 4; ++i) CHECK(F.data()[i] == f.data()[i]);
    }
    SUBCASE("mask gradient is the token's feature sum") {
        Tensor m = Tensor::from({0.5, 0.25}, {2});
        m.set_requires_grad(true);
        backward(sum_all(apply_mask(f, m)));
        CHECK(m.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));   // 1+2
        CHECK(m.grad()[1] == doctest::Approx(7.0).epsilon(1e-12));   // 3+4
    }
    SUBCASE("length mismatch errors") {
        CHECK_THROWS(apply_mask(f, Tensor::full({3}, 1.0)));
    }
}

TEST_CASE("baseline masks") {
    SUBCASE("random-5pct masks exactly 5% of tokens") {
        Rng rng(19);
        Tensor m = baseline_mask_random5(20, rng);
        int zeros = 0;
        for (std::int64_t i = 0; i < 20; ++i) zeros += m.data()[i] == 0.0 ? 1 : 0;
        CHECK(zeros == 1);
    }
    SUBCASE("similarity-top80 keeps exactly 80%") {
        Rng rng(23);
        Tensor seq = Tensor::randn({10, 4}, rng);
        Tensor ref = Tensor::randn({6, 4}, rng);
        Tensor m = baseline_mask_similarity_top80(seq, ref);
        int kept = 0;
        for (std::int64_t i = 0; i < 10; ++i) kept += m.data()[i] == 1.0 ? 1 : 0;
        CHECK(kept == 8);
    }
    SUBCASE("a token identical to every reference token is never masked") {
        Rng rng(29);
        Tensor ref = Tensor::zeros({5, 3});
        for (std::int64_t r = 0; r < 5; ++r)
            for (std::int64_t j = 0; j < 3; ++j)
                ref.data()[r * 3 + j] = (j == 0) ? 2.0 : 1.0;  // all identical rows
        Tensor seq = Tensor::randn({10, 3}, rng);
        for (std::int64_t j = 0; j < 3; ++j) seq.data()[4 * 3 + j] = ref.data()[j];  // token 4
        Tensor m = baseline_mask_similarity_top80(seq, ref);
        CHECK(m.data()[4] == 1.0);
    }
    SUBCASE("similarity strategy without a reference errors") {
        Rng rng(31);
        Tensor seq = Tensor::randn({4, 3}, rng);
        CHECK_THROWS(baseline_mask_similarity_top80(seq, Tensor()));
    }
}
