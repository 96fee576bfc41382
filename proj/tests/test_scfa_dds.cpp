#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "pointdg/dds.hpp"
#include "pointdg/scfa.hpp"

using namespace pointdg;

namespace {

ScfaParams identity_scfa(int width) {
    Rng rng(1);
    ScfaParams p = ScfaParams::init(width, 4, 1, rng);
    auto eye = [width] {
        Tensor t = Tensor::zeros({width, width});
        for (int i = 0; i < width; ++i) t.data()[i * width + i] = 1.0;
        return t;
    };
    p.mlp1_w1 = eye();
    p.mlp1_b1 = Tensor::zeros({width});
    p.mlp1_w2 = eye();
    p.mlp1_b2 = Tensor::zeros({width});
    p.mlp2_w1 = eye();
    p.mlp2_b1 = Tensor::zeros({width});
    p.mlp2_w2 = eye();
    p.mlp2_b2 = Tensor::zeros({width});
    Tensor cw = Tensor::zeros({width, width, 1});
    for (int i = 0; i < width; ++i) cw.data()[i * width + i] = 1.0;
    p.conv_w = cw;
    p.conv_b = Tensor::zeros({width});
    return p;
}

}  // namespace

TEST_CASE("scfa aggregation") {
    SUBCASE("identity networks reduce to an elementwise product") {
        ScfaParams p = identity_scfa(1);
        Tensor f = scfa_aggregate(p, Tensor::from({2}, {1, 1}), Tensor::from({3}, {1, 1}));
        CHECK(f.data()[0] == doctest::Approx(6.0).epsilon(1e-12));
    }
    SUBCASE("zero partner features annihilate the product") {
        ScfaParams p = identity_scfa(2);
        Tensor f1 = Tensor::from({1, 2, 3, 4}, {2, 2});
        Tensor f = scfa_aggregate(p, f1, Tensor::zeros({2, 2}));
        for (std::int64_t i = 0; i < f.numel(); ++i) CHECK(f.data()[i] == 0.0);
    }
    SUBCASE("gradients match finite differences") {
        Rng rng(5);
        ScfaParams p = ScfaParams::init(3, 4, 1, rng);
        Tensor f1 = Tensor::randn({4, 3}, rng);
        Tensor f2 = Tensor::randn({4, 3}, rng);
        auto loss_for = [&](const ScfaParams& q, const Tensor& a, const Tensor& b) {
            Tensor f = scfa_aggregate(q, a, b);
            return sum_all(mul(f, f));
        };
        CHECK(finite_difference_check(
                  [&](const Tensor& a) { return loss_for(p, a, f2); }, f1) < 1e-5);
        CHECK(finite_difference_check(
                  [&](const Tensor& b) { return loss_for(p, f1, b); }, f2) < 1e-5);
        Tensor w0 = p.mlp2_w1.detach();
        CHECK(finite_difference_check(
                  [&](const Tensor& w) {
                      ScfaParams q = p;
                      q.mlp2_w1 = w;
                      return loss_for(q, f1, f2);
                  },
                  w0) < 1e-5);
        Tensor c0 = p.conv_w.detach();
        CHECK(finite_difference_check(
                  [&](const Tensor& w) {
                      ScfaParams q = p;
                      q.conv_w = w;
                      return loss_for(q, f1, f2);
                  },
                  c0) < 1e-5);
    }
    SUBCASE("shape mismatch errors") {
        ScfaParams p = identity_scfa(2);
        CHECK_THROWS(scfa_aggregate(p, Tensor::zeros({2, 2}), Tensor::zeros({3, 2})));
    }
}

TEST_CASE("assemble_sequence") {
    Rng rng(7);
    Tensor f1 = Tensor::randn({4, 8}, rng);
    Tensor fp = Tensor::randn({4, 8}, rng);
    Tensor fg = Tensor::randn({4, 8}, rng);
    SUBCASE("concatenation arithmetic and block recovery") {
        Tensor F = assemble_sequence({f1, fp, fg});
        CHECK(F.shape() == Shape{12, 8});
        Tensor s0 = slice(F, 0, 0, 4), s1 = slice(F, 0, 4, 4), s2 = slice(F, 0, 8, 4);
        for (std::int64_t i = 0; i < f1.numel(); ++i) {
            CHECK(s0.data()[i] == f1.data()[i]);
            CHECK(s1.data()[i] == fp.data()[i]);
            CHECK(s2.data()[i] == fg.data()[i]);
        }
    }
    SUBCASE("gradient of the sum w.r.t. the prompt block is all ones") {
        Tensor fg2 = fg.detach();
        fg2.set_requires_grad(true);
        backward(sum_all(assemble_sequence({f1, fp, fg2})));
        for (double g : fg2.grad()) CHECK(g == 1.0);
    }
    SUBCASE("length mismatch errors") {
        CHECK_THROWS(assemble_sequence({f1, Tensor::zeros({3, 8})}));
    }
}

TEST_CASE("aggregation ablations") {
    Rng rng(9);
    Tensor f1 = Tensor::randn({3, 4}, rng);
    Tensor f2 = Tensor::randn({3, 4}, rng);
    SUBCASE("sum") {
        Tensor f = aggregate_sum(f1, f2);
        for (std::int64_t i = 0; i < f.numel(); ++i)
            CHECK(f.data()[i] == f1.data()[i] + f2.data()[i]);
    }
    SUBCASE("concat projection keeps width") {
        ScfaParams p = ScfaParams::init(4, 3, 1, rng);
        Tensor f = aggregate_concat_proj(p, f1, f2);
        CHECK(f.shape() == Shape{3, 4});
    }
}

TEST_CASE("ids and cds orders") {
    SUBCASE("pinned small cases") {
        CHECK(ids_order(2) == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
        CHECK(cds_order(2) == std::vector<std::int64_t>{0, 2, 4, 1, 3, 5});
        CHECK(ids_order(1) == std::vector<std::int64_t>{0, 1, 2});
        CHECK(cds_order(1) == std::vector<std::int64_t>{0, 1, 2});
    }
    SUBCASE("cds formula holds exhaustively") {
        for (std::int64_t L = 1; L <= 256; ++L) {
            auto perm = cds_order(L);
            for (std::int64_t t = 0; t < L; ++t)
                for (int j = 0; j < 3; ++j)
                    CHECK(perm[static_cast<std::size_t>(3 * t + j)] == j * L + t);
        }
    }
    SUBCASE("orders are bijections for every L in [1,256]") {
        for (std::int64_t L = 1; L <= 256; ++L) {
            for (auto* perm : {&ids_order, &cds_order}) {
                auto p = (*perm)(L, 3);
                std::set<std::int64_t> s(p.begin(), p.end());
                CHECK(s.size() == static_cast<std::size_t>(3 * L));
            }
        }
    }
    SUBCASE("two-block variants are bijections too") {
        Rng rng(11);
        for (int trial = 0; trial < 10; ++trial) {
            const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(100));
            auto p = cds_order(L, 2);
            std::set<std::int64_t> s(p.begin(), p.end());
            CHECK(s.size() == static_cast<std::size_t>(2 * L));
        }
    }
}

TEST_CASE("baseline scan orders") {
    CHECK(baseline_order(BaselineScan::Backward, 4, nullptr) ==
          std::vector<std::int64_t>{3, 2, 1, 0});
    CHECK(baseline_order(BaselineScan::Forward, 3, nullptr) ==
          std::vector<std::int64_t>{0, 1, 2});
    Rng a(3), b(3);
    CHECK(baseline_order(BaselineScan::Shuffle, 16, &a) ==
          baseline_order(BaselineScan::Shuffle, 16, &b));
    CHECK_THROWS(baseline_order(BaselineScan::Shuffle, 4, nullptr));
}

TEST_CASE("dual scan") {
    Rng rng(13);
    const int D = 6, S = 3;
    const std::int64_t L = 4;
    SUBCASE("identity dynamics preserve values") {
        SsmBlockParams b1 = SsmBlockParams::init(D, S, rng);
        SsmBlockParams b2 = SsmBlockParams::init(D, S, rng);
        b1.out_proj = Tensor::zeros({D, D});
        b2.out_proj = Tensor::zeros({D, D});
        // rows with exact mean 0 and variance 1 - eps make layernorm an identity
        Tensor F = Tensor::randn({3 * L, D}, rng);
        for (std::int64_t r = 0; r < 3 * L; ++r) {
            double mu = 0;
            for (int j = 0; j < D; ++j) mu += F.at({r, j});
            mu /= D;
            double var = 0;
            for (int j = 0; j < D; ++j) {
                F.data()[r * D + j] -= mu;
                var += F.data()[r * D + j] * F.data()[r * D + j];
            }
            var /= D;
            const double target = std::sqrt((1.0 - 1e-5) / var);
            double mu2 = 0;
            for (int j = 0; j < D; ++j) {
                F.data()[r * D + j] *= target;
                mu2 += F.data()[r * D + j];
            }
            for (int j = 0; j < D; ++j) F.data()[r * D + j] -= mu2 / D;
        }
        Tensor out = dual_scan(F, b1, b2);
        for (std::int64_t i = 0; i < F.numel(); ++i)
            CHECK(out.data()[i] == doctest::Approx(F.data()[i]).epsilon(1e-9));
    }
    SUBCASE("shape contract") {
        SsmBlockParams b1 = SsmBlockParams::init(D, S, rng);
        SsmBlockParams b2 = SsmBlockParams::init(D, S, rng);
        Tensor F = Tensor::randn({3 * L, D}, rng);
        CHECK(dual_scan(F, b1, b2).shape() == F.shape());
        CHECK(dual_scan(F, b1, b2, DdsMode::Composed).shape() == F.shape());
    }
    SUBCASE("length not divisible by 3 errors") {
        SsmBlockParams b1 = SsmBlockParams::init(D, S, rng);
        SsmBlockParams b2 = SsmBlockParams::init(D, S, rng);
        CHECK_THROWS(dual_scan(Tensor::zeros({7, D}), b1, b2));
    }
    SUBCASE("gradient through both passes matches finite differences") {
        SsmBlockParams b1 = SsmBlockParams::init(4, 2, rng);
        SsmBlockParams b2 = SsmBlockParams::init(4, 2, rng);
        Tensor F0 = Tensor::randn({6, 4}, rng);
        Tensor w_loss = Tensor::randn({6, 4}, rng);
        double err = finite_difference_check(
            [&](const Tensor& F) {
                Tensor y = dual_scan(F, b1, b2);
                return sum_all(mul(y, w_loss));
            },
            F0);
        CHECK(err < 1e-5);
    }
}
