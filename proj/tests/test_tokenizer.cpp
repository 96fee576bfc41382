#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "pointdg/tokenizer.hpp"

using namespace pointdg;

namespace {

std::vector<Point3> random_cloud(Rng& rng, int n) {
    std::vector<Point3> pts;
    for (int i = 0; i < n; ++i)
        pts.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    return pts;
}

// O(N L^2) greedy max-min reference: recompute every distance each round.
std::vector<std::int64_t> fps_oracle(const std::vector<Point3>& pts, int L, std::int64_t start) {
    std::vector<std::int64_t> chosen = {start};
    while (static_cast<int>(chosen.size()) < L) {
        double best = -1.0;
        std::int64_t best_idx = 0;
        for (std::int64_t j = 0; j < static_cast<std::int64_t>(pts.size()); ++j) {
            double mind = 1e300;
            for (std::int64_t c : chosen) {
                const double dx = pts[static_cast<std::size_t>(j)][0] - pts[static_cast<std::size_t>(c)][0];
                const double dy = pts[static_cast<std::size_t>(j)][1] - pts[static_cast<std::size_t>(c)][1];
                const double dz = pts[static_cast<std::size_t>(j)][2] - pts[static_cast<std::size_t>(c)][2];
                mind = std::min(mind, dx * dx + dy * dy + dz * dz);
            }
            if (mind > best) {
                best = mind;
                best_idx = j;
            }
        }
        chosen.push_back(best_idx);
    }
    return chosen;
}

std::uint32_t morton_oracle(const Point3& p) {
    std::uint32_t out = 0;
    std::uint32_t q[3];
    for (int k = 0; k < 3; ++k) {
        double t = (p[static_cast<std::size_t>(k)] + 1.0) * 0.5 * 1024.0;
        t = std::clamp(t, 0.0, 1023.0);
        q[k] = static_cast<std::uint32_t>(t);
    }
    for (int bit = 0; bit < 10; ++bit)
        for (int k = 0; k < 3; ++k)
            out |= ((q[k] >> bit) & 1u) << (3 * bit + k);
    return out;
}

}  // namespace

TEST_CASE("farthest point sampling") {
    SUBCASE("colinear points pick the extremes") {
        std::vector<Point3> pts = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
        auto c = farthest_point_sample(pts, 2, 0);
        CHECK(c == std::vector<std::int64_t>{0, 3});
    }
    SUBCASE("L equals N exhausts all points") {
        Rng rng(2);
        auto pts = random_cloud(rng, 12);
        auto c = farthest_point_sample(pts, 12, 3);
        std::set<std::int64_t> s(c.begin(), c.end());
        CHECK(s.size() == 12);
        CHECK(c.front() == 3);
    }
    SUBCASE("matches the brute-force greedy oracle") {
        Rng rng(17);
        for (int trial = 0; trial < 5; ++trial) {
            auto pts = random_cloud(rng, 50);
            const std::int64_t start = static_cast<std::int64_t>(rng.below(50));
            CHECK(farthest_point_sample(pts, 8, start) == fps_oracle(pts, 8, start));
        }
    }
    SUBCASE("errors") {
        std::vector<Point3> pts = {{0, 0, 0}, {1, 0, 0}};
        CHECK_THROWS(farthest_point_sample(pts, 3, 0));
        CHECK_THROWS(farthest_point_sample(pts, 1, 5));
    }
}

TEST_CASE("knn grouping") {
    SUBCASE("K=1 gives zero patches") {
        Rng rng(5);
        auto pts = random_cloud(rng, 20);
        auto patches = knn_group(pts, {0, 7, 13}, 1);
        for (double v : patches) CHECK(v == 0.0);
    }
    SUBCASE("translation invariance of relative coordinates") {
        Rng rng(6);
        auto pts = random_cloud(rng, 30);
        auto moved = pts;
        for (auto& p : moved) {
            p[0] += 5.0;
            p[1] -= 2.0;
            p[2] += 0.25;
        }
        auto a = knn_group(pts, {1, 4, 9}, 5);
        auto b = knn_group(moved, {1, 4, 9}, 5);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
    SUBCASE("matches exhaustive sort oracle") {
        Rng rng(7);
        auto pts = random_cloud(rng, 40);
        const int K = 6;
        auto patches = knn_group(pts, {3}, K);
        std::vector<std::pair<double, std::int64_t>> d;
        for (std::int64_t j = 0; j < 40; ++j) {
            const double dx = pts[static_cast<std::size_t>(j)][0] - pts[3][0];
            const double dy = pts[static_cast<std::size_t>(j)][1] - pts[3][1];
            const double dz = pts[static_cast<std::size_t>(j)][2] - pts[3][2];
            d.push_back({dx * dx + dy * dy + dz * dz, j});
        }
        std::sort(d.begin(), d.end());
        for (int k = 0; k < K; ++k) {
            const auto& p = pts[static_cast<std::size_t>(d[static_cast<std::size_t>(k)].second)];
            CHECK(patches[static_cast<std::size_t>(3 * k)] == p[0] - pts[3][0]);
            CHECK(patches[static_cast<std::size_t>(3 * k + 1)] == p[1] - pts[3][1]);
            CHECK(patches[static_cast<std::size_t>(3 * k + 2)] == p[2] - pts[3][2]);
        }
    }
    SUBCASE("K > N errors") {
        std::vector<Point3> pts = {{0, 0, 0}};
        CHECK_THROWS(knn_group(pts, {0}, 2));
    }
}

TEST_CASE("group embedding") {
    Rng rng(11);
    GroupEmbed embed = GroupEmbed::init(16, rng);
    SUBCASE("permutation of points within a group is invariant") {
        Rng r2(12);
        std::vector<double> patches(4 * 5 * 3);
        for (auto& v : patches) v = r2.gauss();
        Tensor a = embed.forward(patches, 4, 5);
        std::vector<double> permuted = patches;
        // swap points 0 and 3 of group 2
        for (int k = 0; k < 3; ++k)
            std::swap(permuted[static_cast<std::size_t>((2 * 5 + 0) * 3 + k)],
                      permuted[static_cast<std::size_t>((2 * 5 + 3) * 3 + k)]);
        Tensor b = embed.forward(permuted, 4, 5);
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }
    SUBCASE("zero patches embed identically across groups") {
        std::vector<double> patches(3 * 1 * 3, 0.0);
        Tensor f = embed.forward(patches, 3, 1);
        for (std::int64_t g = 1; g < 3; ++g)
            for (std::int64_t j = 0; j < 16; ++j)
                CHECK(f.at({g, j}) == f.at({0, j}));
    }
    SUBCASE("gradient through embedding matches finite differences") {
        Rng r2(13);
        Tensor w = embed.w1.detach();
        double err = finite_difference_check(
            [&](const Tensor& w1) {
                GroupEmbed e = embed;
                e.w1 = w1;
                std::vector<double> patches(2 * 3 * 3);
                Rng r3(14);
                for (auto& v : patches) v = r3.gauss();
                Tensor f = e.forward(patches, 2, 3);
                return sum_all(mul(f, f));
            },
            w);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("serialization orders") {
    SUBCASE("x-sorted centers give identity under axis-lex") {
        std::vector<Point3> centers = {{-0.5, 0, 0}, {-0.1, 0, 0}, {0.2, 0, 0}, {0.9, 0, 0}};
        auto p = serialize_order(centers, SerializeStrategy::AxisLex);
        CHECK(p == std::vector<std::int64_t>{0, 1, 2, 3});
    }
    SUBCASE("two reversed points swap") {
        std::vector<Point3> centers = {{0.9, 0, 0}, {-0.5, 0, 0}};
        auto p = serialize_order(centers, SerializeStrategy::AxisLex);
        CHECK(p == std::vector<std::int64_t>{1, 0});
    }
    SUBCASE("zorder matches an independent Morton oracle") {
        Rng rng(19);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<Point3> centers;
            for (int i = 0; i < 40; ++i)
                centers.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
            auto p = serialize_order(centers, SerializeStrategy::ZOrder);
            std::vector<std::int64_t> expect(centers.size());
            std::iota(expect.begin(), expect.end(), 0);
            std::stable_sort(expect.begin(), expect.end(), [&](std::int64_t a, std::int64_t b) {
                return morton_oracle(centers[static_cast<std::size_t>(a)]) <
                       morton_oracle(centers[static_cast<std::size_t>(b)]);
            });
            CHECK(p == expect);
        }
    }
    SUBCASE("output is always a bijection") {
        Rng rng(20);
        for (int trial = 0; trial < 20; ++trial) {
            const int L = 1 + static_cast<int>(rng.below(64));
            std::vector<Point3> centers;
            for (int i = 0; i < L; ++i)
                centers.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
            for (auto strat : {SerializeStrategy::AxisLex, SerializeStrategy::ZOrder}) {
                auto p = serialize_order(centers, strat);
                std::set<std::int64_t> s(p.begin(), p.end());
                CHECK(s.size() == static_cast<std::size_t>(L));
                CHECK(*s.begin() == 0);
                CHECK(*s.rbegin() == L - 1);
            }
        }
    }
}

TEST_CASE("tokenizer composite is deterministic and translation-stable") {
    Rng rng(23);
    auto pts = random_cloud(rng, 200);
    Rng wrng(24);
    GroupEmbed embed = GroupEmbed::init(16, wrng);
    TokenizerConfig cfg;
    cfg.groups = 8;
    cfg.neighbors = 4;
    TokenSequence a = tokenize(pts, cfg, embed, 0);
    TokenSequence b = tokenize(pts, cfg, embed, 0);
    for (std::int64_t i = 0; i < a.features.numel(); ++i)
        CHECK(a.features.data()[i] == b.features.data()[i]);
    CHECK(a.order == b.order);

    auto moved = pts;
    for (auto& p : moved) p[2] += 3.0;
    TokenSequence c = tokenize(moved, cfg, embed, 0);
    // same FPS structure, so provenance shifts but patch content is identical;
    // serialization may reorder, so compare as multisets of rows
    std::multiset<double> ra, rc;
    for (std::int64_t i = 0; i < a.features.numel(); ++i) {
        ra.insert(a.features.data()[i]);
        rc.insert(c.features.data()[i]);
    }
    for (auto ia = ra.begin(), ic = rc.begin(); ia != ra.end(); ++ia, ++ic)
        CHECK(*ia == doctest::Approx(*ic).epsilon(1e-9));
}
