#include "pointdg/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pointdg {

SerializeStrategy serialize_strategy_from(const std::string& name) {
    if (name == "axis-lex" || name == "axislex") return SerializeStrategy::AxisLex;
    if (name == "zorder" || name == "z-order") return SerializeStrategy::ZOrder;
    throw std::invalid_argument("unknown serialization strategy '" + name + "'");
}

std::vector<std::int64_t> farthest_point_sample(const std::vector<Point3>& points, int L,
                                                std::int64_t start) {
    const std::int64_t n = static_cast<std::int64_t>(points.size());
    if (L > n)
        throw std::invalid_argument("farthest_point_sample: L=" + std::to_string(L) +
                                    " exceeds point count " + std::to_string(n));
    if (start < 0 || start >= n)
        throw std::invalid_argument("farthest_point_sample: start index out of range");
    std::vector<std::int64_t> centers;
    centers.reserve(static_cast<std::size_t>(L));
    std::vector<double> min_d2(static_cast<std::size_t>(n),
                               std::numeric_limits<double>::infinity());
    std::int64_t cur = start;
    for (int i = 0; i < L; ++i) {
        centers.push_back(cur);
        const Point3& c = points[static_cast<std::size_t>(cur)];
        double best = -1.0;
        std::int64_t best_idx = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            const Point3& p = points[static_cast<std::size_t>(j)];
            const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
            const double d2 = dx * dx + dy * dy + dz * dz;
            auto& m = min_d2[static_cast<std::size_t>(j)];
            if (d2 < m) m = d2;
            if (m > best) {  // strict: ties keep the lowest index
                best = m;
                best_idx = j;
            }
        }
        cur = best_idx;
    }
    return centers;
}

std::vector<double> knn_group(const std::vector<Point3>& points,
                              const std::vector<std::int64_t>& centers, int K) {
    const std::int64_t n = static_cast<std::int64_t>(points.size());
    if (K > n)
        throw std::invalid_argument("knn_group: K=" + std::to_string(K) +
                                    " exceeds point count " + std::to_string(n));
    const std::int64_t L = static_cast<std::int64_t>(centers.size());
    std::vector<double> patches(static_cast<std::size_t>(L * K * 3));
    std::vector<std::pair<double, std::int64_t>> dist(static_cast<std::size_t>(n));
    for (std::int64_t g = 0; g < L; ++g) {
        const Point3& c = points[static_cast<std::size_t>(centers[static_cast<std::size_t>(g)])];
        for (std::int64_t j = 0; j < n; ++j) {
            const Point3& p = points[static_cast<std::size_t>(j)];
            const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
            dist[static_cast<std::size_t>(j)] = {dx * dx + dy * dy + dz * dz, j};
        }
        std::partial_sort(dist.begin(), dist.begin() + K, dist.end());
        for (int k = 0; k < K; ++k) {
            const Point3& p = points[static_cast<std::size_t>(dist[static_cast<std::size_t>(k)].second)];
            double* dst = patches.data() + (g * K + k) * 3;
            dst[0] = p[0] - c[0];
            dst[1] = p[1] - c[1];
            dst[2] = p[2] - c[2];
        }
    }
    return patches;
}

std::uint32_t morton_code(const Point3& p) {
    auto quantize = [](double v) -> std::uint32_t {
        const double t = (v + 1.0) * 0.5 * 1024.0;
        const double c = std::clamp(t, 0.0, 1023.0);
        return static_cast<std::uint32_t>(c);
    };
    auto spread = [](std::uint32_t v) -> std::uint32_t {
        v &= 0x3ff;
        v = (v | (v << 16)) & 0x030000ff;
        v = (v | (v << 8)) & 0x0300f00f;
        v = (v | (v << 4)) & 0x030c30c3;
        v = (v | (v << 2)) & 0x09249249;
        return v;
    };
    return spread(quantize(p[0])) | (spread(quantize(p[1])) << 1) |
           (spread(quantize(p[2])) << 2);
}

std::vector<std::int64_t> serialize_order(const std::vector<Point3>& centers,
                                          SerializeStrategy strategy) {
    const std::int64_t L = static_cast<std::int64_t>(centers.size());
    std::vector<std::int64_t> perm(static_cast<std::size_t>(L));
    std::iota(perm.begin(), perm.end(), 0);
    if (strategy == SerializeStrategy::AxisLex) {
        std::stable_sort(perm.begin(), perm.end(), [&](std::int64_t a, std::int64_t b) {
            const Point3& pa = centers[static_cast<std::size_t>(a)];
            const Point3& pb = centers[static_cast<std::size_t>(b)];
            if (pa[0] != pb[0]) return pa[0] < pb[0];
            if (pa[1] != pb[1]) return pa[1] < pb[1];
            return pa[2] < pb[2];
        });
    } else {
        std::vector<std::uint32_t> codes(static_cast<std::size_t>(L));
        for (std::int64_t i = 0; i < L; ++i)
            codes[static_cast<std::size_t>(i)] = morton_code(centers[static_cast<std::size_t>(i)]);
        std::stable_sort(perm.begin(), perm.end(), [&](std::int64_t a, std::int64_t b) {
            return codes[static_cast<std::size_t>(a)] < codes[static_cast<std::size_t>(b)];
        });
    }
    return perm;
}

GroupEmbed GroupEmbed::init(int width, Rng& rng) {
    GroupEmbed e;
    e.width = width;
    const int hidden = width / 2;
    const double s1 = std::sqrt(2.0 / 3.0);
    const double s2 = std::sqrt(2.0 / static_cast<double>(hidden));
    e.w1 = Tensor::randn({3, hidden}, rng, s1).set_requires_grad(true);
    e.b1 = Tensor::zeros({hidden}).set_requires_grad(true);
    e.w2 = Tensor::randn({hidden, width}, rng, s2).set_requires_grad(true);
    e.b2 = Tensor::zeros({width}).set_requires_grad(true);
    return e;
}

Tensor GroupEmbed::forward(const std::vector<double>& patches, int L, int K) const {
    Tensor x = Tensor::from(patches, {static_cast<std::int64_t>(L) * K, 3});
    Tensor h = relu(add(matmul(x, w1), b1));
    Tensor f = add(matmul(h, w2), b2);                  // (L*K) x D
    Tensor grouped = f.reshape({L, K, width});
    return max(grouped, 1);                             // L x D
}

void GroupEmbed::params(std::vector<std::pair<std::string, Tensor>>& out,
                        const std::string& prefix) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
}

TokenSequence tokenize(const std::vector<Point3>& points, const TokenizerConfig& cfg,
                       const GroupEmbed& embed, std::int64_t fps_start) {
    TokenSequence seq;
    const auto centers = farthest_point_sample(points, cfg.groups, fps_start);
    const auto patches = knn_group(points, centers, cfg.neighbors);
    Tensor feats = embed.forward(patches, cfg.groups, cfg.neighbors);
    std::vector<Point3> center_pts(centers.size());
    for (std::size_t i = 0; i < centers.size(); ++i)
        center_pts[i] = points[static_cast<std::size_t>(centers[i])];
    seq.order = serialize_order(center_pts, cfg.strategy);
    seq.features = gather(feats, seq.order);
    seq.provenance.resize(centers.size());
    for (std::size_t i = 0; i < seq.order.size(); ++i)
        seq.provenance[i] = center_pts[static_cast<std::size_t>(seq.order[i])];
    return seq;
}

}  // namespace pointdg
