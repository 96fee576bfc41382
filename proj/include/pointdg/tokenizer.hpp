#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pointdg/pointcloud.hpp"
#include "pointdg/tensor.hpp"

namespace pointdg {

enum class SerializeStrategy { AxisLex, ZOrder };
SerializeStrategy serialize_strategy_from(const std::string& name);

// Greedy max-min farthest point sampling; ties break toward the lowest index.
std::vector<std::int64_t> farthest_point_sample(const std::vector<Point3>& points, int L,
                                                std::int64_t start);

// K nearest neighbors of each center (Euclidean, ties by index), expressed
// relative to the center. Layout: L x K x 3.
std::vector<double> knn_group(const std::vector<Point3>& points,
                              const std::vector<std::int64_t>& centers, int K);

// 10-bit-per-axis Morton code over [-1,1]^3.
std::uint32_t morton_code(const Point3& p);

// Traversal order over group centers; always a permutation of [0, L).
std::vector<std::int64_t> serialize_order(const std::vector<Point3>& centers,
                                          SerializeStrategy strategy);

// Shared per-point MLP (3 -> D/2 -> D) followed by max-pool over each group.
struct GroupEmbed {
    Tensor w1, b1, w2, b2;  // (3,D/2),(D/2),(D/2,D),(D)
    int width = 0;

    static GroupEmbed init(int width, Rng& rng);
    // patches: flat L*K*3 buffer; returns L x D tensor on the tape.
    Tensor forward(const std::vector<double>& patches, int L, int K) const;
    void params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

struct TokenizerConfig {
    int groups = 32;
    int neighbors = 16;
    SerializeStrategy strategy = SerializeStrategy::ZOrder;
};

struct TokenSequence {
    Tensor features;                  // L x D, rows follow the serialized order
    std::vector<Point3> provenance;   // center coordinate per token
    std::vector<std::int64_t> order;  // serialization permutation over groups
};

// FPS -> KNN -> embed -> serialize. Deterministic for fixed weights and start.
TokenSequence tokenize(const std::vector<Point3>& points, const TokenizerConfig& cfg,
                       const GroupEmbed& embed, std::int64_t fps_start);

}  // namespace pointdg
