#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pointdg/pointcloud.hpp"

namespace pointdg {

// Five parametric shape families across four fixed domain shifts:
//   D0 clean dense, D1 half-space occlusion, D2 additive Gaussian noise,
//   D3 non-uniform density biased toward one octant.
// All domains share the same per-index base sample, so cross-domain pairs of
// one sample_id differ only by the domain transform.
inline const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> names = {"box", "chair_frame", "pole_with_shade",
                                                   "rounded_slab", "plane_on_legs"};
    return names;
}

inline const std::vector<std::string>& synthetic_domain_names() {
    static const std::vector<std::string> names = {"D0", "D1", "D2", "D3"};
    return names;
}

inline constexpr double kNoiseSigma = 0.03;

struct SynthConfig {
    std::uint64_t seed = 7;
    int train_per_class = 200;
    int test_per_class = 40;
    int points = 1024;
    bool force = false;
};

void generate_synthetic_benchmark(const std::string& root, const SynthConfig& cfg);

// Exposed for verification: the shared base sample and the D1 cutting plane.
std::vector<Point3> synthetic_base_cloud(std::uint64_t seed, const std::string& split,
                                         int class_id, int index, int n_points);

struct OcclusionPlane {
    Point3 normal;
    double cutoff;         // points with dot(normal, p) <= cutoff are kept
    double keep_fraction;  // in [0.6, 0.85]
};
OcclusionPlane synthetic_occlusion_plane(std::uint64_t seed, const std::string& split,
                                         int class_id, int index, int n_points);

// One domain-transformed cloud, identical to what gen-data writes to disk.
std::vector<Point3> synthetic_cloud(std::uint64_t seed, int domain_id, const std::string& split,
                                    int class_id, int index, int n_points);

}  // namespace pointdg
