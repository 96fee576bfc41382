#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pointdg/rng.hpp"

namespace pointdg {

using Point3 = std::array<double, 3>;

struct PointCloud {
    std::vector<Point3> points;
    int class_id = -1;
    int domain_id = -1;
    std::string sample_id;
};

struct DomainDataset {
    std::vector<PointCloud> clouds;  // ordered by sample_id
    int domain_id = -1;
    std::string domain_name;
    std::string split;  // "train" | "test"
    std::vector<std::int64_t> class_counts;
};

struct BenchmarkManifest {
    std::uint64_t generator_seed = 0;
    std::vector<std::string> domains;
    std::vector<std::string> classes;
    int train_per_class = 0;
    int test_per_class = 0;
    int points_per_cloud = 0;
};

struct LoadResult {
    BenchmarkManifest manifest;
    std::vector<DomainDataset> datasets;  // one per (domain, split), domain-major
    std::vector<std::string> warnings;
};

BenchmarkManifest read_manifest(const std::string& root);
LoadResult load_dataset(const std::string& root);

// Centroid to origin, max norm to 1; clipped Gaussian jitter in train mode.
PointCloud normalize_and_jitter(const PointCloud& cloud, bool train, double jitter_sigma,
                                Rng* rng, double jitter_clip = 0.05);

// Mixup over greedy nearest-neighbor point pairs; labels blend on the simplex.
struct MixResult {
    PointCloud cloud;
    std::vector<double> soft_label;
};
MixResult pointmix(const PointCloud& a, const PointCloud& b, double lambda,
                   const std::vector<double>& label_a, const std::vector<double>& label_b);

// Per-domain pool of same-split clouds feeding the balanced index plan.
struct DomainPool {
    int domain_id = -1;
    std::string domain_name;
    std::vector<const PointCloud*> clouds;
};

struct IndexPlan {
    int num_classes = 0;
    // plan[c][p] = indices into pools[p].clouds, all length max_count[c]
    // (empty when class c is absent from pool p).
    std::vector<std::vector<std::vector<int>>> plan;
    std::vector<int> max_count;                     // M_c per class
    std::vector<std::vector<int>> participating;    // pool indexes carrying class c
    std::vector<std::string> warnings;
};

// Upsample every (class, domain) pool to the class-wise max count so each
// sample has a same-class partner in every other participating domain.
IndexPlan balanced_resample(const std::vector<DomainPool>& pools, int num_classes,
                            std::uint64_t seed);

// Dataset fingerprint: SHA-256 over manifest and every cloud file, path-sorted.
std::string dataset_hash(const std::string& root);

}  // namespace pointdg
