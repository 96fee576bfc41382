#include "pointdg/pointcloud.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "pointdg/sha256.hpp"

namespace fs = std::filesystem;

namespace pointdg {

namespace {

double parse_coord(std::string_view tok, const std::string& file) {
    double v = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
        throw std::runtime_error("parse error in " + file + ": bad coordinate '" +
                                 std::string(tok) + "'");
    if (!std::isfinite(v))
        throw std::runtime_error("parse error in " + file + ": non-finite coordinate '" +
                                 std::string(tok) + "'");
    return v;
}

std::vector<Point3> read_xyz(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open point file " + path);
    std::vector<Point3> pts;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        Point3 p;
        std::size_t pos = 0;
        for (int k = 0; k < 3; ++k) {
            const std::size_t next = k < 2 ? line.find(' ', pos) : line.size();
            if (next == std::string::npos)
                throw std::runtime_error("parse error in " + path + ": expected 3 coordinates");
            p[static_cast<std::size_t>(k)] = parse_coord(
                std::string_view(line).substr(pos, next - pos), path);
            pos = next + 1;
        }
        pts.push_back(p);
    }
    return pts;
}

}  // namespace

BenchmarkManifest read_manifest(const std::string& root) {
    const std::string path = root + "/manifest.json";
    std::ifstream is(path);
    if (!is) throw std::runtime_error("dataset format error: missing manifest " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("dataset format error: bad manifest " + path + ": " + e.what());
    }
    BenchmarkManifest m;
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    m.domains = j.at("domains").get<std::vector<std::string>>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.train_per_class = j.at("counts").at("train").get<int>();
    m.test_per_class = j.at("counts").at("test").get<int>();
    m.points_per_cloud = j.at("points_per_cloud").get<int>();
    return m;
}

LoadResult load_dataset(const std::string& root) {
    LoadResult out;
    out.manifest = read_manifest(root);
    const auto& m = out.manifest;
    const std::vector<std::string> splits = {"train", "test"};
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
        for (const auto& split : splits) {
            DomainDataset ds;
            ds.domain_id = static_cast<int>(d);
            ds.domain_name = m.domains[d];
            ds.split = split;
            ds.class_counts.assign(m.classes.size(), 0);
            for (std::size_t c = 0; c < m.classes.size(); ++c) {
                const fs::path dir = fs::path(root) / m.domains[d] / split / m.classes[c];
                if (!fs::exists(dir)) {
                    out.warnings.push_back("empty class directory: " + dir.string());
                    continue;
                }
                std::vector<std::string> files;
                for (const auto& e : fs::directory_iterator(dir))
                    if (e.path().extension() == ".xyz") files.push_back(e.path().string());
                if (files.empty())
                    out.warnings.push_back("empty class directory: " + dir.string());
                std::sort(files.begin(), files.end());
                for (const auto& f : files) {
                    PointCloud pc;
                    pc.points = read_xyz(f);
                    pc.class_id = static_cast<int>(c);
                    pc.domain_id = static_cast<int>(d);
                    pc.sample_id = fs::path(f).stem().string();
                    if (pc.points.size() < 64)
                        throw std::runtime_error("rejected sample " + pc.sample_id + ": only " +
                                                 std::to_string(pc.points.size()) +
                                                 " points (minimum 64)");
                    ds.clouds.push_back(std::move(pc));
                    ++ds.class_counts[c];
                }
            }
            std::sort(ds.clouds.begin(), ds.clouds.end(),
                      [](const PointCloud& a, const PointCloud& b) {
                          return a.sample_id < b.sample_id;
                      });
            out.datasets.push_back(std::move(ds));
        }
    }
    return out;
}

PointCloud normalize_and_jitter(const PointCloud& cloud, bool train, double jitter_sigma,
                                Rng* rng, double jitter_clip) {
    if (jitter_sigma < 0.0) throw std::invalid_argument("normalize_and_jitter: jitter_sigma < 0");
    PointCloud out = cloud;
    const std::size_t n = out.points.size();
    if (n == 0) throw std::runtime_error("normalization error: empty cloud " + cloud.sample_id);
    Point3 centroid = {0, 0, 0};
    for (const auto& p : out.points)
        for (int k = 0; k < 3; ++k) centroid[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)];
    for (int k = 0; k < 3; ++k) centroid[static_cast<std::size_t>(k)] /= static_cast<double>(n);
    double max_norm = 0.0;
    for (auto& p : out.points) {
        double sq = 0.0;
        for (int k = 0; k < 3; ++k) {
            p[static_cast<std::size_t>(k)] -= centroid[static_cast<std::size_t>(k)];
            sq += p[static_cast<std::size_t>(k)] * p[static_cast<std::size_t>(k)];
        }
        max_norm = std::max(max_norm, std::sqrt(sq));
    }
    if (max_norm < 1e-12)
        throw std::runtime_error("normalization error: degenerate cloud " + cloud.sample_id);
    const double inv = 1.0 / max_norm;
    for (auto& p : out.points)
        for (int k = 0; k < 3; ++k) p[static_cast<std::size_t>(k)] *= inv;
    if (train && jitter_sigma > 0.0) {
        if (!rng) throw std::invalid_argument("normalize_and_jitter: train mode needs an rng");
        for (auto& p : out.points)
            for (int k = 0; k < 3; ++k) {
                double j = rng->gauss() * jitter_sigma;
                j = std::clamp(j, -jitter_clip, jitter_clip);
                p[static_cast<std::size_t>(k)] += j;
            }
    }
    return out;
}

MixResult pointmix(const PointCloud& a, const PointCloud& b, double lambda,
                   const std::vector<double>& label_a, const std::vector<double>& label_b) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("pointmix: lambda outside [0,1]");
    if (label_a.size() != label_b.size())
        throw std::invalid_argument("pointmix: label length mismatch");
    const std::size_t n = a.points.size();
    // resample b to a's point count, never error
    std::vector<Point3> bp(n);
    for (std::size_t i = 0; i < n; ++i)
        bp[i] = b.points[i * b.points.size() / n];

    // greedy nearest-neighbor assignment from a to b (bijection, ties by index)
    std::vector<char> used(n, 0);
    MixResult out;
    out.cloud.points.resize(n);
    out.cloud.class_id = a.class_id;
    out.cloud.domain_id = a.domain_id;
    out.cloud.sample_id = a.sample_id;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bj = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (used[j]) continue;
            const double dx = a.points[i][0] - bp[j][0];
            const double dy = a.points[i][1] - bp[j][1];
            const double dz = a.points[i][2] - bp[j][2];
            const double d = dx * dx + dy * dy + dz * dz;
            if (d < best) {
                best = d;
                bj = j;
            }
        }
        used[bj] = 1;
        for (int k = 0; k < 3; ++k)
            out.cloud.points[i][static_cast<std::size_t>(k)] =
                lambda * a.points[i][static_cast<std::size_t>(k)] +
                (1.0 - lambda) * bp[bj][static_cast<std::size_t>(k)];
    }
    out.soft_label.resize(label_a.size());
    for (std::size_t c = 0; c < label_a.size(); ++c)
        out.soft_label[c] = lambda * label_a[c] + (1.0 - lambda) * label_b[c];
    return out;
}

IndexPlan balanced_resample(const std::vector<DomainPool>& pools, int num_classes,
                            std::uint64_t seed) {
    if (pools.size() < 2)
        throw std::runtime_error("protocol error: balanced_resample needs >= 2 source domains");
    IndexPlan plan;
    plan.num_classes = num_classes;
    plan.plan.assign(static_cast<std::size_t>(num_classes), {});
    plan.max_count.assign(static_cast<std::size_t>(num_classes), 0);
    plan.participating.assign(static_cast<std::size_t>(num_classes), {});

    // per (class, pool): indices of that class
    std::vector<std::vector<std::vector<int>>> by_class(static_cast<std::size_t>(num_classes));
    for (auto& v : by_class) v.assign(pools.size(), {});
    for (std::size_t p = 0; p < pools.size(); ++p)
        for (std::size_t i = 0; i < pools[p].clouds.size(); ++i) {
            const int c = pools[p].clouds[i]->class_id;
            if (c < 0 || c >= num_classes)
                throw std::runtime_error("balanced_resample: class id " + std::to_string(c) +
                                         " out of range");
            by_class[static_cast<std::size_t>(c)][p].push_back(static_cast<int>(i));
        }

    Rng rng = Rng(seed).fork(0xba1a);
    for (int c = 0; c < num_classes; ++c) {
        int mc = 0;
        for (std::size_t p = 0; p < pools.size(); ++p)
            mc = std::max(mc, static_cast<int>(by_class[static_cast<std::size_t>(c)][p].size()));
        if (mc == 0)
            throw std::runtime_error("protocol error: class " + std::to_string(c) +
                                     " absent from every source domain");
        plan.max_count[static_cast<std::size_t>(c)] = mc;
        plan.plan[static_cast<std::size_t>(c)].assign(pools.size(), {});
        for (std::size_t p = 0; p < pools.size(); ++p) {
            const auto& have = by_class[static_cast<std::size_t>(c)][p];
            if (have.empty()) {
                plan.warnings.push_back("class " + std::to_string(c) + " absent from domain " +
                                        pools[p].domain_name + "; excluded from pairing");
                continue;
            }
            plan.participating[static_cast<std::size_t>(c)].push_back(static_cast<int>(p));
            auto& rows = plan.plan[static_cast<std::size_t>(c)][p];
            rows = have;  // keep all original samples
            Rng r = rng.fork(static_cast<std::uint64_t>(c), p);
            while (static_cast<int>(rows.size()) < mc)
                rows.push_back(have[static_cast<std::size_t>(r.below(have.size()))]);
        }
    }
    return plan;
}

std::string dataset_hash(const std::string& root) {
    std::vector<std::string> files;
    files.push_back(root + "/manifest.json");
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ".xyz")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& f : files) {
        h.update(fs::path(f).lexically_relative(root).generic_string());
        std::ifstream is(f, std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        const std::string body = ss.str();
        h.update(body);
    }
    return h.hex_digest();
}

}  // namespace pointdg
