#include "pointdg/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;

namespace pointdg {

namespace {

constexpr std::uint64_t kTagBase = 1;
constexpr std::uint64_t kTagOcclusion = 2;
constexpr std::uint64_t kTagNoise = 3;
constexpr std::uint64_t kTagDensity = 4;

int split_index(const std::string& split) {
    if (split == "train") return 0;
    if (split == "test") return 1;
    throw std::invalid_argument("unknown split '" + split + "'");
}

Rng stream_for(std::uint64_t seed, std::uint64_t tag, const std::string& split, int class_id,
               int index) {
    return Rng(seed)
        .fork(tag, static_cast<std::uint64_t>(split_index(split)))
        .fork(static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(index));
}

// ---- surface samplers -------------------------------------------------------

Point3 sample_box(Rng& rng, const Point3& center, const Point3& half) {
    // face picked by area, uniform inside the face
    const double ax = half[1] * half[2], ay = half[0] * half[2], az = half[0] * half[1];
    const double total = 2.0 * (ax + ay + az);
    double u = rng.uniform() * total;
    int axis;
    double sign;
    if (u < 2 * ax) {
        axis = 0;
        sign = u < ax ? 1.0 : -1.0;
    } else if (u < 2 * ax + 2 * ay) {
        axis = 1;
        sign = (u - 2 * ax) < ay ? 1.0 : -1.0;
    } else {
        axis = 2;
        sign = (u - 2 * ax - 2 * ay) < az ? 1.0 : -1.0;
    }
    Point3 p;
    for (int k = 0; k < 3; ++k)
        p[static_cast<std::size_t>(k)] =
            rng.uniform(-half[static_cast<std::size_t>(k)], half[static_cast<std::size_t>(k)]);
    p[static_cast<std::size_t>(axis)] = sign * half[static_cast<std::size_t>(axis)];
    for (int k = 0; k < 3; ++k) p[static_cast<std::size_t>(k)] += center[static_cast<std::size_t>(k)];
    return p;
}

Point3 sample_tube(Rng& rng, const Point3& base, double r0, double r1, double height) {
    // lateral surface of a (truncated) cone standing on `base`
    const double t = rng.uniform();
    const double r = r0 + (r1 - r0) * t;
    const double phi = rng.uniform() * 6.283185307179586;
    return {base[0] + r * std::cos(phi), base[1] + r * std::sin(phi), base[2] + height * t};
}

Point3 sample_disk(Rng& rng, const Point3& center, double radius) {
    const double r = radius * std::sqrt(rng.uniform());
    const double phi = rng.uniform() * 6.283185307179586;
    return {center[0] + r * std::cos(phi), center[1] + r * std::sin(phi), center[2]};
}

Point3 sample_ellipsoid(Rng& rng, const Point3& center, const Point3& semi) {
    double x, y, z, n2;
    do {
        x = rng.gauss();
        y = rng.gauss();
        z = rng.gauss();
        n2 = x * x + y * y + z * z;
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    return {center[0] + semi[0] * x * inv, center[1] + semi[1] * y * inv,
            center[2] + semi[2] * z * inv};
}

void rotate_z(Point3& p, double c, double s) {
    const double x = p[0] * c - p[1] * s;
    const double y = p[0] * s + p[1] * c;
    p[0] = x;
    p[1] = y;
}

struct Part {
    double weight;
    std::function<Point3(Rng&)> sample;
};

std::vector<Point3> sample_parts(Rng& rng, const std::vector<Part>& parts, int n) {
    double total = 0.0;
    for (const auto& p : parts) total += p.weight;
    std::vector<Point3> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform() * total;
        std::size_t pi = 0;
        while (pi + 1 < parts.size() && u >= parts[pi].weight) {
            u -= parts[pi].weight;
            ++pi;
        }
        out.push_back(parts[pi].sample(rng));
    }
    return out;
}

std::vector<Point3> make_box(Rng& rng, int n) {
    const Point3 half = {rng.uniform(0.25, 0.40), rng.uniform(0.20, 0.35), rng.uniform(0.35, 0.50)};
    std::vector<Part> parts = {{1.0, [&](Rng& r) { return sample_box(r, {0, 0, 0}, half); }}};
    return sample_parts(rng, parts, n);
}

std::vector<Point3> make_chair_frame(Rng& rng, int n) {
    const double hx = rng.uniform(0.24, 0.32), hy = rng.uniform(0.22, 0.30);
    const double seat_z = rng.uniform(-0.05, 0.05);
    const double back_h = rng.uniform(0.24, 0.32);
    const double leg = rng.uniform(0.020, 0.032);
    const Point3 seat_half = {hx, hy, 0.03};
    const Point3 back_half = {hx, 0.03, back_h};
    std::vector<Part> parts;
    parts.push_back({0.32, [=](Rng& r) { return sample_box(r, {0, 0, seat_z}, seat_half); }});
    parts.push_back({0.28, [=](Rng& r) {
                         return sample_box(r, {0, -hy, seat_z + 0.03 + back_h}, back_half);
                     }});
    const double leg_h = 0.23;
    for (const double sx : {-1.0, 1.0})
        for (const double sy : {-1.0, 1.0})
            parts.push_back({0.10, [=](Rng& r) {
                                 return sample_box(r,
                                                   {sx * (hx - 0.05), sy * (hy - 0.05),
                                                    seat_z - 0.03 - leg_h},
                                                   {leg, leg, leg_h});
                             }});
    return sample_parts(rng, parts, n);
}

std::vector<Point3> make_pole_with_shade(Rng& rng, int n) {
    const double pole_r = rng.uniform(0.02, 0.04);
    const double shade_top = rng.uniform(0.08, 0.12);
    const double shade_bot = rng.uniform(0.20, 0.30);
    const double base_r = rng.uniform(0.12, 0.18);
    std::vector<Part> parts = {
        {0.35, [=](Rng& r) { return sample_tube(r, {0, 0, -0.5}, pole_r, pole_r, 0.75); }},
        {0.45, [=](Rng& r) { return sample_tube(r, {0, 0, 0.25}, shade_bot, shade_top, 0.25); }},
        {0.20, [=](Rng& r) { return sample_disk(r, {0, 0, -0.5}, base_r); }}};
    return sample_parts(rng, parts, n);
}

std::vector<Point3> make_rounded_slab(Rng& rng, int n) {
    const Point3 semi = {rng.uniform(0.40, 0.50), rng.uniform(0.28, 0.38), rng.uniform(0.16, 0.24)};
    std::vector<Part> parts = {{1.0, [&](Rng& r) { return sample_ellipsoid(r, {0, 0, 0}, semi); }}};
    return sample_parts(rng, parts, n);
}

std::vector<Point3> make_plane_on_legs(Rng& rng, int n) {
    const double hx = rng.uniform(0.36, 0.47), hy = rng.uniform(0.26, 0.35);
    const double top_z = rng.uniform(0.24, 0.32);
    const double leg = rng.uniform(0.016, 0.026);
    const Point3 top_half = {hx, hy, 0.02};
    std::vector<Part> parts;
    parts.push_back({0.55, [=](Rng& r) { return sample_box(r, {0, 0, top_z}, top_half); }});
    const double leg_h = top_z / 2.0 + 0.23;
    for (const double sx : {-1.0, 1.0})
        for (const double sy : {-1.0, 1.0})
            parts.push_back({0.1125, [=](Rng& r) {
                                 return sample_box(r,
                                                   {sx * (hx - 0.05), sy * (hy - 0.05),
                                                    top_z - 0.02 - leg_h},
                                                   {leg, leg, leg_h});
                             }});
    return sample_parts(rng, parts, n);
}

}  // namespace

std::vector<Point3> synthetic_base_cloud(std::uint64_t seed, const std::string& split,
                                         int class_id, int index, int n_points) {
    Rng rng = stream_for(seed, kTagBase, split, class_id, index);
    std::vector<Point3> pts;
    switch (class_id) {
        case 0: pts = make_box(rng, n_points); break;
        case 1: pts = make_chair_frame(rng, n_points); break;
        case 2: pts = make_pole_with_shade(rng, n_points); break;
        case 3: pts = make_rounded_slab(rng, n_points); break;
        case 4: pts = make_plane_on_legs(rng, n_points); break;
        default: throw std::invalid_argument("class id out of range");
    }
    // mild pose/scale jitter shared across domains
    const double theta = rng.uniform(-0.26, 0.26);
    const double c = std::cos(theta), s = std::sin(theta);
    const double sc = rng.uniform(0.9, 1.1);
    for (auto& p : pts) {
        rotate_z(p, c, s);
        for (int k = 0; k < 3; ++k) p[static_cast<std::size_t>(k)] *= sc;
    }
    return pts;
}

OcclusionPlane synthetic_occlusion_plane(std::uint64_t seed, const std::string& split,
                                         int class_id, int index, int n_points) {
    const std::vector<Point3> base = synthetic_base_cloud(seed, split, class_id, index, n_points);
    Rng rng = stream_for(seed, kTagOcclusion, split, class_id, index);
    Point3 nrm;
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (int k = 0; k < 3; ++k) {
            nrm[static_cast<std::size_t>(k)] = rng.gauss();
            n2 += nrm[static_cast<std::size_t>(k)] * nrm[static_cast<std::size_t>(k)];
        }
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    for (int k = 0; k < 3; ++k) nrm[static_cast<std::size_t>(k)] *= inv;
    const double q = rng.uniform(0.60, 0.85);
    std::vector<double> dots(base.size());
    for (std::size_t i = 0; i < base.size(); ++i)
        dots[i] = nrm[0] * base[i][0] + nrm[1] * base[i][1] + nrm[2] * base[i][2];
    const std::size_t kth =
        std::min(base.size() - 1,
                 static_cast<std::size_t>(std::ceil(q * static_cast<double>(base.size()))) - 1);
    std::vector<double> sorted = dots;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kth), sorted.end());
    return {nrm, sorted[kth], q};
}

std::vector<Point3> synthetic_cloud(std::uint64_t seed, int domain_id, const std::string& split,
                                    int class_id, int index, int n_points) {
    std::vector<Point3> base = synthetic_base_cloud(seed, split, class_id, index, n_points);
    switch (domain_id) {
        case 0:
            return base;
        case 1: {  // half-space occlusion, resampled back to n_points
            const OcclusionPlane pl =
                synthetic_occlusion_plane(seed, split, class_id, index, n_points);
            std::vector<Point3> kept;
            for (const auto& p : base)
                if (pl.normal[0] * p[0] + pl.normal[1] * p[1] + pl.normal[2] * p[2] <= pl.cutoff)
                    kept.push_back(p);
            Rng rng = stream_for(seed, kTagOcclusion, split, class_id, index).fork(0x5e1ec7);
            std::vector<Point3> out;
            out.reserve(static_cast<std::size_t>(n_points));
            for (int i = 0; i < n_points; ++i)
                out.push_back(kept[static_cast<std::size_t>(rng.below(kept.size()))]);
            return out;
        }
        case 2: {  // additive Gaussian noise
            Rng rng = stream_for(seed, kTagNoise, split, class_id, index);
            for (auto& p : base)
                for (int k = 0; k < 3; ++k)
                    p[static_cast<std::size_t>(k)] += kNoiseSigma * rng.gauss();
            return base;
        }
        case 3: {  // density biased toward one octant (relative to the centroid)
            Rng rng = stream_for(seed, kTagDensity, split, class_id, index);
            const std::uint64_t octant = rng.below(8);
            Point3 centroid = {0, 0, 0};
            for (const auto& p : base)
                for (int k = 0; k < 3; ++k)
                    centroid[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)];
            for (int k = 0; k < 3; ++k)
                centroid[static_cast<std::size_t>(k)] /= static_cast<double>(base.size());
            std::vector<double> cum(base.size());
            double total = 0.0;
            for (std::size_t i = 0; i < base.size(); ++i) {
                std::uint64_t code = 0;
                for (int k = 0; k < 3; ++k)
                    if (base[i][static_cast<std::size_t>(k)] >=
                        centroid[static_cast<std::size_t>(k)])
                        code |= (1ull << k);
                total += (code == octant) ? 6.0 : 1.0;
                cum[i] = total;
            }
            std::vector<Point3> out;
            out.reserve(static_cast<std::size_t>(n_points));
            for (int i = 0; i < n_points; ++i) {
                const double u = rng.uniform() * total;
                const auto it = std::upper_bound(cum.begin(), cum.end(), u);
                const std::size_t idx =
                    std::min(base.size() - 1,
                             static_cast<std::size_t>(std::distance(cum.begin(), it)));
                out.push_back(base[idx]);
            }
            return out;
        }
        default:
            throw std::invalid_argument("domain id out of range");
    }
}

namespace {

void write_xyz(const fs::path& path, const std::vector<Point3>& pts) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    char buf[32];
    std::string line;
    for (const auto& p : pts) {
        line.clear();
        for (int k = 0; k < 3; ++k) {
            const auto res = std::to_chars(buf, buf + sizeof(buf), p[static_cast<std::size_t>(k)]);
            line.append(buf, res.ptr);
            line.push_back(k < 2 ? ' ' : '\n');
        }
        os.write(line.data(), static_cast<std::streamsize>(line.size()));
    }
}

}  // namespace

void generate_synthetic_benchmark(const std::string& root, const SynthConfig& cfg) {
    const fs::path rootp(root);
    if (fs::exists(rootp) && !fs::is_empty(rootp) && !cfg.force)
        throw std::runtime_error("output directory " + root +
                                 " is not empty; pass --force to overwrite");
    fs::create_directories(rootp);

    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["generator_seed"] = cfg.seed;
    manifest["domains"] = synthetic_domain_names();
    manifest["classes"] = synthetic_class_names();
    manifest["counts"] = {{"train", cfg.train_per_class}, {"test", cfg.test_per_class}};
    manifest["points_per_cloud"] = cfg.points;
    {
        std::ofstream os(rootp / "manifest.json", std::ios::binary | std::ios::trunc);
        os << manifest.dump(2) << "\n";
    }

    const auto& domains = synthetic_domain_names();
    const auto& classes = synthetic_class_names();
    for (std::size_t d = 0; d < domains.size(); ++d)
        for (const std::string split : {"train", "test"}) {
            const int count = split == "train" ? cfg.train_per_class : cfg.test_per_class;
            for (std::size_t c = 0; c < classes.size(); ++c) {
                const fs::path dir = rootp / domains[d] / split / classes[c];
                fs::create_directories(dir);
                for (int i = 0; i < count; ++i) {
                    char idx[8];
                    std::snprintf(idx, sizeof(idx), "%04d", i);
                    const std::string stem =
                        domains[d] + "_" + split + "_" + classes[c] + "_" + idx;
                    write_xyz(dir / (stem + ".xyz"),
                              synthetic_cloud(cfg.seed, static_cast<int>(d), split,
                                              static_cast<int>(c), i, cfg.points));
                }
            }
        }
}

}  // namespace pointdg
