#pragma once

// Synthetic city generation and preprocessing: sliding-window cell slicing,
// stuff clustering, sparse-cell rejection, and query sampling. Everything here
// is a pure function of (config, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "retloc/errors.hpp"
#include "retloc/language.hpp"
#include "retloc/random.hpp"
#include "retloc/scene.hpp"

namespace retloc {

struct SceneConfig {
    double width = 200.0;
    double height = 200.0;
    // Expected object counts per hectare (100 m × 100 m). The generator places
    // round(density · area) instances of each kind.
    double buildings_per_ha = 12.0;
    double poles_per_ha = 14.0;
    double signs_per_ha = 11.0;
    double cars_per_ha = 11.0;
    double bins_per_ha = 9.0;
    double terrain_per_ha = 10.0;
    double vegetation_per_ha = 8.0;
    double road_spacing = 90.0;  // one road strip per ~90 m per axis
    double color_jitter = 0.02;

    double area_ha() const { return width * height / 1e4; }

    void validate() const {
        if (width < 60.0 || height < 60.0)
            throw ConfigError("scene bounds must be at least 60x60 m, got " +
                              std::to_string(width) + "x" + std::to_string(height));
    }
};

struct QuerySample {
    Vec2 target{};
    std::vector<Hint> hints;
    std::vector<int> gt_instance_ids;      // one per hint
    std::vector<int> positive_cell_ids;    // retained cells whose footprint holds the target
};

namespace synth_detail {

inline Vec3 jittered_color(Rng& rng, const std::string& palette_name, double sigma) {
    const Vec3* base = lang::palette_rgb(palette_name);
    auto clamp01 = [](double v) { return std::min(1.0, std::max(0.0, v)); };
    return {clamp01(base->x + rng.normal(0.0, sigma)),
            clamp01(base->y + rng.normal(0.0, sigma)),
            clamp01(base->z + rng.normal(0.0, sigma))};
}

inline const std::vector<std::string>& class_colors(ClassLabel c) {
    static const std::map<ClassLabel, std::vector<std::string>> table = {
        {ClassLabel::Building, {"gray", "beige", "brown", "white"}},
        {ClassLabel::Pole, {"gray", "black"}},
        {ClassLabel::TrafficSign, {"red", "yellow", "blue"}},
        {ClassLabel::Car, {"red", "blue", "white", "black", "gray"}},
        {ClassLabel::TrashBin, {"green", "blue", "gray"}},
        {ClassLabel::Terrain, {"dark-green", "green", "brown"}},
        {ClassLabel::Road, {"gray", "black"}},
        {ClassLabel::Vegetation, {"dark-green", "green"}},
    };
    return table.at(c);
}

inline Vec3 pick_color(Rng& rng, ClassLabel c, double sigma) {
    const auto& names = class_colors(c);
    return jittered_color(rng, names[rng.index(names.size())], sigma);
}

/// Uniform sample on the surface of an axis-aligned box (4 walls + roof),
/// rotated by yaw about the footprint center, grounded at z = 0.
inline std::vector<ScenePoint> box_surface(Rng& rng, Vec2 center, double w,
                                           double l, double h, double yaw,
                                           Vec3 color, std::size_t n,
                                           double noise) {
    const double areas[5] = {w * h, w * h, l * h, l * h, w * l};
    double total = 0.0;
    for (double a : areas) total += a;
    std::vector<ScenePoint> pts;
    pts.reserve(n);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    for (std::size_t i = 0; i < n; ++i) {
        double pick = rng.uniform(0.0, total);
        int face = 0;
        while (face < 4 && pick > areas[face]) {
            pick -= areas[face];
            ++face;
        }
        double lx, ly, lz;
        switch (face) {
            case 0: lx = rng.uniform(-w / 2, w / 2); ly = -l / 2; lz = rng.uniform(0, h); break;
            case 1: lx = rng.uniform(-w / 2, w / 2); ly = l / 2;  lz = rng.uniform(0, h); break;
            case 2: lx = -w / 2; ly = rng.uniform(-l / 2, l / 2); lz = rng.uniform(0, h); break;
            case 3: lx = w / 2;  ly = rng.uniform(-l / 2, l / 2); lz = rng.uniform(0, h); break;
            default: lx = rng.uniform(-w / 2, w / 2); ly = rng.uniform(-l / 2, l / 2); lz = h; break;
        }
        lx += rng.normal(0.0, noise);
        ly += rng.normal(0.0, noise);
        lz += rng.normal(0.0, noise);
        pts.push_back({center.x + lx * cy - ly * sy, center.y + lx * sy + ly * cy,
                       std::max(0.0, lz), color.x, color.y, color.z});
    }
    return pts;
}

inline std::vector<ScenePoint> ground_disc(Rng& rng, Vec2 center, double radius,
                                           Vec3 color, double density) {
    const double area = 3.14159265358979323846 * radius * radius;
    const std::size_t n = std::max<std::size_t>(
        12, static_cast<std::size_t>(std::lround(area * density)));
    std::vector<ScenePoint> pts;
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = radius * std::sqrt(rng.uniform());
        const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        pts.push_back({center.x + r * std::cos(a), center.y + r * std::sin(a),
                       std::fabs(rng.normal(0.0, 0.04)), color.x, color.y, color.z});
    }
    return pts;
}

}  // namespace synth_detail

/// Builds the synthetic city. Deterministic for a fixed (config, seed): thing
/// instances are compact blobs with class-typical colors, stuff instances are
/// large ground patches and road strips that span many cells.
inline Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Scene scene;
    scene.bounds_min = {0.0, 0.0};
    scene.bounds_max = {config.width, config.height};
    scene.rng_seed = seed;

    const double W = config.width, H = config.height;
    const double sigma = config.color_jitter;
    int next_id = 0;
    auto count_of = [&](double per_ha) {
        return static_cast<std::size_t>(std::lround(per_ha * config.area_ha()));
    };
    auto add = [&](ClassLabel cl, std::vector<ScenePoint> pts) {
        if (pts.size() < 8) return;  // degenerate draws are skipped
        scene.instances.push_back(Instance::make(next_id++, cl, std::move(pts)));
    };

    // Roads first: straight strips spanning the scene in both directions.
    const int n_road_x = std::max(1, static_cast<int>(std::lround(H / config.road_spacing)));
    const int n_road_y = std::max(1, static_cast<int>(std::lround(W / config.road_spacing)));
    for (int i = 0; i < n_road_x; ++i) {
        const double yc = (i + 0.5) * H / n_road_x + rng.uniform(-6.0, 6.0);
        const double half = rng.uniform(3.0, 4.5);
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Road, sigma);
        const std::size_t n = static_cast<std::size_t>(W * 2.0 * half * 0.12);
        std::vector<ScenePoint> pts;
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k)
            pts.push_back({rng.uniform(0.0, W), yc + rng.uniform(-half, half),
                           std::fabs(rng.normal(0.0, 0.03)), color.x, color.y, color.z});
        add(ClassLabel::Road, std::move(pts));
    }
    for (int i = 0; i < n_road_y; ++i) {
        const double xc = (i + 0.5) * W / n_road_y + rng.uniform(-6.0, 6.0);
        const double half = rng.uniform(3.0, 4.5);
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Road, sigma);
        const std::size_t n = static_cast<std::size_t>(H * 2.0 * half * 0.12);
        std::vector<ScenePoint> pts;
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k)
            pts.push_back({xc + rng.uniform(-half, half), rng.uniform(0.0, H),
                           std::fabs(rng.normal(0.0, 0.03)), color.x, color.y, color.z});
        add(ClassLabel::Road, std::move(pts));
    }

    // Terrain patches: disjoint ground discs; region growing later splits any
    // accidental multi-blob instance into its connected pieces.
    for (std::size_t i = 0; i < count_of(config.terrain_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Terrain, sigma);
        add(ClassLabel::Terrain,
            synth_detail::ground_disc(rng, c, rng.uniform(4.0, 9.0), color, 0.6));
    }

    for (std::size_t i = 0; i < count_of(config.vegetation_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Vegetation, sigma);
        const double r = rng.uniform(1.2, 3.0);
        const std::size_t n = 20 + rng.index(40);
        std::vector<ScenePoint> pts;
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double rr = r * std::cbrt(rng.uniform());
            const double zz = r + rr * (rng.uniform() - 0.3);
            pts.push_back({c.x + rr * std::cos(a), c.y + rr * std::sin(a),
                           std::max(0.1, zz), color.x, color.y, color.z});
        }
        add(ClassLabel::Vegetation, std::move(pts));
    }

    for (std::size_t i = 0; i < count_of(config.buildings_per_ha); ++i) {
        Vec2 c{rng.uniform(8.0, W - 8.0), rng.uniform(8.0, H - 8.0)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Building, sigma);
        add(ClassLabel::Building,
            synth_detail::box_surface(rng, c, rng.uniform(8.0, 16.0),
                                      rng.uniform(8.0, 16.0), rng.uniform(6.0, 18.0),
                                      rng.uniform(0.0, 3.14159), color,
                                      120 + rng.index(100), 0.05));
    }

    for (std::size_t i = 0; i < count_of(config.poles_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Pole, sigma);
        const double h = rng.uniform(4.0, 8.0);
        const std::size_t n = 10 + rng.index(14);
        std::vector<ScenePoint> pts;
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k)
            pts.push_back({c.x + rng.normal(0.0, 0.05), c.y + rng.normal(0.0, 0.05),
                           rng.uniform(0.0, h), color.x, color.y, color.z});
        add(ClassLabel::Pole, std::move(pts));
    }

    for (std::size_t i = 0; i < count_of(config.signs_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::TrafficSign, sigma);
        const double mast = rng.uniform(2.5, 3.5);
        const std::size_t n = 12 + rng.index(16);
        std::vector<ScenePoint> pts;
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            if (rng.coin(0.6)) {  // plate
                const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
                const double r = 0.4 * std::sqrt(rng.uniform());
                pts.push_back({c.x + r * std::cos(a), c.y + rng.normal(0.0, 0.02),
                               mast + r * std::sin(a), color.x, color.y, color.z});
            } else {  // mast
                pts.push_back({c.x + rng.normal(0.0, 0.03), c.y + rng.normal(0.0, 0.03),
                               rng.uniform(0.0, mast), color.x, color.y, color.z});
            }
        }
        add(ClassLabel::TrafficSign, std::move(pts));
    }

    for (std::size_t i = 0; i < count_of(config.cars_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::Car, sigma);
        add(ClassLabel::Car,
            synth_detail::box_surface(rng, c, 4.2, 1.8, 1.5,
                                      rng.uniform(0.0, 3.14159), color,
                                      40 + rng.index(50), 0.04));
    }

    for (std::size_t i = 0; i < count_of(config.bins_per_ha); ++i) {
        Vec2 c{rng.uniform(0.0, W), rng.uniform(0.0, H)};
        Vec3 color = synth_detail::pick_color(rng, ClassLabel::TrashBin, sigma);
        add(ClassLabel::TrashBin,
            synth_detail::box_surface(rng, c, 0.8, 0.8, 1.1,
                                      rng.uniform(0.0, 3.14159), color,
                                      10 + rng.index(14), 0.02));
    }

    // Clip everything to bounds (blob tails can poke out near the border).
    for (auto& inst : scene.instances) {
        for (auto& p : inst.points) {
            p.x = std::min(std::nextafter(W, 0.0), std::max(0.0, p.x));
            p.y = std::min(std::nextafter(H, 0.0), std::max(0.0, p.y));
        }
        inst.recompute_stats();
    }
    return scene;
}

/// Region growing on the 2D projection with a 2 m connectivity radius.
/// Splits every stuff instance into connected components; components smaller
/// than 8 points merge into the nearest surviving component. Thing instances
/// pass through untouched and keep their ids.
inline Scene cluster_stuff(const Scene& scene) {
    constexpr double kRadius = 2.0;
    Scene out;
    out.bounds_min = scene.bounds_min;
    out.bounds_max = scene.bounds_max;
    out.rng_seed = scene.rng_seed;

    int next_id = -1;
    for (const auto& inst : scene.instances) next_id = std::max(next_id, inst.id);
    ++next_id;

    for (const auto& inst : scene.instances) {
        if (!inst.is_stuff) {
            out.instances.push_back(inst);
            continue;
        }
        const auto& pts = inst.points;
        const std::size_t n = pts.size();

        // Bucket points on a kRadius grid, then BFS over bucket neighborhoods.
        std::map<std::pair<long, long>, std::vector<std::size_t>> buckets;
        auto key = [&](const ScenePoint& p) {
            return std::pair<long, long>(static_cast<long>(std::floor(p.x / kRadius)),
                                         static_cast<long>(std::floor(p.y / kRadius)));
        };
        for (std::size_t i = 0; i < n; ++i) buckets[key(pts[i])].push_back(i);

        std::vector<int> component(n, -1);
        int n_components = 0;
        std::vector<std::size_t> stack;
        for (std::size_t seed_pt = 0; seed_pt < n; ++seed_pt) {
            if (component[seed_pt] != -1) continue;
            const int comp = n_components++;
            component[seed_pt] = comp;
            stack.assign(1, seed_pt);
            while (!stack.empty()) {
                const std::size_t cur = stack.back();
                stack.pop_back();
                const auto [bx, by] = key(pts[cur]);
                for (long dx = -1; dx <= 1; ++dx)
                    for (long dy = -1; dy <= 1; ++dy) {
                        auto it = buckets.find({bx + dx, by + dy});
                        if (it == buckets.end()) continue;
                        for (std::size_t cand : it->second) {
                            if (component[cand] != -1) continue;
                            const double ddx = pts[cand].x - pts[cur].x;
                            const double ddy = pts[cand].y - pts[cur].y;
                            if (ddx * ddx + ddy * ddy <= kRadius * kRadius) {
                                component[cand] = comp;
                                stack.push_back(cand);
                            }
                        }
                    }
            }
        }

        std::vector<std::vector<std::size_t>> members(n_components);
        for (std::size_t i = 0; i < n; ++i) members[component[i]].push_back(i);

        // Merge undersized components into the nearest big one (by centroid).
        std::vector<Vec2> centroids(n_components);
        for (int c = 0; c < n_components; ++c) {
            Vec2 acc{};
            for (std::size_t i : members[c]) acc = acc + Vec2{pts[i].x, pts[i].y};
            centroids[c] = acc * (1.0 / static_cast<double>(members[c].size()));
        }
        std::vector<int> big;
        for (int c = 0; c < n_components; ++c)
            if (members[c].size() >= 8) big.push_back(c);
        if (big.empty()) {
            // All fragments tiny: fall back to one component holding everything.
            members.assign(1, {});
            for (std::size_t i = 0; i < n; ++i) members[0].push_back(i);
            big = {0};
        } else {
            for (int c = 0; c < n_components; ++c) {
                if (members[c].size() >= 8 || members[c].empty()) continue;
                int best = big[0];
                double best_d = dist(centroids[c], centroids[big[0]]);
                for (int b : big) {
                    const double d = dist(centroids[c], centroids[b]);
                    if (d < best_d) {
                        best_d = d;
                        best = b;
                    }
                }
                for (std::size_t i : members[c]) members[best].push_back(i);
                members[c].clear();
            }
        }

        for (int c = 0; c < static_cast<int>(members.size()); ++c) {
            if (members[c].empty()) continue;
            std::vector<ScenePoint> comp_pts;
            comp_pts.reserve(members[c].size());
            std::sort(members[c].begin(), members[c].end());
            for (std::size_t i : members[c]) comp_pts.push_back(pts[i]);
            out.instances.push_back(
                Instance::make(next_id++, inst.class_label, std::move(comp_pts)));
        }
    }
    return out;
}

/// Sliding-window cell division: origins at {(i·stride, j·stride)} relative to
/// the scene minimum. An instance joins a cell when at least one of its points
/// falls inside; the cropped copy recomputes center, color and count.
inline std::vector<Cell> slice_cells(const Scene& scene, double cell_size = 30.0,
                                     double stride = 10.0) {
    if (cell_size <= 0.0 || stride <= 0.0 || stride > cell_size)
        throw ConfigError("slice_cells: need cell_size > 0 and 0 < stride <= cell_size");
    const double W = scene.width(), H = scene.height();
    if (W < cell_size || H < cell_size)
        throw ConfigError("slice_cells: scene smaller than one cell");
    const int nx = static_cast<int>(std::floor((W - cell_size) / stride)) + 1;
    const int ny = static_cast<int>(std::floor((H - cell_size) / stride)) + 1;

    std::vector<Cell> cells;
    cells.reserve(static_cast<std::size_t>(nx) * ny);
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            Cell cell;
            cell.id = iy * nx + ix;
            cell.origin = {scene.bounds_min.x + ix * stride,
                           scene.bounds_min.y + iy * stride};
            cell.size = cell_size;
            for (const auto& inst : scene.instances) {
                std::vector<ScenePoint> inside;
                for (const auto& p : inst.points)
                    if (p.x >= cell.origin.x && p.x < cell.origin.x + cell_size &&
                        p.y >= cell.origin.y && p.y < cell.origin.y + cell_size)
                        inside.push_back(p);
                if (!inside.empty())
                    cell.instances.push_back(Instance::cropped(inst, std::move(inside)));
            }
            cells.push_back(std::move(cell));
        }
    return cells;
}

/// Keeps cells with at least `min_instances` instances; order preserved.
inline std::vector<Cell> reject_sparse(const std::vector<Cell>& cells,
                                       std::size_t min_instances = 6) {
    if (min_instances < 1)
        throw ConfigError("reject_sparse: min_instances must be >= 1");
    std::vector<Cell> kept;
    for (const auto& c : cells)
        if (c.instances.size() >= min_instances) kept.push_back(c);
    return kept;
}

/// Membership map: instance id → retained cell ids that contain it.
inline std::map<int, std::vector<int>> instance_cell_index(
    const std::vector<Cell>& cells) {
    std::map<int, std::vector<int>> index;
    for (const auto& cell : cells)
        for (const auto& inst : cell.instances) index[inst.id].push_back(cell.id);
    return index;
}

/// Samples query positions uniformly over the union of retained cell
/// footprints. Each target gets hints from its `hint_count` nearest distinct
/// instances (2D center distance, within `max_distance`) that are members of
/// at least one positive cell; targets without enough candidates are resampled.
inline std::vector<QuerySample> sample_queries(const Scene& scene,
                                               const std::vector<Cell>& cells,
                                               std::size_t n, std::uint64_t seed,
                                               std::size_t hint_count = 6,
                                               double max_distance = 40.0) {
    if (cells.empty())
        throw ConfigError("sample_queries: no retained cells");
    Rng rng(seed);
    auto membership = instance_cell_index(cells);

    std::vector<QuerySample> samples;
    samples.reserve(n);
    const std::size_t max_attempts = 200 * n + 1000;
    std::size_t attempts = 0;
    while (samples.size() < n) {
        if (++attempts > max_attempts)
            throw ConfigError("sample_queries: could not place " + std::to_string(n) +
                              " queries (scene too sparse near retained cells)");
        Vec2 target{rng.uniform(scene.bounds_min.x, scene.bounds_max.x),
                    rng.uniform(scene.bounds_min.y, scene.bounds_max.y)};
        std::vector<int> positive;
        for (const auto& c : cells)
            if (c.contains(target)) positive.push_back(c.id);
        if (positive.empty()) continue;

        struct Cand {
            double d;
            const Instance* inst;
        };
        std::vector<Cand> cands;
        for (const auto& inst : scene.instances) {
            const double d = dist(inst.center2d(), target);
            if (d == 0.0 || d > max_distance) continue;
            auto it = membership.find(inst.id);
            if (it == membership.end()) continue;
            bool in_positive = false;
            for (int cid : it->second)
                for (int pid : positive)
                    if (cid == pid) in_positive = true;
            if (!in_positive) continue;
            cands.push_back({d, &inst});
        }
        if (cands.size() < hint_count) continue;
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            return a.d != b.d ? a.d < b.d : a.inst->id < b.inst->id;
        });

        QuerySample q;
        q.target = target;
        q.positive_cell_ids = positive;
        for (std::size_t i = 0; i < hint_count; ++i) {
            q.hints.push_back(lang::generate_hint(target, *cands[i].inst));
            q.gt_instance_ids.push_back(cands[i].inst->id);
        }
        samples.push_back(std::move(q));
    }
    return samples;
}

}  // namespace retloc
