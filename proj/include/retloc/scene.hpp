#pragma once

// Domain types for the synthetic city: point-cloud instances, sliding-window
// map cells, and query samples tying a target position to nearby instances.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "retloc/errors.hpp"
#include "retloc/geometry.hpp"

namespace retloc {

namespace detail {
/// Order-insensitive mean: summing in sorted order makes instance statistics
/// exactly invariant to point permutation (bit-for-bit).
inline double stable_mean(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}
}  // namespace detail

enum class ClassLabel {
    Building,
    Pole,
    TrafficSign,
    Car,
    TrashBin,
    Terrain,     // stuff
    Road,        // stuff
    Vegetation,  // stuff
};

inline bool is_stuff_class(ClassLabel c) {
    return c == ClassLabel::Terrain || c == ClassLabel::Road ||
           c == ClassLabel::Vegetation;
}

inline const char* class_token(ClassLabel c) {
    switch (c) {
        case ClassLabel::Building: return "building";
        case ClassLabel::Pole: return "pole";
        case ClassLabel::TrafficSign: return "traffic-sign";
        case ClassLabel::Car: return "car";
        case ClassLabel::TrashBin: return "trash-bin";
        case ClassLabel::Terrain: return "terrain";
        case ClassLabel::Road: return "road";
        case ClassLabel::Vegetation: return "vegetation";
    }
    return "?";
}

inline ClassLabel class_from_token(const std::string& token) {
    for (ClassLabel c : {ClassLabel::Building, ClassLabel::Pole,
                         ClassLabel::TrafficSign, ClassLabel::Car,
                         ClassLabel::TrashBin, ClassLabel::Terrain,
                         ClassLabel::Road, ClassLabel::Vegetation})
        if (token == class_token(c)) return c;
    throw DataError("unknown class token: " + token);
}

inline const std::vector<std::string>& class_vocab() {
    static const std::vector<std::string> v = {
        "building", "pole",    "traffic-sign", "car",
        "trash-bin", "terrain", "road",         "vegetation"};
    return v;
}

/// A point-cloud object. Scene-level instances carry at least 8 points;
/// cell-cropped copies may hold fewer (they keep every point that fell
/// inside the cell footprint, however few).
struct Instance {
    int id = -1;
    ClassLabel class_label = ClassLabel::Building;
    bool is_stuff = false;
    std::vector<ScenePoint> points;
    Vec3 center{};      // exact mean of point xyz
    Vec3 avg_color{};   // exact mean of point rgb
    std::size_t point_count = 0;

    Vec2 center2d() const { return {center.x, center.y}; }

    void recompute_stats() {
        point_count = points.size();
        auto component = [&](double ScenePoint::*field) {
            std::vector<double> v;
            v.reserve(points.size());
            for (const auto& p : points) v.push_back(p.*field);
            return detail::stable_mean(std::move(v));
        };
        center = {component(&ScenePoint::x), component(&ScenePoint::y),
                  component(&ScenePoint::z)};
        avg_color = {component(&ScenePoint::r), component(&ScenePoint::g),
                     component(&ScenePoint::b)};
    }

    static Instance make(int id, ClassLabel cl, std::vector<ScenePoint> pts) {
        if (pts.size() < 8)
            throw UsageError("instance " + std::to_string(id) +
                             " needs at least 8 points, got " +
                             std::to_string(pts.size()));
        Instance inst;
        inst.id = id;
        inst.class_label = cl;
        inst.is_stuff = is_stuff_class(cl);
        inst.points = std::move(pts);
        inst.recompute_stats();
        return inst;
    }

    /// Copy restricted to the given points (used for cell crops).
    static Instance cropped(const Instance& src, std::vector<ScenePoint> pts) {
        Instance inst = src;
        inst.points = std::move(pts);
        inst.recompute_stats();
        return inst;
    }
};

/// A size×size map tile with lower-left corner `origin`. Instances are
/// cropped copies whose statistics are recomputed from the in-cell points.
struct Cell {
    int id = -1;
    Vec2 origin{};
    double size = 30.0;
    std::vector<Instance> instances;

    Vec2 center() const { return {origin.x + size / 2.0, origin.y + size / 2.0}; }

    bool contains(Vec2 p) const {
        return p.x >= origin.x && p.x < origin.x + size && p.y >= origin.y &&
               p.y < origin.y + size;
    }

    const Instance* find_instance(int instance_id) const {
        for (const auto& inst : instances)
            if (inst.id == instance_id) return &inst;
        return nullptr;
    }
};

struct Scene {
    Vec2 bounds_min{0.0, 0.0};
    Vec2 bounds_max{0.0, 0.0};
    std::vector<Instance> instances;
    std::uint64_t rng_seed = 0;

    double width() const { return bounds_max.x - bounds_min.x; }
    double height() const { return bounds_max.y - bounds_min.y; }
};

}  // namespace retloc
