#pragma once

// Point-cloud instance encoding: a small permutation-invariant point-set
// network (per-point MLP + max-pool) concatenated with projected color,
// cell-local center and log-normalized point-count features.

#include <cmath>
#include <string>
#include <vector>

#include "retloc/params.hpp"
#include "retloc/scene.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

/// Cell coordinate frame used to normalize instance centers.
struct CellFrame {
    Vec2 origin{};
    double size = 30.0;
};

/// Joint min-max normalization of xyz into [0,1] with one shared scale (the
/// maximum extent over the three axes), preserving aspect ratio. Colors pass
/// through. All points identical → everything maps to 0.5. Applied at both
/// training and inference time.
inline std::vector<ScenePoint> normalize_scale(const std::vector<ScenePoint>& points) {
    if (points.empty()) throw UsageError("normalize_scale: no points");
    double lo[3] = {points[0].x, points[0].y, points[0].z};
    double hi[3] = {points[0].x, points[0].y, points[0].z};
    for (const auto& p : points) {
        lo[0] = std::min(lo[0], p.x); hi[0] = std::max(hi[0], p.x);
        lo[1] = std::min(lo[1], p.y); hi[1] = std::max(hi[1], p.y);
        lo[2] = std::min(lo[2], p.z); hi[2] = std::max(hi[2], p.z);
    }
    const double extent =
        std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    std::vector<ScenePoint> out = points;
    if (extent == 0.0) {
        for (auto& p : out) { p.x = 0.5; p.y = 0.5; p.z = 0.5; }
        return out;
    }
    const double inv = 1.0 / extent;
    for (auto& p : out) {
        p.x = (p.x - lo[0]) * inv;
        p.y = (p.y - lo[1]) * inv;
        p.z = (p.z - lo[2]) * inv;
    }
    return out;
}

/// Rotates xy about the centroid of the point set; z and colors unchanged.
inline std::vector<ScenePoint> rotate_z(const std::vector<ScenePoint>& points,
                                        double angle) {
    double cx = 0.0, cy = 0.0;
    for (const auto& p : points) { cx += p.x; cy += p.y; }
    const double inv = points.empty() ? 0.0 : 1.0 / static_cast<double>(points.size());
    cx *= inv;
    cy *= inv;
    const double c = std::cos(angle), s = std::sin(angle);
    std::vector<ScenePoint> out = points;
    for (auto& p : out) {
        const double dx = p.x - cx, dy = p.y - cy;
        p.x = cx + c * dx - s * dy;
        p.y = cy + s * dx + c * dy;
    }
    return out;
}

/// σ(n) = log(1+n) / log(1+n_max): endpoint 0 at n=0, endpoint 1 at n=n_max.
inline double count_feature(std::size_t n, std::size_t n_max = 4096) {
    return std::log1p(static_cast<double>(n)) / std::log1p(static_cast<double>(n_max));
}

/// Per-point two-layer perceptron (6 → 64 → d_p, relu) followed by a
/// symmetric max-pool over points; exactly permutation invariant.
struct PointSetEncoder {
    Tensor w1, b1, w2, b2;
    std::size_t d_p = 0;

    static PointSetEncoder create(std::size_t d_p, Rng& rng) {
        PointSetEncoder e;
        e.d_p = d_p;
        e.w1 = init::xavier(rng, 6, 64);
        e.b1 = init::zeros({64});
        e.w2 = init::xavier(rng, 64, d_p);
        e.b2 = init::zeros({d_p});
        return e;
    }

    Tensor encode(const std::vector<ScenePoint>& points) const {
        const auto norm_pts = normalize_scale(points);
        std::vector<double> flat;
        flat.reserve(norm_pts.size() * 6);
        for (const auto& p : norm_pts) {
            flat.push_back(p.x); flat.push_back(p.y); flat.push_back(p.z);
            flat.push_back(p.r); flat.push_back(p.g); flat.push_back(p.b);
        }
        Tensor input = Tensor::from({norm_pts.size(), 6}, std::move(flat));
        Tensor hidden = relu(add_rowvec(matmul(input, w1), b1));
        Tensor features = add_rowvec(matmul(hidden, w2), b2);
        return max_axis(features, 0);
    }

    void collect(ParamMap& params, const std::string& prefix) const {
        params[prefix + ".w1"] = w1;
        params[prefix + ".b1"] = b1;
        params[prefix + ".w2"] = w2;
        params[prefix + ".b2"] = b2;
    }
};

/// p_i = [point_feature (d/2); W_color·a_i (d/6); W_center·ĉ_i (d/6);
///        W_count·σ(n_i) (d/6)], where ĉ_i is the cell-local center
/// ((c − origin)/size for xy, z/10) so retrieval is translation invariant.
struct InstanceEncoder {
    std::size_t d = 0;
    PointSetEncoder point_net;
    Tensor w_color, w_center, w_count;

    static InstanceEncoder create(std::size_t d, Rng& rng) {
        if (d % 6 != 0)
            throw ConfigError("instance encoder width must be divisible by 6, got " +
                              std::to_string(d));
        InstanceEncoder e;
        e.d = d;
        e.point_net = PointSetEncoder::create(d / 2, rng);
        e.w_color = init::xavier(rng, 3, d / 6);
        e.w_center = init::xavier(rng, 3, d / 6);
        e.w_count = init::xavier(rng, 1, d / 6);
        return e;
    }

    Tensor encode(const Instance& inst, const CellFrame& frame) const {
        if (inst.points.empty())
            throw UsageError("encode: instance " + std::to_string(inst.id) +
                             " has no points");
        Tensor point_feature = point_net.encode(inst.points);

        Tensor color = Tensor::from(
            {1, 3}, {inst.avg_color.x, inst.avg_color.y, inst.avg_color.z});
        Tensor center = Tensor::from(
            {1, 3}, {(inst.center.x - frame.origin.x) / frame.size,
                     (inst.center.y - frame.origin.y) / frame.size,
                     inst.center.z / 10.0});
        Tensor count = Tensor::from({1, 1}, {count_feature(inst.point_count)});

        const std::size_t k = d / 6;
        return concat({point_feature,
                       reshape(matmul(color, w_color), {k}),
                       reshape(matmul(center, w_center), {k}),
                       reshape(matmul(count, w_count), {k})},
                      0);
    }

    void collect(ParamMap& params, const std::string& prefix) const {
        point_net.collect(params, prefix + ".pointnet");
        params[prefix + ".w_color"] = w_color;
        params[prefix + ".w_center"] = w_center;
        params[prefix + ".w_count"] = w_count;
    }
};

}  // namespace retloc
