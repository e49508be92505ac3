#pragma once

// Dataset assembly and train-time augmentation. Queries split by scene
// quadrant: validation targets live in the upper-right quadrant, training
// targets stay at least one cell size away from it, so no cell that contains
// a training target can reach into the validation region.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "retloc/config.hpp"
#include "retloc/language.hpp"
#include "retloc/random.hpp"
#include "retloc/scene_io.hpp"
#include "retloc/scene_synth.hpp"

namespace retloc {

struct Dataset {
    Scene scene;              // after stuff clustering
    std::vector<Cell> cells;  // retained after sparse rejection
    std::vector<QuerySample> train;
    std::vector<QuerySample> val;
    std::map<int, std::size_t> cell_pos;  // cell id → index into cells

    const Cell& cell_by_id(int id) const {
        auto it = cell_pos.find(id);
        if (it == cell_pos.end())
            throw DataError("unknown cell id " + std::to_string(id));
        return cells[it->second];
    }
};

/// The retained positive cell whose center is nearest to the query target.
inline int nearest_positive_cell(const Dataset& data, const QuerySample& q) {
    int best = -1;
    double best_d = 0.0;
    for (int cid : q.positive_cell_ids) {
        const Cell& c = data.cell_by_id(cid);
        const double d = dist(c.center(), q.target);
        if (best == -1 || d < best_d || (d == best_d && cid < best)) {
            best = cid;
            best_d = d;
        }
    }
    if (best == -1) throw DataError("query has no positive cells");
    return best;
}

namespace dataset_detail {

enum class Region { Train, Val, Buffer };

inline Region classify(Vec2 target, const Scene& scene, double buffer) {
    const double qx = scene.bounds_min.x + scene.width() / 2.0;
    const double qy = scene.bounds_min.y + scene.height() / 2.0;
    if (target.x >= qx && target.y >= qy) return Region::Val;
    if (target.x >= qx - buffer && target.y >= qy - buffer) return Region::Buffer;
    return Region::Train;
}

}  // namespace dataset_detail

/// Generates scene, cells and the quadrant-split query sets from the config.
inline Dataset build_dataset(const TrainConfig& cfg) {
    Dataset data;
    data.scene = cluster_stuff(generate_scene(cfg.scene, cfg.seed));
    data.cells = reject_sparse(slice_cells(data.scene, cfg.cell_size, cfg.cell_stride),
                               cfg.min_instances);
    if (data.cells.empty())
        throw ConfigError("no cells survive sparse rejection; densify the scene");
    for (std::size_t i = 0; i < data.cells.size(); ++i)
        data.cell_pos[data.cells[i].id] = i;

    Rng seeds(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const std::size_t chunk = 256;
    std::size_t stale_rounds = 0;
    while (data.train.size() < cfg.n_train_queries ||
           data.val.size() < cfg.n_val_queries) {
        auto batch = sample_queries(data.scene, data.cells, chunk, seeds.next_u64(),
                                    cfg.hint_count, cfg.hint_max_distance);
        bool progressed = false;
        for (auto& q : batch) {
            switch (dataset_detail::classify(q.target, data.scene, cfg.cell_size)) {
                case dataset_detail::Region::Train:
                    if (data.train.size() < cfg.n_train_queries) {
                        data.train.push_back(std::move(q));
                        progressed = true;
                    }
                    break;
                case dataset_detail::Region::Val:
                    if (data.val.size() < cfg.n_val_queries) {
                        data.val.push_back(std::move(q));
                        progressed = true;
                    }
                    break;
                case dataset_detail::Region::Buffer:
                    break;
            }
        }
        stale_rounds = progressed ? 0 : stale_rounds + 1;
        if (stale_rounds > 50)
            throw ConfigError("query split quotas unreachable for this scene");
    }
    return data;
}

inline void save_queries(const Dataset& data, const std::string& path) {
    nlohmann::json j;
    auto& train = j["train"] = nlohmann::json::array();
    for (const auto& q : data.train) train.push_back(query_to_json(q));
    auto& val = j["val"] = nlohmann::json::array();
    for (const auto& q : data.val) val.push_back(query_to_json(q));
    io_detail::write_text_atomic(path, j.dump(1) + "\n");
}

inline void load_queries(const std::string& path, Dataset& data) {
    nlohmann::json j = io_detail::load_json_file(path);
    try {
        data.train.clear();
        data.val.clear();
        for (const auto& jq : j.at("train")) data.train.push_back(query_from_json(jq));
        for (const auto& jq : j.at("val")) data.val.push_back(query_from_json(jq));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("query file schema error: ") + e.what());
    }
}

/// Rebuilds a Dataset from persisted scene + query files.
inline Dataset dataset_from_files(const TrainConfig& cfg, const std::string& scene_path,
                                  const std::string& queries_path) {
    Dataset data;
    data.scene = load_scene(scene_path);
    data.cells = reject_sparse(slice_cells(data.scene, cfg.cell_size, cfg.cell_stride),
                               cfg.min_instances);
    for (std::size_t i = 0; i < data.cells.size(); ++i)
        data.cell_pos[data.cells[i].id] = i;
    load_queries(queries_path, data);
    return data;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentToggles {
    bool flip = true;
    bool hint_shuffle = true;
    bool z_rotation = true;
};

/// One training sample resolved into mutable values: the ground-truth cell,
/// the hints, and the target, all in a consistent frame.
struct SampleBundle {
    Cell cell;
    std::vector<Hint> hints;
    std::vector<int> gt_instance_ids;
    Vec2 target{};
};

inline SampleBundle make_bundle(const Dataset& data, const QuerySample& q,
                                int cell_id) {
    SampleBundle b;
    b.cell = data.cell_by_id(cell_id);
    b.hints = q.hints;
    b.gt_instance_ids = q.gt_instance_ids;
    b.target = q.target;
    return b;
}

namespace dataset_detail {

inline void flip_bundle(SampleBundle& b, FlipAxis axis) {
    const Vec2 c = b.cell.center();
    for (auto& inst : b.cell.instances) {
        for (auto& p : inst.points) {
            if (axis == FlipAxis::X)
                p.x = 2.0 * c.x - p.x;
            else
                p.y = 2.0 * c.y - p.y;
        }
        inst.recompute_stats();
    }
    if (axis == FlipAxis::X)
        b.target.x = 2.0 * c.x - b.target.x;
    else
        b.target.y = 2.0 * c.y - b.target.y;
    for (auto& h : b.hints) h = lang::flip_hint(h, axis);
}

}  // namespace dataset_detail

/// Independent 50% x/y cell flips (coordinates and direction words together),
/// per-instance z-rotation with a uniform angle, and a hint-order shuffle.
/// Deterministic under the caller's rng.
inline void augment_bundle(SampleBundle& b, const AugmentToggles& toggles, Rng& rng) {
    if (toggles.flip) {
        if (rng.coin()) dataset_detail::flip_bundle(b, FlipAxis::X);
        if (rng.coin()) dataset_detail::flip_bundle(b, FlipAxis::Y);
    }
    if (toggles.z_rotation) {
        for (auto& inst : b.cell.instances) {
            const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            inst.points = rotate_z(inst.points, angle);
            inst.recompute_stats();
        }
    }
    if (toggles.hint_shuffle) {
        std::vector<std::size_t> perm(b.hints.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        rng.shuffle(perm);
        std::vector<Hint> hints;
        std::vector<int> gt;
        for (std::size_t i : perm) {
            hints.push_back(b.hints[i]);
            gt.push_back(b.gt_instance_ids[i]);
        }
        b.hints = std::move(hints);
        b.gt_instance_ids = std::move(gt);
    }
}

inline std::vector<SampleBundle> augment_batch(std::vector<SampleBundle> samples,
                                               const AugmentToggles& toggles,
                                               std::uint64_t seed) {
    Rng rng(seed);
    for (auto& b : samples) augment_bundle(b, toggles, rng);
    return samples;
}

}  // namespace retloc
