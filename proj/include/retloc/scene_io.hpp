#pragma once

// JSON persistence for scenes and query sets. Doubles are serialized with
// round-trip precision, so save/load is value-exact and repeated runs with the
// same seed produce byte-identical files.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retloc/errors.hpp"
#include "retloc/scene.hpp"
#include "retloc/scene_synth.hpp"

namespace retloc {

namespace io_detail {

inline void write_text_atomic(const std::string& path, const std::string& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write file: " + tmp);
        out << body;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot move " + tmp + " into place");
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw DataError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace io_detail

inline nlohmann::json scene_to_json(const Scene& scene) {
    nlohmann::json j;
    j["bounds"] = {{"min", {scene.bounds_min.x, scene.bounds_min.y}},
                   {"max", {scene.bounds_max.x, scene.bounds_max.y}}};
    j["seed"] = scene.rng_seed;
    auto& arr = j["instances"] = nlohmann::json::array();
    for (const auto& inst : scene.instances) {
        nlohmann::json ji;
        ji["id"] = inst.id;
        ji["class"] = class_token(inst.class_label);
        auto& pts = ji["points"] = nlohmann::json::array();
        for (const auto& p : inst.points)
            pts.push_back({p.x, p.y, p.z, p.r, p.g, p.b});
        arr.push_back(std::move(ji));
    }
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene scene;
    try {
        scene.bounds_min = {j.at("bounds").at("min").at(0).get<double>(),
                            j.at("bounds").at("min").at(1).get<double>()};
        scene.bounds_max = {j.at("bounds").at("max").at(0).get<double>(),
                            j.at("bounds").at("max").at(1).get<double>()};
        scene.rng_seed = j.at("seed").get<std::uint64_t>();
        for (const auto& ji : j.at("instances")) {
            std::vector<ScenePoint> pts;
            for (const auto& jp : ji.at("points"))
                pts.push_back({jp.at(0).get<double>(), jp.at(1).get<double>(),
                               jp.at(2).get<double>(), jp.at(3).get<double>(),
                               jp.at(4).get<double>(), jp.at(5).get<double>()});
            scene.instances.push_back(Instance::make(
                ji.at("id").get<int>(), class_from_token(ji.at("class").get<std::string>()),
                std::move(pts)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("scene JSON schema error: ") + e.what());
    }
    return scene;
}

inline void save_scene(const Scene& scene, const std::string& path) {
    io_detail::write_text_atomic(path, scene_to_json(scene).dump(1) + "\n");
}

inline Scene load_scene(const std::string& path) {
    return scene_from_json(io_detail::load_json_file(path));
}

inline nlohmann::json query_to_json(const QuerySample& q) {
    nlohmann::json jq;
    jq["target"] = {q.target.x, q.target.y};
    auto& hints = jq["hints"] = nlohmann::json::array();
    for (const auto& h : q.hints)
        hints.push_back({{"text", h.text}, {"instance_id", h.referred_instance_id}});
    jq["gt_instance_ids"] = q.gt_instance_ids;
    jq["positive_cell_ids"] = q.positive_cell_ids;
    return jq;
}

inline QuerySample query_from_json(const nlohmann::json& jq) {
    QuerySample q;
    try {
        q.target = {jq.at("target").at(0).get<double>(),
                    jq.at("target").at(1).get<double>()};
        for (const auto& jh : jq.at("hints")) {
            auto parsed = lang::parse_hint(jh.at("text").get<std::string>());
            Hint h;
            h.text = jh.at("text").get<std::string>();
            h.direction_words = parsed.direction_words;
            h.color_words = parsed.color_words;
            h.class_words = parsed.class_words;
            h.referred_instance_id = jh.at("instance_id").get<int>();
            q.hints.push_back(std::move(h));
        }
        q.gt_instance_ids = jq.at("gt_instance_ids").get<std::vector<int>>();
        q.positive_cell_ids = jq.at("positive_cell_ids").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("query JSON schema error: ") + e.what());
    }
    return q;
}

}  // namespace retloc
