#pragma once

// Run configuration: model dimensions, stage hyperparameters, scene and query
// generation settings, augmentation toggles. Loaded from JSON with defaults
// for anything unspecified; RETLOC_SEED overrides the configured seed.

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retloc/errors.hpp"
#include "retloc/scene_synth.hpp"

namespace retloc {

struct TrainConfig {
    std::uint64_t seed = 7;

    // model
    std::size_t d = 120;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t hidden = 2048;
    double alpha = 0.35;
    std::size_t d_match = 64;
    int sinkhorn_iterations = 100;

    // ablation switches
    bool point_relations = true;
    bool text_relations = true;
    bool cross_attention = true;
    bool confidence_weighting = true;

    // data
    SceneConfig scene;
    double cell_size = 30.0;
    double cell_stride = 10.0;
    std::size_t min_instances = 6;
    std::size_t n_train_queries = 2000;
    std::size_t n_val_queries = 500;
    std::size_t hint_count = 6;
    double hint_max_distance = 40.0;

    // coarse stage
    double coarse_lr = 2e-4;
    int coarse_epochs = 18;
    std::size_t coarse_batch = 16;
    double coarse_weight_decay = 1e-4;

    // fine stage
    double matcher_lr = 5e-4;
    int matcher_epochs = 16;
    std::size_t matcher_batch = 32;
    double regressor_lr = 1e-4;
    int regressor_epochs = 10;
    std::size_t regressor_batch = 32;

    // augmentation
    bool augment_flip = true;
    bool augment_hint_shuffle = true;
    bool augment_rotation = true;

    // evaluation
    std::vector<int> eval_k = {1, 5, 10};
    std::vector<double> eval_eps = {5.0, 10.0, 15.0};
    std::vector<int> coarse_eval_k = {1, 3, 5};

    void validate() const {
        if (d % 6 != 0)
            throw ConfigError("model width d must divide by 6 (hint groups and "
                              "instance feature slots), got " + std::to_string(d));
        if (heads == 0 || d % heads != 0)
            throw ConfigError("model width d must divide by the head count");
        if (layers == 0) throw ConfigError("layers must be >= 1");
        if (alpha <= 0.0) throw ConfigError("ranking margin alpha must be positive");
        if (coarse_batch < 2)
            throw ConfigError("coarse batch must be >= 2 for the ranking loss");
        if (hint_count < 1) throw ConfigError("hint_count must be >= 1");
        if (cell_stride <= 0 || cell_stride > cell_size)
            throw ConfigError("need 0 < stride <= cell_size");
        scene.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["model"] = {{"d", d},
                      {"heads", heads},
                      {"layers", layers},
                      {"hidden", hidden},
                      {"alpha", alpha},
                      {"d_match", d_match},
                      {"sinkhorn_iterations", sinkhorn_iterations},
                      {"point_relations", point_relations},
                      {"text_relations", text_relations},
                      {"cross_attention", cross_attention},
                      {"confidence_weighting", confidence_weighting}};
        j["scene"] = {{"width", scene.width},
                      {"height", scene.height},
                      {"buildings_per_ha", scene.buildings_per_ha},
                      {"poles_per_ha", scene.poles_per_ha},
                      {"signs_per_ha", scene.signs_per_ha},
                      {"cars_per_ha", scene.cars_per_ha},
                      {"bins_per_ha", scene.bins_per_ha},
                      {"terrain_per_ha", scene.terrain_per_ha},
                      {"vegetation_per_ha", scene.vegetation_per_ha},
                      {"road_spacing", scene.road_spacing},
                      {"color_jitter", scene.color_jitter}};
        j["cells"] = {{"size", cell_size},
                      {"stride", cell_stride},
                      {"min_instances", min_instances}};
        j["queries"] = {{"train", n_train_queries},
                        {"val", n_val_queries},
                        {"hints", hint_count},
                        {"max_distance", hint_max_distance}};
        j["coarse"] = {{"lr", coarse_lr},
                       {"epochs", coarse_epochs},
                       {"batch", coarse_batch},
                       {"weight_decay", coarse_weight_decay}};
        j["matcher"] = {{"lr", matcher_lr},
                        {"epochs", matcher_epochs},
                        {"batch", matcher_batch}};
        j["regressor"] = {{"lr", regressor_lr},
                          {"epochs", regressor_epochs},
                          {"batch", regressor_batch}};
        j["augment"] = {{"flip", augment_flip},
                        {"hint_shuffle", augment_hint_shuffle},
                        {"z_rotation", augment_rotation}};
        j["eval"] = {{"k", eval_k}, {"eps", eval_eps}, {"coarse_k", coarse_eval_k}};
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        try {
            auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
                if (obj.contains(key)) field = obj.at(key).template get<std::decay_t<decltype(field)>>();
            };
            get(j, "seed", c.seed);
            if (j.contains("model")) {
                const auto& m = j.at("model");
                get(m, "d", c.d);
                get(m, "heads", c.heads);
                get(m, "layers", c.layers);
                get(m, "hidden", c.hidden);
                get(m, "alpha", c.alpha);
                get(m, "d_match", c.d_match);
                get(m, "sinkhorn_iterations", c.sinkhorn_iterations);
                get(m, "point_relations", c.point_relations);
                get(m, "text_relations", c.text_relations);
                get(m, "cross_attention", c.cross_attention);
                get(m, "confidence_weighting", c.confidence_weighting);
            }
            if (j.contains("scene")) {
                const auto& s = j.at("scene");
                get(s, "width", c.scene.width);
                get(s, "height", c.scene.height);
                get(s, "buildings_per_ha", c.scene.buildings_per_ha);
                get(s, "poles_per_ha", c.scene.poles_per_ha);
                get(s, "signs_per_ha", c.scene.signs_per_ha);
                get(s, "cars_per_ha", c.scene.cars_per_ha);
                get(s, "bins_per_ha", c.scene.bins_per_ha);
                get(s, "terrain_per_ha", c.scene.terrain_per_ha);
                get(s, "vegetation_per_ha", c.scene.vegetation_per_ha);
                get(s, "road_spacing", c.scene.road_spacing);
                get(s, "color_jitter", c.scene.color_jitter);
            }
            if (j.contains("cells")) {
                const auto& s = j.at("cells");
                get(s, "size", c.cell_size);
                get(s, "stride", c.cell_stride);
                get(s, "min_instances", c.min_instances);
            }
            if (j.contains("queries")) {
                const auto& s = j.at("queries");
                get(s, "train", c.n_train_queries);
                get(s, "val", c.n_val_queries);
                get(s, "hints", c.hint_count);
                get(s, "max_distance", c.hint_max_distance);
            }
            if (j.contains("coarse")) {
                const auto& s = j.at("coarse");
                get(s, "lr", c.coarse_lr);
                get(s, "epochs", c.coarse_epochs);
                get(s, "batch", c.coarse_batch);
                get(s, "weight_decay", c.coarse_weight_decay);
            }
            if (j.contains("matcher")) {
                const auto& s = j.at("matcher");
                get(s, "lr", c.matcher_lr);
                get(s, "epochs", c.matcher_epochs);
                get(s, "batch", c.matcher_batch);
            }
            if (j.contains("regressor")) {
                const auto& s = j.at("regressor");
                get(s, "lr", c.regressor_lr);
                get(s, "epochs", c.regressor_epochs);
                get(s, "batch", c.regressor_batch);
            }
            if (j.contains("augment")) {
                const auto& s = j.at("augment");
                get(s, "flip", c.augment_flip);
                get(s, "hint_shuffle", c.augment_hint_shuffle);
                get(s, "z_rotation", c.augment_rotation);
            }
            if (j.contains("eval")) {
                const auto& s = j.at("eval");
                get(s, "k", c.eval_k);
                get(s, "eps", c.eval_eps);
                get(s, "coarse_k", c.coarse_eval_k);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config schema error: ") + e.what());
        }
        c.validate();
        return c;
    }

    /// Loads a config file (or defaults when path is empty) and applies the
    /// RETLOC_SEED environment override.
    static TrainConfig load(const std::string& path) {
        TrainConfig c;
        if (!path.empty()) {
            std::ifstream in(path);
            if (!in) throw DataError("missing config file: " + path);
            nlohmann::json j;
            try {
                in >> j;
            } catch (const std::exception& e) {
                throw DataError("malformed config JSON in " + path + ": " + e.what());
            }
            c = from_json(j);
        }
        if (const char* env = std::getenv("RETLOC_SEED")) {
            try {
                c.seed = std::stoull(env);
            } catch (const std::exception&) {
                throw ConfigError("RETLOC_SEED is not an integer: " + std::string(env));
            }
        }
        return c;
    }
};

}  // namespace retloc
