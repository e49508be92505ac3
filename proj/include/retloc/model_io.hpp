#pragma once

// Model-level checkpoint wrappers. A checkpoint embeds the full run config,
// so loading reconstructs the exact architecture and then restores parameter
// values; the coarse checkpoint additionally carries the persisted cell
// embedding index so retrieval can run without re-encoding the map.

#include <string>
#include <vector>

#include "retloc/checkpoint.hpp"
#include "retloc/coarse.hpp"
#include "retloc/config.hpp"
#include "retloc/fine.hpp"
#include "retloc/optimizer.hpp"

namespace retloc {

inline void append_optimizer_state(ParamMap& params, nlohmann::json& extra,
                                   const Adam& opt) {
    for (const auto& [name, t] : opt.params()) {
        params["opt.m." + name] =
            Tensor::param(t.shape(), std::vector<double>(opt.moment_m(name)));
        params["opt.v." + name] =
            Tensor::param(t.shape(), std::vector<double>(opt.moment_v(name)));
    }
    extra["opt_step"] = opt.step_count();
}

inline void save_coarse_checkpoint(const std::string& path, const CoarseModel& model,
                                   const TrainConfig& cfg,
                                   const std::vector<CellEmbedding>& index,
                                   const Adam* opt = nullptr) {
    ParamMap params;
    model.collect(params);
    nlohmann::json extra;
    extra["kind"] = "coarse";
    extra["vocab_tokens"] = model.vocab.tokens;
    if (!index.empty()) {
        std::vector<int> ids;
        std::vector<double> flat;
        for (const auto& e : index) {
            ids.push_back(e.cell_id);
            flat.insert(flat.end(), e.embedding.begin(), e.embedding.end());
        }
        extra["cell_ids"] = ids;
        params["index.cells"] =
            Tensor::param({index.size(), index[0].embedding.size()}, std::move(flat));
    }
    if (opt != nullptr) append_optimizer_state(params, extra, *opt);
    save_checkpoint(path, params, cfg.to_json(), extra);
}

struct LoadedCoarse {
    CoarseModel model;
    TrainConfig cfg;
    std::vector<CellEmbedding> index;
};

inline LoadedCoarse load_coarse_checkpoint(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.extra.value("kind", "") != "coarse")
        throw DataError(path + " is not a coarse-stage checkpoint");
    LoadedCoarse out{CoarseModel{}, TrainConfig::from_json(ckpt.config), {}};
    out.model = CoarseModel::create(
        CoarseConfig{out.cfg.d, out.cfg.heads, out.cfg.layers, out.cfg.hidden,
                     out.cfg.point_relations, out.cfg.text_relations},
        Rng(out.cfg.seed));
    const auto stored_tokens =
        ckpt.extra.at("vocab_tokens").get<std::vector<std::string>>();
    if (stored_tokens != out.model.vocab.tokens)
        throw DataError(path + ": vocabulary tokens disagree with this build");
    ParamMap params;
    out.model.collect(params);
    restore_params(params, ckpt.params, "coarse checkpoint");
    if (ckpt.extra.contains("cell_ids")) {
        const auto ids = ckpt.extra.at("cell_ids").get<std::vector<int>>();
        auto it = ckpt.params.find("index.cells");
        if (it == ckpt.params.end())
            throw DataError(path + ": cell_ids present but index.cells block missing");
        const Tensor& table = it->second;
        if (table.dim(0) != ids.size() || table.dim(1) != out.cfg.d)
            throw DataError(path + ": cell index shape disagrees with manifest");
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::vector<double> row(table.data().begin() + i * out.cfg.d,
                                    table.data().begin() + (i + 1) * out.cfg.d);
            out.index.push_back({ids[i], std::move(row)});
        }
    }
    return out;
}

inline void save_fine_checkpoint(const std::string& path, const FineModel& model,
                                 const TrainConfig& cfg, const Adam* opt = nullptr) {
    ParamMap params;
    model.collect(params);
    nlohmann::json extra;
    extra["kind"] = "fine";
    extra["vocab_tokens"] = model.vocab.tokens;
    if (opt != nullptr) append_optimizer_state(params, extra, *opt);
    save_checkpoint(path, params, cfg.to_json(), extra);
}

struct LoadedFine {
    FineModel model;
    TrainConfig cfg;
};

inline LoadedFine load_fine_checkpoint(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.extra.value("kind", "") != "fine")
        throw DataError(path + " is not a fine-stage checkpoint");
    LoadedFine out{FineModel{}, TrainConfig::from_json(ckpt.config)};
    out.model = FineModel::create(
        FineConfig{out.cfg.d, out.cfg.d_match, out.cfg.sinkhorn_iterations,
                   out.cfg.cross_attention},
        Rng(out.cfg.seed ^ 0xf19eULL));
    ParamMap params;
    out.model.collect(params);
    restore_params(params, ckpt.params, "fine checkpoint");
    return out;
}

}  // namespace retloc
