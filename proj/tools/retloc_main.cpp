// Command-line driver: scene generation, two-stage training, evaluation,
// single-query localization, embedding dumps, and the ablation harness.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "retloc/retloc.hpp"

namespace fs = std::filesystem;
using namespace retloc;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::string scene_path;
    std::string queries_path;
};

TrainConfig load_config(const CommonArgs& args) {
    TrainConfig cfg = TrainConfig::load(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    cfg.validate();
    return cfg;
}

Dataset load_or_build(const TrainConfig& cfg, const CommonArgs& args) {
    if (!args.scene_path.empty() || !args.queries_path.empty()) {
        if (args.scene_path.empty() || args.queries_path.empty())
            throw UsageError("--scene and --queries must be given together");
        return dataset_from_files(cfg, args.scene_path, args.queries_path);
    }
    std::cerr << "[retloc] generating dataset (seed " << cfg.seed << ")...\n";
    return build_dataset(cfg);
}

void write_text(const std::string& path, const std::string& body) {
    io_detail::write_text_atomic(path, body);
}

void ensure_out_dir(const CommonArgs& args) {
    std::error_code ec;
    fs::create_directories(args.out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + args.out_dir);
}

std::string out_path(const CommonArgs& args, const std::string& name) {
    return (fs::path(args.out_dir) / name).string();
}

nlohmann::json coarse_history_json(const CoarseTrainResult& r) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : r.history)
        arr.push_back({{"epoch", s.epoch},
                       {"lr", s.lr},
                       {"train_loss", s.train_loss},
                       {"val_recall@1", s.val_recall1},
                       {"val_recall@3", s.val_recall3},
                       {"val_recall@5", s.val_recall5}});
    return {{"epochs", arr}, {"best_epoch", r.best_epoch}};
}

nlohmann::json fine_history_json(const FineTrainResult& r) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : r.history)
        arr.push_back({{"epoch", s.epoch},
                       {"phase", s.phase},
                       {"lr", s.lr},
                       {"train_loss", s.train_loss},
                       {"val_precision", s.val_precision},
                       {"val_recall", s.val_recall},
                       {"val_regression_error", s.val_regression_error}});
    return {{"epochs", arr}};
}

int cmd_gen(const CommonArgs& args, const std::string& scene_out,
            const std::string& queries_out) {
    TrainConfig cfg = load_config(args);
    Dataset data = build_dataset(cfg);
    ensure_out_dir(args);
    const std::string sp = scene_out.empty() ? out_path(args, "scene.json") : scene_out;
    const std::string qp =
        queries_out.empty() ? out_path(args, "queries.json") : queries_out;
    save_scene(data.scene, sp);
    save_queries(data, qp);
    std::size_t things = 0;
    for (const auto& i : data.scene.instances)
        if (!i.is_stuff) ++things;
    std::cout << "scene: " << data.scene.instances.size() << " instances (" << things
              << " things), " << data.cells.size() << " retained cells\n"
              << "queries: " << data.train.size() << " train / " << data.val.size()
              << " val\nwrote " << sp << " and " << qp << "\n";
    return 0;
}

int cmd_train_coarse(const CommonArgs& args) {
    TrainConfig cfg = load_config(args);
    Dataset data = load_or_build(cfg, args);
    ensure_out_dir(args);
    auto result = train_coarse(data, cfg);
    save_coarse_checkpoint(out_path(args, "coarse.retl"), result.model, cfg,
                           result.cell_index);
    // best-epoch snapshot (by validation recall@5)
    ParamMap params;
    result.model.collect(params);
    const auto final_state = [&] {
        std::map<std::string, std::vector<double>> s;
        for (const auto& [name, t] : params) s[name] = t.data();
        return s;
    }();
    restore_state(params, result.best_state);
    save_coarse_checkpoint(out_path(args, "coarse_best.retl"), result.model, cfg,
                           encode_all_cells(result.model, data.cells));
    restore_state(params, final_state);
    write_text(out_path(args, "coarse_history.json"),
               coarse_history_json(result).dump(1) + "\n");
    const auto& last = result.history.back();
    std::cout << "coarse: final val recall@1/3/5 = " << last.val_recall1 << "/"
              << last.val_recall3 << "/" << last.val_recall5 << " (best epoch "
              << result.best_epoch << ")\nwrote " << out_path(args, "coarse.retl")
              << "\n";
    return 0;
}

int cmd_train_fine(const CommonArgs& args, bool joint) {
    TrainConfig cfg = load_config(args);
    Dataset data = load_or_build(cfg, args);
    ensure_out_dir(args);
    auto result = joint ? train_fine_joint(data, cfg) : train_fine(data, cfg);
    save_fine_checkpoint(out_path(args, "fine.retl"), result.model, cfg);
    write_text(out_path(args, "fine_history.json"),
               fine_history_json(result).dump(1) + "\n");
    double precision = 0.0, recall = 0.0, error = 0.0;
    for (const auto& s : result.history) {
        if (s.phase != "regressor") {
            precision = s.val_precision;
            recall = s.val_recall;
        }
        if (s.phase != "matcher") error = s.val_regression_error;
    }
    std::cout << "fine (" << (joint ? "joint" : "cascade")
              << "): val precision/recall = " << precision << "/" << recall
              << ", gt-cell regression error = " << error << " m\nwrote "
              << out_path(args, "fine.retl") << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& coarse_path,
             const std::string& fine_path, std::vector<int> ks,
             std::vector<double> epss) {
    auto coarse = load_coarse_checkpoint(coarse_path);
    auto fine = load_fine_checkpoint(fine_path);
    TrainConfig cfg = coarse.cfg;
    if (!args.config_path.empty()) {
        TrainConfig override_cfg = load_config(args);
        cfg.eval_k = override_cfg.eval_k;
        cfg.eval_eps = override_cfg.eval_eps;
        cfg.coarse_eval_k = override_cfg.coarse_eval_k;
    }
    if (!ks.empty()) cfg.eval_k = ks;
    if (!epss.empty()) cfg.eval_eps = epss;
    Dataset data = load_or_build(cfg, args);
    ensure_out_dir(args);

    auto index = coarse.index.empty() ? encode_all_cells(coarse.model, data.cells)
                                      : coarse.index;
    MetricsReport report;
    report.config_echo = cfg.to_json();
    auto recall = coarse_recall(coarse.model, index, data.val, cfg.coarse_eval_k);
    for (auto [k, v] : recall)
        report.values["coarse.val.recall@" + std::to_string(k)] = v;
    for (int k : cfg.coarse_eval_k)
        report.values["coarse.val.random_baseline.recall@" + std::to_string(k)] =
            random_ranking_recall(data.val, data.cells, k, 50, cfg.seed ^ 0xba5eULL);

    auto matcher = eval_matcher(fine.model, data, data.val, cfg.seed ^ 0xe7a1ULL);
    report.values["matcher.val.precision"] = matcher.precision;
    report.values["matcher.val.recall"] = matcher.recall;

    std::ofstream jsonl(out_path(args, "predictions.jsonl"));
    auto loc = eval_localization(coarse.model, index, fine.model, data, data.val,
                                 cfg.eval_k, cfg.eval_eps, cfg.seed ^ 0x10cULL, &jsonl);
    for (const auto& [key, v] : loc.recall) {
        std::ostringstream name;
        name << "loc.val.recall.k" << key.first << ".eps" << key.second;
        report.values[name.str()] = v;
    }
    for (const auto& [key, v] : loc.center_recall) {
        std::ostringstream name;
        name << "loc.val.center_baseline.k" << key.first << ".eps" << key.second;
        report.values[name.str()] = v;
    }
    report.values["loc.val.gt_cell_error"] = loc.gt_cell_error;
    report.values["loc.val.gt_cell_center_error"] = loc.gt_cell_center_error;
    add_reference_rows(report);

    write_text(out_path(args, "metrics.json"), report.to_json().dump(1) + "\n");
    write_text(out_path(args, "metrics.txt"), report.to_table());
    std::cout << report.to_table();
    std::cout << "wrote " << out_path(args, "metrics.json") << ", metrics.txt, "
              << "predictions.jsonl\n";
    return 0;
}

std::vector<Hint> hints_from_text(const std::string& text) {
    std::vector<Hint> hints;
    std::size_t start = 0;
    while (start < text.size()) {
        auto stop = text.find('.', start);
        if (stop == std::string::npos) break;
        std::string sentence = text.substr(start, stop - start + 1);
        const auto first = sentence.find_first_not_of(" \t\n");
        if (first != std::string::npos) {
            sentence = sentence.substr(first);
            auto parsed = lang::parse_hint(sentence);
            Hint h;
            h.text = sentence;
            h.direction_words = parsed.direction_words;
            h.color_words = parsed.color_words;
            h.class_words = parsed.class_words;
            hints.push_back(std::move(h));
        }
        start = stop + 1;
    }
    if (hints.empty()) throw retloc::ParseError("no hint sentences found in --text");
    return hints;
}

int cmd_localize(const CommonArgs& args, const std::string& coarse_path,
                 const std::string& fine_path, const std::string& text, int k) {
    auto coarse = load_coarse_checkpoint(coarse_path);
    auto fine = load_fine_checkpoint(fine_path);
    TrainConfig cfg = coarse.cfg;
    Dataset data = load_or_build(cfg, args);
    auto hints = hints_from_text(text);

    // retrieval runs on the persisted cell-embedding index when available
    auto index = coarse.index.empty() ? encode_all_cells(coarse.model, data.cells)
                                      : coarse.index;
    auto ranked = retrieve_topk(coarse.model.encode_query(hints).data(), index,
                                static_cast<std::size_t>(k));
    std::cout << "top-" << k << " cells:\n";
    LocalizationPrediction best{};
    bool have_best = false;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        const Cell& cell = data.cell_by_id(ranked[r]);
        auto result = run_fine_stage(fine.model, cell, hints,
                                     pad_seed_for(cfg.seed, 0, cell.id));
        std::cout << "  #" << (r + 1) << " cell " << cell.id << " origin ("
                  << cell.origin.x << ", " << cell.origin.y << ") -> prediction ("
                  << result.prediction.position.x << ", "
                  << result.prediction.position.y << ")"
                  << (result.prediction.fallback ? " [fallback: cell center]" : "")
                  << ", " << result.matches.size() << " matches\n";
        if (!have_best) {
            best = result.prediction;
            have_best = true;
        }
    }
    if (have_best)
        std::cout << "predicted position: (" << best.position.x << ", "
                  << best.position.y << ")\n";
    return 0;
}

int cmd_dump_embeddings(const CommonArgs& args, const std::string& coarse_path) {
    auto coarse = load_coarse_checkpoint(coarse_path);
    TrainConfig cfg = coarse.cfg;
    Dataset data = load_or_build(cfg, args);
    ensure_out_dir(args);

    auto index = coarse.index.empty() ? encode_all_cells(coarse.model, data.cells)
                                      : coarse.index;
    {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "cell_id";
        for (std::size_t i = 0; i < cfg.d; ++i) os << ",e" << i;
        os << "\n";
        for (const auto& e : index) {
            os << e.cell_id;
            for (double v : e.embedding) os << "," << v;
            os << "\n";
        }
        write_text(out_path(args, "cell_embeddings.csv"), os.str());
    }
    {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "query,split,positive_cells";
        for (std::size_t i = 0; i < cfg.d; ++i) os << ",e" << i;
        os << "\n";
        auto dump = [&](const std::vector<QuerySample>& queries, const char* split,
                        std::size_t base) {
            for (std::size_t i = 0; i < queries.size(); ++i) {
                Tensor e = coarse.model.encode_query(queries[i].hints);
                os << (base + i) << "," << split << ",";
                for (std::size_t p = 0; p < queries[i].positive_cell_ids.size(); ++p)
                    os << (p ? ";" : "") << queries[i].positive_cell_ids[p];
                for (double v : e.data()) os << "," << v;
                os << "\n";
            }
        };
        dump(data.train, "train", 0);
        dump(data.val, "val", data.train.size());
        write_text(out_path(args, "query_embeddings.csv"), os.str());
    }
    std::cout << "wrote " << out_path(args, "cell_embeddings.csv") << " and "
              << out_path(args, "query_embeddings.csv") << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& stage) {
    TrainConfig cfg = load_config(args);
    Dataset data = load_or_build(cfg, args);
    ensure_out_dir(args);
    nlohmann::json out;

    if (stage == "coarse" || stage == "all") {
        struct Row {
            const char* name;
            bool point, text;
        };
        const Row rows[] = {{"wo_both_relations", false, false},
                            {"wo_linguistic_relation", true, false},
                            {"wo_visual_relation", false, true},
                            {"full", true, true}};
        std::cout << "coarse relation ablation (val recall@1/3/5):\n";
        auto& jrows = out["coarse_relations"] = nlohmann::json::array();
        for (const Row& row : rows) {
            TrainConfig variant = cfg;
            variant.point_relations = row.point;
            variant.text_relations = row.text;
            auto result = train_coarse(data, variant);
            auto recall = coarse_recall(result.model, result.cell_index, data.val,
                                        {1, 3, 5});
            std::cout << "  " << std::left << std::setw(24) << row.name << " "
                      << recall[1] << " / " << recall[3] << " / " << recall[5] << "\n";
            jrows.push_back({{"variant", row.name},
                             {"recall@1", recall[1]},
                             {"recall@3", recall[3]},
                             {"recall@5", recall[5]}});
        }
    }

    if (stage == "fine" || stage == "all") {
        std::cout << "fine-stage training strategy (precision/recall, regression "
                     "error):\n";
        auto cascade = train_fine(data, cfg);
        auto joint = train_fine_joint(data, cfg);
        TrainConfig no_ca_cfg = cfg;
        no_ca_cfg.cross_attention = false;
        auto no_ca = train_fine(data, no_ca_cfg);

        auto report = [&](const char* name, const FineModel& model,
                          bool uniform_confidence) {
            auto train_pr = eval_matcher(model, data, data.train, cfg.seed ^ 0xe7a1ULL);
            auto val_pr = eval_matcher(model, data, data.val, cfg.seed ^ 0xe7a1ULL);
            const double train_err = gt_cell_regression_error(
                model, data, data.train, cfg.seed ^ 0xe7a1ULL, false, uniform_confidence);
            const double val_err = gt_cell_regression_error(
                model, data, data.val, cfg.seed ^ 0xe7a1ULL, false, uniform_confidence);
            std::cout << "  " << std::left << std::setw(26) << name << " P/R train "
                      << train_pr.precision << "/" << train_pr.recall << "  val "
                      << val_pr.precision << "/" << val_pr.recall << "  err train "
                      << train_err << "  val " << val_err << "\n";
            return nlohmann::json{{"variant", name},
                                  {"train_precision", train_pr.precision},
                                  {"train_recall", train_pr.recall},
                                  {"val_precision", val_pr.precision},
                                  {"val_recall", val_pr.recall},
                                  {"train_regression_error", train_err},
                                  {"val_regression_error", val_err}};
        };
        auto& jrows = out["fine_strategy"] = nlohmann::json::array();
        jrows.push_back(report("joint", joint.model, false));
        jrows.push_back(report("cascade", cascade.model, false));
        jrows.push_back(report("wo_cross_attention", no_ca.model, false));
        jrows.push_back(report("wo_confidence_weighting", cascade.model, true));
    }

    write_text(out_path(args, "ablation.json"), out.dump(1) + "\n");
    std::cout << "wrote " << out_path(args, "ablation.json") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retloc: coarse-to-fine text-to-point-cloud localization"};
    app.require_subcommand(1);

    CommonArgs args;
    app.add_option("--config", args.config_path, "JSON config file");
    app.add_option("--seed", args.seed, "override the config seed");
    app.add_option("--out", args.out_dir, "output directory (default: out)");

    auto add_data_options = [&](CLI::App* cmd) {
        cmd->add_option("--scene", args.scene_path, "scene JSON (from `gen`)");
        cmd->add_option("--queries", args.queries_path, "query JSON (from `gen`)");
    };

    std::string scene_out, queries_out;
    auto* gen = app.add_subcommand("gen", "generate a synthetic scene and queries");
    gen->add_option("--scene-out", scene_out, "scene output path");
    gen->add_option("--queries-out", queries_out, "query-set output path");

    auto* tc = app.add_subcommand("train-coarse", "train the retrieval model");
    add_data_options(tc);

    bool joint = false;
    auto* tf = app.add_subcommand("train-fine", "train matcher and regressor");
    add_data_options(tf);
    tf->add_flag("--joint", joint, "joint training instead of the cascade");

    std::string coarse_path, fine_path;
    std::vector<int> ks;
    std::vector<double> epss;
    auto* ev = app.add_subcommand("eval", "evaluate retrieval, matching, localization");
    add_data_options(ev);
    ev->add_option("--coarse", coarse_path, "coarse checkpoint")->required();
    ev->add_option("--fine", fine_path, "fine checkpoint")->required();
    ev->add_option("--k", ks, "localization k values");
    ev->add_option("--eps", epss, "localization error thresholds (m)");

    std::string text;
    int k = 5;
    auto* loc = app.add_subcommand("localize", "localize a single textual query");
    add_data_options(loc);
    loc->add_option("--coarse", coarse_path, "coarse checkpoint")->required();
    loc->add_option("--fine", fine_path, "fine checkpoint")->required();
    loc->add_option("--text", text, "hint sentences, '.'-terminated")->required();
    loc->add_option("--k", k, "cells to retrieve");

    auto* dump = app.add_subcommand("dump-embeddings",
                                    "write cell/query embeddings as CSV");
    add_data_options(dump);
    dump->add_option("--coarse", coarse_path, "coarse checkpoint")->required();

    std::string stage = "all";
    auto* ab = app.add_subcommand("ablate", "relation and training-strategy ablations");
    add_data_options(ab);
    ab->add_option("--stage", stage, "coarse | fine | all")
        ->check(CLI::IsMember({"coarse", "fine", "all"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(args, scene_out, queries_out);
        if (tc->parsed()) return cmd_train_coarse(args);
        if (tf->parsed()) return cmd_train_fine(args, joint);
        if (ev->parsed()) return cmd_eval(args, coarse_path, fine_path, ks, epss);
        if (loc->parsed()) return cmd_localize(args, coarse_path, fine_path, text, k);
        if (dump->parsed()) return cmd_dump_embeddings(args, coarse_path);
        if (ab->parsed()) return cmd_ablate(args, stage);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {  // config/data/parse/vocabulary
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
