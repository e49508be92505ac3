#pragma once

// Training loops. The coarse stage optimizes the pairwise ranking loss over
// batches of matched (query, cell) pairs with distinct cells. The fine stage
// trains in cascade: matcher first, then — with the matcher and its encoders
// frozen — the cross-attention block and offset regressor on extracted
// matches. A joint variant (both objectives in one phase) exists for the
// ablation harness.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "retloc/config.hpp"
#include "retloc/dataset.hpp"
#include "retloc/eval.hpp"
#include "retloc/optimizer.hpp"

namespace retloc {

namespace train_detail {

inline void check_finite(double loss, const char* stage) {
    if (!std::isfinite(loss))
        throw NumericError(std::string(stage) + ": non-finite loss");
}

/// Batches of sample indices whose ground-truth cells are pairwise distinct
/// (a duplicated positive cell would make Eq.-9 terms fight each other).
/// Shuffled order, deferred collisions, final partial batch dropped.
inline std::vector<std::vector<std::size_t>> distinct_cell_batches(
    const std::vector<int>& cell_ids, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> pending(cell_ids.size());
    for (std::size_t i = 0; i < pending.size(); ++i) pending[i] = i;
    rng.shuffle(pending);

    std::vector<std::vector<std::size_t>> batches;
    while (pending.size() >= batch_size) {
        std::vector<std::size_t> batch;
        std::set<int> used;
        std::vector<std::size_t> rest;
        for (std::size_t idx : pending) {
            if (batch.size() < batch_size && used.insert(cell_ids[idx]).second)
                batch.push_back(idx);
            else
                rest.push_back(idx);
        }
        if (batch.size() < batch_size) break;  // remaining samples all collide
        batches.push_back(std::move(batch));
        pending = std::move(rest);
    }
    return batches;
}

inline std::vector<std::vector<std::size_t>> plain_batches(std::size_t n,
                                                           std::size_t batch_size,
                                                           Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start + batch_size <= n; start += batch_size)
        batches.push_back({order.begin() + start, order.begin() + start + batch_size});
    return batches;
}

inline std::map<std::string, std::vector<double>> snapshot(const ParamMap& params) {
    std::map<std::string, std::vector<double>> state;
    for (const auto& [name, t] : params) state[name] = t.data();
    return state;
}

}  // namespace train_detail

inline void restore_state(ParamMap& params,
                          const std::map<std::string, std::vector<double>>& state) {
    for (auto& [name, t] : params) t.data() = state.at(name);
}

struct CoarseEpochStats {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_recall1 = 0.0, val_recall3 = 0.0, val_recall5 = 0.0;
};

struct CoarseTrainResult {
    CoarseModel model;
    std::vector<CoarseEpochStats> history;
    std::vector<CellEmbedding> cell_index;  // final model, all retained cells
    std::map<std::string, std::vector<double>> best_state;
    int best_epoch = -1;
    double best_recall5 = -1.0;
};

inline CoarseTrainResult train_coarse(const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty() || data.val.empty())
        throw ConfigError("train_coarse: empty train or val split");

    CoarseTrainResult result;
    result.model = CoarseModel::create(
        CoarseConfig{cfg.d, cfg.heads, cfg.layers, cfg.hidden, cfg.point_relations,
                     cfg.text_relations},
        Rng(cfg.seed));
    CoarseModel& model = result.model;

    std::vector<int> gt_cells;
    gt_cells.reserve(data.train.size());
    for (const auto& q : data.train)
        gt_cells.push_back(nearest_positive_cell(data, q));

    ParamMap params;
    model.collect(params);
    Adam opt(params, {.lr = cfg.coarse_lr, .weight_decay = cfg.coarse_weight_decay});
    const AugmentToggles toggles{cfg.augment_flip, cfg.augment_hint_shuffle,
                                 cfg.augment_rotation};
    Rng rng(cfg.seed ^ 0xc0a5ULL);

    for (int epoch = 0; epoch < cfg.coarse_epochs; ++epoch) {
        opt.set_lr(lr_schedule(epoch, cfg.coarse_lr, TrainStage::Coarse));
        auto batches =
            train_detail::distinct_cell_batches(gt_cells, cfg.coarse_batch, rng);
        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            std::vector<SampleBundle> bundles;
            bundles.reserve(batch.size());
            for (std::size_t idx : batch)
                bundles.push_back(make_bundle(data, data.train[idx], gt_cells[idx]));
            bundles = augment_batch(std::move(bundles), toggles, rng.next_u64());

            opt.zero_grad();
            Tape tape;
            std::vector<Tensor> cell_rows, query_rows;
            for (const auto& b : bundles) {
                cell_rows.push_back(model.encode_cell(b.cell));
                query_rows.push_back(model.encode_query(b.hints));
            }
            Tensor loss = ranking_loss(stack_rows(cell_rows), stack_rows(query_rows),
                                       cfg.alpha);
            train_detail::check_finite(loss.value(), "train_coarse");
            epoch_loss += loss.value();
            tape.backward(loss);
            opt.step();
        }

        CoarseEpochStats stats;
        stats.epoch = epoch;
        stats.lr = opt.lr();
        stats.train_loss = batches.empty() ? 0.0 : epoch_loss / batches.size();
        auto index = encode_all_cells(model, data.cells);
        auto recall = coarse_recall(model, index, data.val, {1, 3, 5});
        stats.val_recall1 = recall[1];
        stats.val_recall3 = recall[3];
        stats.val_recall5 = recall[5];
        result.history.push_back(stats);
        if (stats.val_recall5 > result.best_recall5) {
            result.best_recall5 = stats.val_recall5;
            result.best_epoch = epoch;
            result.best_state = train_detail::snapshot(params);
        }
    }
    result.cell_index = encode_all_cells(model, data.cells);
    return result;
}

struct FineEpochStats {
    int epoch = 0;
    std::string phase;  // "matcher" | "regressor" | "joint"
    double lr = 0.0;
    double train_loss = 0.0;
    double val_precision = 0.0, val_recall = 0.0;
    double val_regression_error = 0.0;
};

struct FineTrainResult {
    FineModel model;
    std::vector<FineEpochStats> history;
};

namespace train_detail {

struct PreparedSample {
    SampleBundle bundle;
    std::vector<PaddedInstance> padded;
    std::vector<std::pair<std::size_t, std::size_t>> gt_pairs;
    std::vector<std::size_t> gt_unmatched;
};

inline PreparedSample prepare_fine_sample(const Dataset& data, const QuerySample& q,
                                          int cell_id, const AugmentToggles& toggles,
                                          Rng& rng) {
    PreparedSample s;
    s.bundle = make_bundle(data, q, cell_id);
    augment_bundle(s.bundle, toggles, rng);
    s.padded = pad_instances(s.bundle.cell, kPadTarget, rng.next_u64());
    s.gt_pairs = ground_truth_pairs(s.bundle.cell, s.padded, s.bundle.gt_instance_ids);
    s.gt_unmatched = unmatched_instances(s.padded.size(), s.gt_pairs);
    return s;
}

/// Squared-error loss between predicted offsets for the matched hints and the
/// true offsets g − c_i (2D, meters). Returns an empty Tensor when no matches
/// survive.
inline Tensor regression_loss_for(const FineModel& model, const PreparedSample& s,
                                  const Tensor& hint_feats, const Tensor& inst_feats,
                                  const std::vector<Match>& matches) {
    if (matches.empty()) return Tensor();
    std::vector<std::size_t> hint_rows;
    std::vector<double> targets;
    for (const auto& m : matches) {
        hint_rows.push_back(m.hint_index);
        const Instance& inst =
            s.bundle.cell.instances[s.padded[m.instance_index].source_index];
        targets.push_back(s.bundle.target.x - inst.center.x);
        targets.push_back(s.bundle.target.y - inst.center.y);
    }
    Tensor selected = gather_rows(hint_feats, hint_rows);
    Tensor fused = model.cfg.cross_attention ? model.cross.forward(selected, inst_feats)
                                             : selected;
    Tensor diff = sub(model.regressor.forward(fused),
                      Tensor::from({matches.size(), 2}, std::move(targets)));
    return sum_all(hadamard(diff, diff));
}

}  // namespace train_detail

/// Phase 1: fit the fine stage's encoders + matcher to the ground-truth
/// matching with the SuperGlue-style negative log-likelihood.
inline void train_matcher_phase(FineModel& model, const Dataset& data,
                                const TrainConfig& cfg, Rng& rng,
                                std::vector<FineEpochStats>& history) {
    std::vector<int> gt_cells;
    for (const auto& q : data.train) gt_cells.push_back(nearest_positive_cell(data, q));
    const AugmentToggles toggles{cfg.augment_flip, cfg.augment_hint_shuffle,
                                 cfg.augment_rotation};
    ParamMap matcher_params;
    model.collect_matcher_params(matcher_params);
    Adam opt(matcher_params, {.lr = cfg.matcher_lr});
    for (int epoch = 0; epoch < cfg.matcher_epochs; ++epoch) {
        auto batches =
            train_detail::plain_batches(data.train.size(), cfg.matcher_batch, rng);
        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            opt.zero_grad();
            Tape tape;
            Tensor total = Tensor::scalar(0.0);
            for (std::size_t idx : batch) {
                auto s = train_detail::prepare_fine_sample(data, data.train[idx],
                                                           gt_cells[idx], toggles, rng);
                Tensor plan = sinkhorn_match(
                    model.encode_hints(s.bundle.hints),
                    model.encode_padded(s.bundle.cell, s.padded), model.matcher);
                total = add(total, matcher_loss(plan, s.gt_pairs, s.gt_unmatched));
            }
            Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
            train_detail::check_finite(loss.value(), "train_fine/matcher");
            epoch_loss += loss.value();
            tape.backward(loss);
            opt.step();
        }
        FineEpochStats stats;
        stats.epoch = epoch;
        stats.phase = "matcher";
        stats.lr = lr_schedule(epoch, cfg.matcher_lr, TrainStage::Matcher);
        stats.train_loss = batches.empty() ? 0.0 : epoch_loss / batches.size();
        auto val = eval_matcher(model, data, data.val, cfg.seed ^ 0xe7a1ULL);
        stats.val_precision = val.precision;
        stats.val_recall = val.recall;
        history.push_back(stats);
    }
}

/// Phase 2: freeze everything the matcher saw and fit cross-attention (when
/// enabled) + regressor on the extracted matches. The spec's cascade contract
/// is asserted: the matcher's bytes must be identical before and after.
inline void train_regressor_phase(FineModel& model, const Dataset& data,
                                  const TrainConfig& cfg, Rng& rng,
                                  std::vector<FineEpochStats>& history) {
    std::vector<int> gt_cells;
    for (const auto& q : data.train) gt_cells.push_back(nearest_positive_cell(data, q));
    const AugmentToggles toggles{cfg.augment_flip, cfg.augment_hint_shuffle,
                                 cfg.augment_rotation};
    ParamMap matcher_params;
    model.collect_matcher_params(matcher_params);
    const auto frozen_bytes = train_detail::snapshot(matcher_params);
    for (auto& [name, t] : matcher_params) t.set_requires_grad(false);

    ParamMap head_params;
    model.collect_regressor_params(head_params);
    Adam opt(head_params, {.lr = cfg.regressor_lr});
    for (int epoch = 0; epoch < cfg.regressor_epochs; ++epoch) {
        auto batches =
            train_detail::plain_batches(data.train.size(), cfg.regressor_batch, rng);
        double epoch_loss = 0.0;
        std::size_t counted_batches = 0;
        for (const auto& batch : batches) {
            opt.zero_grad();
            Tape tape;
            Tensor total = Tensor::scalar(0.0);
            std::size_t n_matches = 0;
            for (std::size_t idx : batch) {
                auto s = train_detail::prepare_fine_sample(data, data.train[idx],
                                                           gt_cells[idx], toggles, rng);
                Tensor hint_feats = model.encode_hints(s.bundle.hints);
                Tensor inst_feats = model.encode_padded(s.bundle.cell, s.padded);
                Tensor plan = sinkhorn_match(hint_feats, inst_feats, model.matcher);
                auto matches = extract_matches(plan);
                Tensor l = train_detail::regression_loss_for(model, s, hint_feats,
                                                             inst_feats, matches);
                if (l.defined()) {
                    total = add(total, l);
                    n_matches += matches.size();
                }
            }
            if (n_matches == 0) continue;
            Tensor loss = scale(total, 1.0 / static_cast<double>(n_matches));
            train_detail::check_finite(loss.value(), "train_fine/regressor");
            epoch_loss += loss.value();
            ++counted_batches;
            tape.backward(loss);
            opt.step();
        }
        FineEpochStats stats;
        stats.epoch = epoch;
        stats.phase = "regressor";
        stats.lr = cfg.regressor_lr;
        stats.train_loss = counted_batches == 0 ? 0.0 : epoch_loss / counted_batches;
        stats.val_regression_error =
            gt_cell_regression_error(model, data, data.val, cfg.seed ^ 0xe7a1ULL);
        history.push_back(stats);
    }
    for (auto& [name, t] : matcher_params) t.set_requires_grad(true);
    for (const auto& [name, t] : matcher_params)
        if (t.data() != frozen_bytes.at(name))
            throw NumericError("cascade contract violated: matcher parameter '" + name +
                               "' changed during regressor training");
}

/// Cascade training: matcher phase, then — matcher frozen — the regressor
/// phase on its extracted matches.
inline FineTrainResult train_fine(const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty() || data.val.empty())
        throw ConfigError("train_fine: empty train or val split");
    FineTrainResult result;
    result.model = FineModel::create(
        FineConfig{cfg.d, cfg.d_match, cfg.sinkhorn_iterations, cfg.cross_attention},
        Rng(cfg.seed ^ 0xf19eULL));
    Rng rng(cfg.seed ^ 0xf14eULL);
    train_matcher_phase(result.model, data, cfg, rng, result.history);
    train_regressor_phase(result.model, data, cfg, rng, result.history);
    return result;
}

/// Joint single-phase variant for the cascade-vs-joint ablation: both losses
/// optimized together for the matcher-phase epoch budget; the regressor
/// consumes whatever the current matcher extracts.
inline FineTrainResult train_fine_joint(const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    FineTrainResult result;
    result.model = FineModel::create(
        FineConfig{cfg.d, cfg.d_match, cfg.sinkhorn_iterations, cfg.cross_attention},
        Rng(cfg.seed ^ 0xf19eULL));  // same init as the cascade for comparability
    FineModel& model = result.model;

    std::vector<int> gt_cells;
    for (const auto& q : data.train) gt_cells.push_back(nearest_positive_cell(data, q));
    const AugmentToggles toggles{cfg.augment_flip, cfg.augment_hint_shuffle,
                                 cfg.augment_rotation};
    Rng rng(cfg.seed ^ 0xf14eULL);

    ParamMap params;
    model.collect(params);
    Adam opt(params, {.lr = cfg.matcher_lr});
    for (int epoch = 0; epoch < cfg.matcher_epochs; ++epoch) {
        auto batches =
            train_detail::plain_batches(data.train.size(), cfg.matcher_batch, rng);
        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            opt.zero_grad();
            Tape tape;
            Tensor total = Tensor::scalar(0.0);
            std::size_t n_matches = 0;
            for (std::size_t idx : batch) {
                auto s = train_detail::prepare_fine_sample(data, data.train[idx],
                                                           gt_cells[idx], toggles, rng);
                Tensor hint_feats = model.encode_hints(s.bundle.hints);
                Tensor inst_feats = model.encode_padded(s.bundle.cell, s.padded);
                Tensor plan = sinkhorn_match(hint_feats, inst_feats, model.matcher);
                total = add(total, matcher_loss(plan, s.gt_pairs, s.gt_unmatched));
                auto matches = extract_matches(plan);
                Tensor l = train_detail::regression_loss_for(model, s, hint_feats,
                                                             inst_feats, matches);
                if (l.defined()) {
                    // keep the regression term on the same per-match scale as
                    // the cascade's phase 2
                    total = add(total, scale(l, 1.0 / static_cast<double>(
                                                      std::max<std::size_t>(1, matches.size()))));
                    n_matches += matches.size();
                }
            }
            Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
            train_detail::check_finite(loss.value(), "train_fine_joint");
            epoch_loss += loss.value();
            tape.backward(loss);
            if (n_matches == 0) {
                // no match cleared the threshold anywhere in the batch, so the
                // fusion/regressor parameters saw no gradient this step
                for (auto& [name, t] : params)
                    if (name.rfind("fine.cross", 0) == 0 ||
                        name.rfind("fine.regressor", 0) == 0)
                        t.node()->grad_buf();
            }
            opt.step();
        }
        FineEpochStats stats;
        stats.epoch = epoch;
        stats.phase = "joint";
        stats.lr = cfg.matcher_lr;
        stats.train_loss = batches.empty() ? 0.0 : epoch_loss / batches.size();
        auto val = eval_matcher(model, data, data.val, cfg.seed ^ 0xe7a1ULL);
        stats.val_precision = val.precision;
        stats.val_recall = val.recall;
        stats.val_regression_error =
            gt_cell_regression_error(model, data, data.val, cfg.seed ^ 0xe7a1ULL);
        result.history.push_back(stats);
    }
    return result;
}

}  // namespace retloc
