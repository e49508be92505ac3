#pragma once

// Fine stage: cascaded matching and refinement inside one retrieved cell.
// Hints are matched to padded in-cell instances by a log-domain Sinkhorn
// optimal-transport matcher with a learnable dustbin; surviving matches are
// fused with instance context via cross-attention, and a small MLP regresses
// a 2D offset from each matched hint. The final position is the
// confidence-weighted combination of the per-match estimates.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "retloc/coarse.hpp"
#include "retloc/instance_encoder.hpp"
#include "retloc/language.hpp"
#include "retloc/params.hpp"
#include "retloc/random.hpp"
#include "retloc/scene.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

constexpr std::size_t kPadTarget = 16;
constexpr double kMatchThreshold = 0.2;

/// One slot of the padded instance list: an index into the cell's instances
/// plus a duplicate marker. Ground truth maps a hint to the original copy
/// only; duplicates are expected to land in the dustbin.
struct PaddedInstance {
    std::size_t source_index = 0;
    bool is_duplicate = false;
};

/// Fixes the instance count at `target`: larger cells contribute a random
/// subset (original order preserved), smaller ones are padded with random
/// repeats appended after the originals.
inline std::vector<PaddedInstance> pad_instances(const Cell& cell,
                                                 std::size_t target,
                                                 std::uint64_t seed) {
    if (cell.instances.empty())
        throw UsageError("pad_instances: cell " + std::to_string(cell.id) +
                         " has no instances");
    Rng rng(seed);
    const std::size_t n = cell.instances.size();
    std::vector<PaddedInstance> out;
    out.reserve(target);
    if (n >= target) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        rng.shuffle(idx);
        idx.resize(target);
        std::sort(idx.begin(), idx.end());
        for (std::size_t i : idx) out.push_back({i, false});
    } else {
        for (std::size_t i = 0; i < n; ++i) out.push_back({i, false});
        while (out.size() < target) out.push_back({rng.index(n), true});
    }
    return out;
}

struct Matcher {
    std::size_t d_m = 64;
    int iterations = 100;
    Tensor w_hint;   // d × d_m
    Tensor w_inst;   // d × d_m
    Tensor dustbin;  // learnable scalar score z

    static Matcher create(std::size_t d, std::size_t d_m, int iterations, Rng& rng) {
        Matcher m;
        m.d_m = d_m;
        m.iterations = iterations;
        m.w_hint = init::xavier(rng, d, d_m);
        m.w_inst = init::xavier(rng, d, d_m);
        m.dustbin = Tensor::param({1}, {1.0});
        return m;
    }

    void collect(ParamMap& params, const std::string& prefix) const {
        params[prefix + ".w_hint"] = w_hint;
        params[prefix + ".w_inst"] = w_inst;
        params[prefix + ".dustbin"] = dustbin;
    }
};

/// Log-domain Sinkhorn on an already augmented (h+1)×(p+1) score matrix
/// against the partial-assignment marginals: each hint and instance carries
/// mass 1, the hint dustbin absorbs p, the instance dustbin absorbs h.
/// Returns the exp of the normalized log-plan; differentiable.
inline Tensor sinkhorn_plan(const Tensor& augmented, int iterations) {
    detail::require_rank(augmented, 2, "sinkhorn_plan");
    const std::size_t h = augmented.dim(0) - 1, p = augmented.dim(1) - 1;
    std::vector<double> log_r(h + 1, 0.0);
    log_r[h] = std::log(static_cast<double>(p));
    std::vector<double> log_c(p + 1, 0.0);
    log_c[p] = std::log(static_cast<double>(h));
    Tensor log_row_marginals = Tensor::from({h + 1}, std::move(log_r));
    Tensor log_col_marginals = Tensor::from({p + 1}, std::move(log_c));

    Tensor u = Tensor::zeros({h + 1});
    Tensor v = Tensor::zeros({p + 1});
    for (int it = 0; it < iterations; ++it) {
        u = sub(log_row_marginals, logsumexp_axis(add_rowvec(augmented, v), 1));
        v = sub(log_col_marginals, logsumexp_axis(add_colvec(augmented, u), 0));
    }
    return exp(add_colvec(add_rowvec(augmented, v), u));
}

/// Projects hints and instances to the matching space, augments the score
/// matrix S_ij = ⟨U·h_i, V·p_j⟩/√d_m with a dustbin row/column holding the
/// learnable score z, and normalizes with Sinkhorn.
inline Tensor sinkhorn_match(const Tensor& hints, const Tensor& instances,
                             const Matcher& matcher) {
    detail::require_rank(hints, 2, "sinkhorn_match");
    detail::require_rank(instances, 2, "sinkhorn_match");
    const std::size_t h = hints.dim(0), p = instances.dim(0);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(matcher.d_m));
    Tensor scores = scale(matmul(matmul(hints, matcher.w_hint),
                                 transpose(matmul(instances, matcher.w_inst))),
                          inv_sqrt);
    Tensor bin_col = broadcast_scalar(matcher.dustbin, {h, 1});
    Tensor bin_row = broadcast_scalar(matcher.dustbin, {1, p + 1});
    Tensor augmented = concat({concat({scores, bin_col}, 1), bin_row}, 0);
    return sinkhorn_plan(augmented, matcher.iterations);
}

/// SuperGlue-style negative log-likelihood: −Σ log plan[j][i] over ground
/// truth (hint j, instance i) pairs, −Σ log plan[dustbin][i] over unmatched
/// instances, normalized by the term count. Plan entries are clamped at
/// 1e-12 before the log.
inline Tensor matcher_loss(const Tensor& plan,
                           const std::vector<std::pair<std::size_t, std::size_t>>& gt_pairs,
                           const std::vector<std::size_t>& gt_unmatched_instances) {
    detail::require_rank(plan, 2, "matcher_loss");
    const std::size_t rows = plan.dim(0), cols = plan.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(gt_pairs.size() + gt_unmatched_instances.size());
    for (const auto& [j, i] : gt_pairs) {
        if (j + 1 >= rows || i + 1 >= cols)
            throw UsageError("matcher_loss: ground-truth pair out of range");
        idx.push_back(j * cols + i);
    }
    for (std::size_t i : gt_unmatched_instances) {
        if (i + 1 >= cols)
            throw UsageError("matcher_loss: unmatched instance out of range");
        idx.push_back((rows - 1) * cols + i);
    }
    if (idx.empty()) return Tensor::scalar(0.0);
    return scale(mean_all(log(clamp_min(gather_elems(plan, idx), 1e-12))), -1.0);
}

struct Match {
    std::size_t instance_index = 0;  // padded slot
    std::size_t hint_index = 0;
    double confidence = 0.0;  // transport-plan mass, in [0,1]
};

/// Mutual-best readout on the interior plan followed by the confidence
/// filter (strictly greater than the threshold). Ties resolve to the lowest
/// index, and the result is a partial injection by construction.
inline std::vector<Match> extract_matches(const Tensor& plan,
                                          double threshold = kMatchThreshold) {
    detail::require_rank(plan, 2, "extract_matches");
    const std::size_t h = plan.dim(0) - 1, p = plan.dim(1) - 1;
    std::vector<std::size_t> row_best(h, 0);
    for (std::size_t j = 0; j < h; ++j) {
        double best = plan.at(j, 0);
        for (std::size_t i = 1; i < p; ++i)
            if (plan.at(j, i) > best) {
                best = plan.at(j, i);
                row_best[j] = i;
            }
    }
    std::vector<std::size_t> col_best(p, 0);
    for (std::size_t i = 0; i < p; ++i) {
        double best = plan.at(0, i);
        for (std::size_t j = 1; j < h; ++j)
            if (plan.at(j, i) > best) {
                best = plan.at(j, i);
                col_best[i] = j;
            }
    }
    std::vector<Match> matches;
    for (std::size_t j = 0; j < h; ++j) {
        const std::size_t i = row_best[j];
        const double w = plan.at(j, i);
        if (col_best[i] == j && w > threshold)
            matches.push_back({i, j, w});
    }
    return matches;
}

/// Cross-attention fusion block: H̃ = LN(H + Attn(W_Q·H, W_K·P, W_V·P)).
struct CrossAttentionBlock {
    Tensor wq, wk, wv;
    Tensor ln_g, ln_b;

    static CrossAttentionBlock create(std::size_t d, Rng& rng) {
        CrossAttentionBlock b;
        b.wq = init::xavier(rng, d, d);
        b.wk = init::xavier(rng, d, d);
        b.wv = init::xavier(rng, d, d);
        b.ln_g = init::ones({d});
        b.ln_b = init::zeros({d});
        return b;
    }

    Tensor forward(const Tensor& hints, const Tensor& instances) const {
        Tensor fused = attention(matmul(hints, wq), matmul(instances, wk),
                                 matmul(instances, wv));
        return layer_norm(add(hints, fused), ln_g, ln_b);
    }

    void collect(ParamMap& params, const std::string& prefix) const {
        params[prefix + ".wq"] = wq;
        params[prefix + ".wk"] = wk;
        params[prefix + ".wv"] = wv;
        params[prefix + ".ln_g"] = ln_g;
        params[prefix + ".ln_b"] = ln_b;
    }
};

/// Offset head: 3-layer perceptron d → d → d → 2 with relu between layers.
struct Regressor {
    Tensor w1, b1, w2, b2, w3, b3;

    static Regressor create(std::size_t d, Rng& rng) {
        Regressor r;
        r.w1 = init::xavier(rng, d, d);
        r.b1 = init::zeros({d});
        r.w2 = init::xavier(rng, d, d);
        r.b2 = init::zeros({d});
        r.w3 = init::zeros({d, 2});  // zero-initialized head: t̂ starts at (0,0)
        r.b3 = init::zeros({2});
        return r;
    }

    Tensor forward(const Tensor& fused_hints) const {
        Tensor x = relu(add_rowvec(matmul(fused_hints, w1), b1));
        x = relu(add_rowvec(matmul(x, w2), b2));
        return add_rowvec(matmul(x, w3), b3);
    }

    void collect(ParamMap& params, const std::string& prefix) const {
        params[prefix + ".w1"] = w1;
        params[prefix + ".b1"] = b1;
        params[prefix + ".w2"] = w2;
        params[prefix + ".b2"] = b2;
        params[prefix + ".w3"] = w3;
        params[prefix + ".b3"] = b3;
    }
};

struct LocalizationPrediction {
    Vec2 position{};
    bool fallback = false;  // empty assignment → cell-center fallback
};

/// ĝ = Σ_i (w_i / Σ_m w_m)(c_i + t̂_i) over surviving matches; invariant to
/// positive rescaling of the confidences and to match order. An empty
/// assignment falls back to the cell center, flagged in the output.
inline LocalizationPrediction combine_prediction(
    const std::vector<Match>& matches, const std::vector<Vec2>& instance_centers,
    const std::vector<Vec2>& offsets, Vec2 fallback_center) {
    if (matches.empty()) return {fallback_center, true};
    if (offsets.size() != matches.size())
        throw UsageError("combine_prediction: one offset per match required");
    double total = 0.0;
    for (const auto& m : matches) total += m.confidence;
    Vec2 out{};
    for (std::size_t k = 0; k < matches.size(); ++k) {
        const Vec2 estimate = instance_centers[matches[k].instance_index] + offsets[k];
        out = out + estimate * (matches[k].confidence / total);
    }
    return {out, false};
}

/// Slot index of the original (non-duplicate) copy of each hint's ground
/// truth instance, for hints whose instance survived padding. Duplicates are
/// never ground truth; they belong in the dustbin.
inline std::vector<std::pair<std::size_t, std::size_t>> ground_truth_pairs(
    const Cell& cell, const std::vector<PaddedInstance>& padded,
    const std::vector<int>& gt_instance_ids) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t j = 0; j < gt_instance_ids.size(); ++j) {
        for (std::size_t slot = 0; slot < padded.size(); ++slot) {
            if (padded[slot].is_duplicate) continue;
            if (cell.instances[padded[slot].source_index].id == gt_instance_ids[j]) {
                pairs.push_back({j, slot});
                break;
            }
        }
    }
    return pairs;
}

inline std::vector<std::size_t> unmatched_instances(
    std::size_t n_slots,
    const std::vector<std::pair<std::size_t, std::size_t>>& gt_pairs) {
    std::vector<bool> taken(n_slots, false);
    for (const auto& [j, slot] : gt_pairs) taken[slot] = true;
    std::vector<std::size_t> out;
    for (std::size_t slot = 0; slot < n_slots; ++slot)
        if (!taken[slot]) out.push_back(slot);
    return out;
}

struct FineConfig {
    std::size_t d = 120;
    std::size_t d_match = 64;
    int sinkhorn_iterations = 100;
    bool cross_attention = true;

    void validate() const {
        if (d % 6 != 0) throw ConfigError("fine model width must divide by 6");
        if (sinkhorn_iterations < 1)
            throw ConfigError("sinkhorn iterations must be >= 1");
    }
};

/// The fine stage's own encoders plus matcher, fusion block and regressor.
/// The matcher (with its encoders) trains first; the regressor phase then
/// freezes everything the matcher saw and trains only fusion + offset head.
struct FineModel {
    FineConfig cfg;
    InstanceEncoder instance_encoder;
    Vocabulary vocab;
    Matcher matcher;
    CrossAttentionBlock cross;
    Regressor regressor;

    static FineModel create(const FineConfig& cfg, Rng rng) {
        cfg.validate();
        FineModel m;
        m.cfg = cfg;
        Rng enc_rng = rng.fork(1);
        m.instance_encoder = InstanceEncoder::create(cfg.d, enc_rng);
        Rng vocab_rng = rng.fork(2);
        m.vocab = Vocabulary::create(cfg.d / 3, vocab_rng);
        Rng match_rng = rng.fork(3);
        m.matcher = Matcher::create(cfg.d, cfg.d_match, cfg.sinkhorn_iterations, match_rng);
        Rng cross_rng = rng.fork(4);
        m.cross = CrossAttentionBlock::create(cfg.d, cross_rng);
        Rng reg_rng = rng.fork(5);
        m.regressor = Regressor::create(cfg.d, reg_rng);
        return m;
    }

    Tensor encode_padded(const Cell& cell, const std::vector<PaddedInstance>& padded) const {
        const CellFrame frame{cell.origin, cell.size};
        std::vector<Tensor> rows;
        rows.reserve(padded.size());
        for (const auto& slot : padded)
            rows.push_back(instance_encoder.encode(cell.instances[slot.source_index], frame));
        return stack_rows(rows);
    }

    Tensor encode_hints(const std::vector<Hint>& hints) const {
        std::vector<Tensor> rows;
        rows.reserve(hints.size());
        for (const auto& h : hints) rows.push_back(encode_hint(h, vocab));
        return stack_rows(rows);
    }

    /// Parameters of the matching phase (encoders + matcher).
    void collect_matcher_params(ParamMap& params) const {
        instance_encoder.collect(params, "fine.instance");
        params["fine.vocab.embeddings"] = vocab.embeddings;
        matcher.collect(params, "fine.matcher");
    }

    /// Parameters of the refinement phase (fusion block + regressor).
    void collect_regressor_params(ParamMap& params) const {
        if (cfg.cross_attention) cross.collect(params, "fine.cross");
        regressor.collect(params, "fine.regressor");
    }

    void collect(ParamMap& params) const {
        collect_matcher_params(params);
        cross.collect(params, "fine.cross");
        regressor.collect(params, "fine.regressor");
    }
};

struct FineInference {
    LocalizationPrediction prediction;
    std::vector<Match> matches;            // padded-slot indices
    std::vector<PaddedInstance> padded;
    std::vector<int> matched_instance_ids;

    double confidence_sum() const {
        double s = 0.0;
        for (const auto& m : matches) s += m.confidence;
        return s;
    }
};

/// Full fine-stage inference on one (cell, hints) pair: pad, match, fuse,
/// regress, combine. `uniform_confidence` replaces the plan confidences with
/// equal weights in the final combination (the no-confidence-weighting
/// ablation); matching itself is unaffected.
inline FineInference run_fine_stage(const FineModel& model, const Cell& cell,
                                    const std::vector<Hint>& hints,
                                    std::uint64_t pad_seed,
                                    bool uniform_confidence = false) {
    FineInference out;
    out.padded = pad_instances(cell, kPadTarget, pad_seed);
    Tensor instance_feats = model.encode_padded(cell, out.padded);
    Tensor hint_feats = model.encode_hints(hints);
    Tensor plan = sinkhorn_match(hint_feats, instance_feats, model.matcher);
    out.matches = extract_matches(plan);

    std::vector<Vec2> centers;
    centers.reserve(out.padded.size());
    for (const auto& slot : out.padded)
        centers.push_back(cell.instances[slot.source_index].center2d());

    std::vector<Vec2> offsets;
    if (!out.matches.empty()) {
        std::vector<std::size_t> hint_rows;
        for (const auto& m : out.matches) hint_rows.push_back(m.hint_index);
        Tensor selected = gather_rows(hint_feats, hint_rows);
        Tensor fused = model.cfg.cross_attention
                           ? model.cross.forward(selected, instance_feats)
                           : selected;
        Tensor predicted = model.regressor.forward(fused);
        for (std::size_t i = 0; i < out.matches.size(); ++i)
            offsets.push_back({predicted.at(i, 0), predicted.at(i, 1)});
        for (const auto& m : out.matches)
            out.matched_instance_ids.push_back(
                cell.instances[out.padded[m.instance_index].source_index].id);
    }
    std::vector<Match> weighting = out.matches;
    if (uniform_confidence)
        for (auto& m : weighting) m.confidence = 1.0;
    out.prediction = combine_prediction(weighting, centers, offsets, cell.center());
    return out;
}

}  // namespace retloc
