#pragma once

// Coarse stage: relation-enhanced self-attention over in-cell instances and
// query hints, pooled into a joint embedding space for cell retrieval, trained
// with a pairwise ranking loss.
//
// Relation features enter through the value path: RSA adds the relation
// tensor, pooled over its second axis, onto V before aggregation. Point-cloud
// relations are projected center displacements; hint relations are projected
// concatenations of the original hint embeddings. Both are recomputed at every
// layer through that layer's own projection.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "retloc/instance_encoder.hpp"
#include "retloc/language.hpp"
#include "retloc/params.hpp"
#include "retloc/scene.hpp"
#include "retloc/tensor.hpp"

namespace retloc {

/// Attn(Q, K, V) = softmax_rows(Q·Kᵀ/√d_h)·V.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    detail::require_rank(q, 2, "attention");
    detail::require_rank(k, 2, "attention");
    detail::require_rank(v, 2, "attention");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
        throw DimensionError("attention: incompatible shapes Q" +
                             detail::shape_str(q.shape()) + " K" +
                             detail::shape_str(k.shape()) + " V" +
                             detail::shape_str(v.shape()));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
    return matmul(weights, v);
}

/// RSA(Q, K, V, R) = softmax_rows(Q·Kᵀ/√d_h)·(V + Pool(R, 1)) with R of shape
/// N×N×d_h already projected into the head subspace; Pool is the mean over
/// axis 1. R = 0 reduces exactly to plain attention.
inline Tensor rsa(const Tensor& q, const Tensor& k, const Tensor& v,
                  const Tensor& r) {
    detail::require_rank(r, 3, "rsa");
    if (r.dim(0) != r.dim(1) || r.dim(0) != v.dim(0) || r.dim(2) != v.dim(1))
        throw DimensionError("rsa: relation tensor " + detail::shape_str(r.shape()) +
                             " does not match V " + detail::shape_str(v.shape()));
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
        throw DimensionError("rsa: incompatible Q/K/V shapes");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
    return matmul(weights, add(v, mean_axis(r, 1)));
}

/// Geometric relations: R[i][j] = W·(c_i − c_j) for instance centers c
/// (cell-local). Anti-symmetric and invariant to translating all centers.
inline Tensor point_relations(const std::vector<Vec3>& centers, const Tensor& w) {
    detail::require_rank(w, 2, "point_relations");
    if (w.dim(0) != 3)
        throw DimensionError("point_relations: projection must be 3×d, got " +
                             detail::shape_str(w.shape()));
    const std::size_t n = centers.size();
    std::vector<double> disp(n * n * 3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            disp[(i * n + j) * 3 + 0] = centers[i].x - centers[j].x;
            disp[(i * n + j) * 3 + 1] = centers[i].y - centers[j].y;
            disp[(i * n + j) * 3 + 2] = centers[i].z - centers[j].z;
        }
    Tensor d = Tensor::from({n * n, 3}, std::move(disp));
    return reshape(matmul(d, w), {n, n, w.dim(1)});
}

/// Linguistic relations: R[i][j] = W·[h_i ; h_j] with W of shape 2d×d.
inline Tensor hint_relations(const Tensor& h, const Tensor& w) {
    detail::require_rank(h, 2, "hint_relations");
    detail::require_rank(w, 2, "hint_relations");
    const std::size_t n = h.dim(0), d = h.dim(1);
    if (w.dim(0) != 2 * d)
        throw DimensionError("hint_relations: projection must be 2d×d, got " +
                             detail::shape_str(w.shape()));
    std::vector<std::size_t> first, second;
    first.reserve(n * n);
    second.reserve(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            first.push_back(i);
            second.push_back(j);
        }
    Tensor pairs = concat({gather_rows(h, first), gather_rows(h, second)}, 1);
    return reshape(matmul(pairs, w), {n, n, w.dim(1)});
}

/// One pre-norm transformer encoder layer with multi-head RSA:
///   x ← x + W_O · multihead_rsa(LN(x));  x ← x + FFN(LN(x)).
/// The relation source (center displacements or hint-embedding pairs) is
/// projected by this layer's own relation matrix and sliced per head.
struct RsaLayer {
    std::size_t d = 0, heads = 1, head_dim = 0, hidden = 0;
    Tensor wq, wk, wv, wo;
    Tensor w_rel;  // rel_in × d
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;

    static RsaLayer create(std::size_t d, std::size_t heads, std::size_t hidden,
                           std::size_t rel_in, Rng& rng) {
        if (heads == 0 || d % heads != 0)
            throw ConfigError("model width " + std::to_string(d) +
                              " must divide by head count " + std::to_string(heads));
        RsaLayer l;
        l.d = d;
        l.heads = heads;
        l.head_dim = d / heads;
        l.hidden = hidden;
        l.wq = init::xavier(rng, d, d);
        l.wk = init::xavier(rng, d, d);
        l.wv = init::xavier(rng, d, d);
        l.wo = init::xavier(rng, d, d);
        l.w_rel = init::xavier(rng, rel_in, d);
        l.ln1_g = init::ones({d});
        l.ln1_b = init::zeros({d});
        l.ln2_g = init::ones({d});
        l.ln2_b = init::zeros({d});
        l.ff1_w = init::xavier(rng, d, hidden);
        l.ff1_b = init::zeros({hidden});
        l.ff2_w = init::xavier(rng, hidden, d);
        l.ff2_b = init::zeros({d});
        return l;
    }

    /// relation_src: nullptr → vanilla self-attention; otherwise a
    /// (N²×rel_in) matrix of per-pair relation inputs.
    Tensor forward(const Tensor& x, const Tensor* relation_src) const {
        const std::size_t n = x.dim(0);
        Tensor u = layer_norm(x, ln1_g, ln1_b);
        Tensor q = matmul(u, wq), k = matmul(u, wk), v = matmul(u, wv);
        Tensor r_full;
        if (relation_src != nullptr)
            r_full = reshape(matmul(*relation_src, w_rel), {n, n, d});
        std::vector<Tensor> head_outputs;
        head_outputs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * head_dim, c1 = (h + 1) * head_dim;
            Tensor qh = slice_last(q, c0, c1);
            Tensor kh = slice_last(k, c0, c1);
            Tensor vh = slice_last(v, c0, c1);
            head_outputs.push_back(
                relation_src != nullptr
                    ? rsa(qh, kh, vh, slice_last(r_full, c0, c1))
                    : attention(qh, kh, vh));
        }
        Tensor attended = add(x, matmul(concat(head_outputs, 1), wo));
        Tensor f = layer_norm(attended, ln2_g, ln2_b);
        f = relu(add_rowvec(matmul(f, ff1_w), ff1_b));
        f = add_rowvec(matmul(f, ff2_w), ff2_b);
        return add(attended, f);
    }

    void collect(ParamMap& params, const std::string& prefix,
                 bool with_relations = true) const {
        params[prefix + ".wq"] = wq;
        params[prefix + ".wk"] = wk;
        params[prefix + ".wv"] = wv;
        params[prefix + ".wo"] = wo;
        if (with_relations) params[prefix + ".w_rel"] = w_rel;
        params[prefix + ".ln1_g"] = ln1_g;
        params[prefix + ".ln1_b"] = ln1_b;
        params[prefix + ".ln2_g"] = ln2_g;
        params[prefix + ".ln2_b"] = ln2_b;
        params[prefix + ".ff1_w"] = ff1_w;
        params[prefix + ".ff1_b"] = ff1_b;
        params[prefix + ".ff2_w"] = ff2_w;
        params[prefix + ".ff2_b"] = ff2_b;
    }
};

struct CoarseConfig {
    std::size_t d = 120;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t hidden = 2048;
    bool point_relations = true;
    bool text_relations = true;

    void validate() const {
        if (d % 6 != 0)
            throw ConfigError("model width must divide by 6, got " + std::to_string(d));
        if (heads == 0 || d % heads != 0)
            throw ConfigError("model width must divide by head count");
        if (layers == 0) throw ConfigError("at least one encoder layer required");
    }
};

/// Two-branch encoder: instances → RSA stack → mean-pool, hints → RSA stack →
/// mean-pool, both into R^d.
struct CoarseModel {
    CoarseConfig cfg;
    InstanceEncoder instance_encoder;
    Vocabulary vocab;
    std::vector<RsaLayer> point_layers;
    std::vector<RsaLayer> text_layers;

    static CoarseModel create(const CoarseConfig& cfg, Rng rng) {
        cfg.validate();
        CoarseModel m;
        m.cfg = cfg;
        Rng enc_rng = rng.fork(1);
        m.instance_encoder = InstanceEncoder::create(cfg.d, enc_rng);
        Rng vocab_rng = rng.fork(2);
        m.vocab = Vocabulary::create(cfg.d / 3, vocab_rng);
        for (std::size_t i = 0; i < cfg.layers; ++i) {
            Rng lr = rng.fork(10 + i);
            m.point_layers.push_back(
                RsaLayer::create(cfg.d, cfg.heads, cfg.hidden, 3, lr));
            Rng tr = rng.fork(100 + i);
            m.text_layers.push_back(
                RsaLayer::create(cfg.d, cfg.heads, cfg.hidden, 2 * cfg.d, tr));
        }
        return m;
    }

    /// 𝒞 = mean-pool over instances of the point branch output.
    Tensor encode_cell(const Cell& cell) const {
        if (cell.instances.empty())
            throw UsageError("encode_cell: cell " + std::to_string(cell.id) +
                             " has no instances");
        const CellFrame frame{cell.origin, cell.size};
        const std::size_t n = cell.instances.size();
        std::vector<Tensor> rows;
        rows.reserve(n);
        for (const auto& inst : cell.instances)
            rows.push_back(instance_encoder.encode(inst, frame));
        Tensor x = stack_rows(rows);

        Tensor displacements;
        if (cfg.point_relations) {
            std::vector<double> disp(n * n * 3);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const Vec3& a = cell.instances[i].center;
                    const Vec3& b = cell.instances[j].center;
                    disp[(i * n + j) * 3 + 0] = a.x - b.x;
                    disp[(i * n + j) * 3 + 1] = a.y - b.y;
                    disp[(i * n + j) * 3 + 2] = a.z - b.z;
                }
            displacements = Tensor::from({n * n, 3}, std::move(disp));
        }
        for (const auto& layer : point_layers)
            x = layer.forward(x, cfg.point_relations ? &displacements : nullptr);
        return mean_axis(x, 0);
    }

    /// 𝒯 = mean-pool over hints of the text branch output. Relation inputs
    /// are pairs of the original hint embeddings.
    Tensor encode_query(const std::vector<Hint>& hints) const {
        if (hints.empty()) throw UsageError("encode_query: no hints");
        const std::size_t n = hints.size();
        std::vector<Tensor> rows;
        rows.reserve(n);
        for (const auto& h : hints) rows.push_back(encode_hint(h, vocab));
        Tensor x = stack_rows(rows);

        Tensor pairs;
        if (cfg.text_relations) {
            std::vector<std::size_t> first, second;
            first.reserve(n * n);
            second.reserve(n * n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    first.push_back(i);
                    second.push_back(j);
                }
            pairs = concat({gather_rows(x, first), gather_rows(x, second)}, 1);
        }
        Tensor y = x;
        for (const auto& layer : text_layers)
            y = layer.forward(y, cfg.text_relations ? &pairs : nullptr);
        return mean_axis(y, 0);
    }

    /// Relation projections of disabled branches are excluded: they are not
    /// part of the trainable (or persisted) surface of an ablated model.
    void collect(ParamMap& params) const {
        instance_encoder.collect(params, "coarse.instance");
        params["coarse.vocab.embeddings"] = vocab.embeddings;
        for (std::size_t i = 0; i < point_layers.size(); ++i)
            point_layers[i].collect(params, "coarse.point.layer" + std::to_string(i),
                                    cfg.point_relations);
        for (std::size_t i = 0; i < text_layers.size(); ++i)
            text_layers[i].collect(params, "coarse.text.layer" + std::to_string(i),
                                   cfg.text_relations);
    }
};

/// Eq.-9-style pairwise ranking loss over a batch of matched (cell, query)
/// embedding rows:
///   Σ_m Σ_{n≠m} [α − ⟨C_m,T_m⟩ + ⟨C_m,T_n⟩]₊ + [α − ⟨T_m,C_m⟩ + ⟨T_m,C_n⟩]₊.
/// The diagonal hinge terms are identically α (value and gradient cancel), so
/// they are summed and subtracted as a constant.
inline Tensor ranking_loss(const Tensor& cells, const Tensor& queries, double alpha) {
    detail::require_rank(cells, 2, "ranking_loss");
    detail::require_rank(queries, 2, "ranking_loss");
    detail::require_same_shape(cells, queries, "ranking_loss");
    const std::size_t nb = cells.dim(0);
    if (nb < 2)
        throw UsageError("ranking_loss: batch must hold at least 2 pairs, got " +
                         std::to_string(nb));
    Tensor gram = matmul(cells, transpose(queries));  // gram[m][n] = ⟨C_m, T_n⟩
    std::vector<std::size_t> diag_idx;
    diag_idx.reserve(nb);
    for (std::size_t m = 0; m < nb; ++m) diag_idx.push_back(m * nb + m);
    Tensor diag = gather_elems(gram, diag_idx);
    Tensor neg_diag = scale(diag, -1.0);
    Tensor alpha_mat = Tensor::full({nb, nb}, alpha);

    // rows: fixed C_m against all T_n;  cols: fixed T_m against all C_n.
    Tensor row_terms = relu(add(add_colvec(gram, neg_diag), alpha_mat));
    Tensor col_terms = relu(add(add_rowvec(gram, neg_diag), alpha_mat));
    Tensor total = add(sum_all(row_terms), sum_all(col_terms));
    return sub(total, Tensor::scalar(2.0 * static_cast<double>(nb) * alpha));
}

struct CellEmbedding {
    int cell_id = -1;
    std::vector<double> embedding;
};

/// Inner-product retrieval, descending similarity, ties broken by lower cell
/// id; returns min(k, #cells) ids.
inline std::vector<int> retrieve_topk(const std::vector<double>& query,
                                      const std::vector<CellEmbedding>& cells,
                                      std::size_t k) {
    if (k == 0) throw UsageError("retrieve_topk: k must be >= 1");
    std::vector<std::pair<double, int>> scored;
    scored.reserve(cells.size());
    for (const auto& c : cells) {
        double s = 0.0;
        for (std::size_t i = 0; i < query.size(); ++i) s += query[i] * c.embedding[i];
        scored.push_back({s, c.cell_id});
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<int> out;
    for (std::size_t i = 0; i < std::min(k, scored.size()); ++i)
        out.push_back(scored[i].second);
    return out;
}

}  // namespace retloc
