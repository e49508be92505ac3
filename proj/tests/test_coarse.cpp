#include <gtest/gtest.h>

#include <cmath>

#include "retloc/coarse.hpp"
#include "retloc/gradcheck.hpp"

using namespace retloc;

namespace {

Tensor random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(detail::shape_numel(shape));
    for (double& e : v) e = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

Instance random_instance(Rng& rng, int id, Vec2 around, ClassLabel cl) {
    std::vector<ScenePoint> pts;
    for (int i = 0; i < 9; ++i)
        pts.push_back({around.x + rng.uniform(-2, 2), around.y + rng.uniform(-2, 2),
                       rng.uniform(0, 4), rng.uniform(), rng.uniform(), rng.uniform()});
    return Instance::make(id, cl, pts);
}

Cell tiny_cell(Rng& rng, int n_instances) {
    Cell cell;
    cell.id = 0;
    cell.origin = {0, 0};
    cell.size = 30.0;
    for (int i = 0; i < n_instances; ++i)
        cell.instances.push_back(random_instance(
            rng, i, {rng.uniform(3, 27), rng.uniform(3, 27)}, ClassLabel::Car));
    return cell;
}

std::vector<Hint> tiny_hints(int n) {
    const char* dirs[] = {"east", "north", "southwest", "on-top", "west", "northeast"};
    const char* colors[] = {"red", "gray", "dark-green", "beige", "blue", "white"};
    const char* classes[] = {"car", "building", "terrain", "pole", "road", "trash-bin"};
    std::vector<Hint> hints;
    for (int i = 0; i < n; ++i) {
        Hint h;
        h.direction_words = {dirs[i % 6]};
        h.color_words = {colors[i % 6]};
        h.class_words = {classes[i % 6]};
        h.text = lang::render_hint_text(dirs[i % 6], colors[i % 6], classes[i % 6]);
        hints.push_back(h);
    }
    return hints;
}

}  // namespace

TEST(Attention, SingleElementReturnsValueRow) {
    Rng rng(1);
    Tensor q = random_param(rng, {1, 4});
    Tensor k = random_param(rng, {1, 4});
    Tensor v = random_param(rng, {1, 4});
    Tensor out = attention(q, k, v);
    EXPECT_EQ(out.data(), v.data());
}

TEST(Attention, IdenticalKeysGiveMeanOfValues) {
    Rng rng(2);
    std::vector<double> krow = {0.3, -0.2, 0.9, 0.1};
    std::vector<double> kdata;
    for (int i = 0; i < 3; ++i) kdata.insert(kdata.end(), krow.begin(), krow.end());
    Tensor q = random_param(rng, {2, 4});
    Tensor k = Tensor::from({3, 4}, kdata);
    Tensor v = random_param(rng, {3, 4});
    Tensor out = attention(q, k, v);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
            EXPECT_NEAR(out.at(i, j), mean, 1e-12);
        }
}

TEST(Attention, WidthMismatchThrows) {
    EXPECT_THROW(attention(Tensor::zeros({2, 4}), Tensor::zeros({3, 5}),
                           Tensor::zeros({3, 4})),
                 DimensionError);
}

TEST(Attention, Gradcheck) {
    Rng rng(3);
    Tensor q = random_param(rng, {3, 4});
    Tensor k = random_param(rng, {5, 4});
    Tensor v = random_param(rng, {5, 4});
    Tensor w = random_param(rng, {3, 4});
    auto loss = [&] { return sum_all(hadamard(attention(q, k, v), w)); };
    auto res = grad_check(loss, {{"q", q}, {"k", k}, {"v", v}});
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(Rsa, ZeroRelationsReduceToAttentionExactly) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.index(6), d = 2 + rng.index(6);
        Tensor q = random_param(rng, {n, d});
        Tensor k = random_param(rng, {n, d});
        Tensor v = random_param(rng, {n, d});
        Tensor zero_r = Tensor::zeros({n, n, d});
        Tensor plain = attention(q, k, v);
        Tensor enhanced = rsa(q, k, v, zero_r);
        for (std::size_t i = 0; i < plain.size(); ++i)
            EXPECT_NEAR(enhanced.at(i), plain.at(i), 1e-12);
    }
}

TEST(Rsa, ConstantRelationShiftsOutputByThatVector) {
    Rng rng(5);
    const std::size_t n = 4, d = 3;
    Tensor q = random_param(rng, {n, d});
    Tensor k = random_param(rng, {n, d});
    Tensor v = random_param(rng, {n, d});
    std::vector<double> rvec = {0.7, -1.1, 0.4};
    std::vector<double> rdata;
    for (std::size_t i = 0; i < n * n; ++i)
        rdata.insert(rdata.end(), rvec.begin(), rvec.end());
    Tensor r = Tensor::from({n, n, d}, rdata);
    Tensor plain = attention(q, k, v);
    Tensor enhanced = rsa(q, k, v, r);
    // softmax rows sum to 1, so a constant value correction passes through.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            EXPECT_NEAR(enhanced.at(i, j), plain.at(i, j) + rvec[j], 1e-12);
}

TEST(Rsa, GradcheckThroughRelationPath) {
    Rng rng(6);
    const std::size_t n = 3, d = 4;
    Tensor q = random_param(rng, {n, d});
    Tensor k = random_param(rng, {n, d});
    Tensor v = random_param(rng, {n, d});
    Tensor r = random_param(rng, {n, n, d});
    Tensor w = random_param(rng, {n, d});
    auto loss = [&] { return sum_all(hadamard(rsa(q, k, v, r), w)); };
    auto res = grad_check(loss, {{"q", q}, {"k", k}, {"v", v}, {"r", r}});
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(PointRelations, DiagonalIsZero) {
    Rng rng(7);
    Tensor w = random_param(rng, {3, 5});
    std::vector<Vec3> centers = {{1, 2, 0}, {4, -1, 2}, {0.5, 0.5, 1}};
    Tensor r = point_relations(centers, w);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            EXPECT_DOUBLE_EQ(r.at((i * 3 + i) * 5 + j), 0.0);
}

TEST(PointRelations, AntiSymmetryExact) {
    Rng rng(8);
    Tensor w = random_param(rng, {3, 6});
    std::vector<Vec3> centers;
    for (int i = 0; i < 5; ++i)
        centers.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(0, 5)});
    Tensor r = point_relations(centers, w);
    const std::size_t n = 5, d = 6;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c)
                EXPECT_NEAR(r.at((i * n + j) * d + c), -r.at((j * n + i) * d + c), 1e-12);
}

TEST(PointRelations, TranslationInvariance) {
    Rng rng(9);
    Tensor w = random_param(rng, {3, 4});
    std::vector<Vec3> centers, shifted;
    for (int i = 0; i < 4; ++i) {
        Vec3 c{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(0, 5)};
        centers.push_back(c);
        shifted.push_back({c.x + 123.0, c.y - 55.0, c.z + 7.0});
    }
    Tensor a = point_relations(centers, w);
    Tensor b = point_relations(shifted, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(HintRelations, IdenticalHintsGiveConstantRelation) {
    Rng rng(10);
    std::vector<double> row = {0.1, 0.2, 0.3};
    std::vector<double> hdata;
    for (int i = 0; i < 3; ++i) hdata.insert(hdata.end(), row.begin(), row.end());
    Tensor h = Tensor::from({3, 3}, hdata);
    Tensor w = random_param(rng, {6, 4});
    Tensor r = hint_relations(h, w);
    for (std::size_t ij = 1; ij < 9; ++ij)
        for (std::size_t c = 0; c < 4; ++c)
            EXPECT_DOUBLE_EQ(r.at(ij * 4 + c), r.at(c));
}

TEST(HintRelations, BlockIdentityProjectionExtractsFirstHint) {
    Rng rng(11);
    const std::size_t n = 3, d = 4;
    Tensor h = random_param(rng, {n, d});
    // W = [I ; 0] so that W·[h_i ; h_j] = h_i.
    std::vector<double> wdata(2 * d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) wdata[i * d + i] = 1.0;
    Tensor w = Tensor::from({2 * d, d}, wdata);
    Tensor r = hint_relations(h, w);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c)
                EXPECT_DOUBLE_EQ(r.at((i * n + j) * d + c), h.at(i, c));
}

TEST(HintRelations, Gradcheck) {
    Rng rng(12);
    Tensor h = random_param(rng, {3, 4});
    Tensor w = random_param(rng, {8, 4});
    Tensor probe = random_param(rng, {3, 3, 4});
    auto loss = [&] { return sum_all(hadamard(hint_relations(h, w), probe)); };
    auto res = grad_check(loss, {{"h", h}, {"w", w}});
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(CoarseModel, SingleInstancePoolOfOne) {
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 1, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(77));
    Rng rng(13);
    Cell cell = tiny_cell(rng, 1);
    Tensor out = model.encode_cell(cell);
    EXPECT_EQ(out.shape(), (Shape{12}));
}

TEST(CoarseModel, CellPermutationInvariance) {
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 2, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(78));
    Rng rng(14);
    Cell cell = tiny_cell(rng, 5);
    Tensor base = model.encode_cell(cell);
    Cell shuffled = cell;
    std::reverse(shuffled.instances.begin(), shuffled.instances.end());
    Tensor out = model.encode_cell(shuffled);
    for (std::size_t i = 0; i < base.size(); ++i)
        EXPECT_NEAR(out.at(i), base.at(i), 1e-9);
}

TEST(CoarseModel, QueryPermutationInvariance) {
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 2, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(79));
    auto hints = tiny_hints(6);
    Tensor base = model.encode_query(hints);
    std::vector<Hint> shuffled(hints.rbegin(), hints.rend());
    Tensor out = model.encode_query(shuffled);
    for (std::size_t i = 0; i < base.size(); ++i)
        EXPECT_NEAR(out.at(i), base.at(i), 1e-9);
}

TEST(CoarseModel, EncodeIsDeterministic) {
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 1, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(80));
    Rng rng(15);
    Cell cell = tiny_cell(rng, 4);
    EXPECT_EQ(model.encode_cell(cell).data(), model.encode_cell(cell).data());
}

TEST(CoarseModel, EmptyCellThrows) {
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 1, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(81));
    EXPECT_THROW(model.encode_cell(Cell{}), UsageError);
    EXPECT_THROW(model.encode_query({}), UsageError);
}

TEST(CoarseModel, DisabledRelationsMatchZeroRelationTensor) {
    // With relations off, each branch must equal the RSA path fed R = 0.
    CoarseConfig with{.d = 12, .heads = 2, .layers = 1, .hidden = 24,
                      .point_relations = true, .text_relations = true};
    CoarseModel a = CoarseModel::create(with, Rng(82));
    CoarseModel b = a;  // shared parameters, different flags
    b.cfg.point_relations = false;
    b.cfg.text_relations = false;
    // Zero every relation projection in `a`, making R identically 0.
    for (auto* layers : {&a.point_layers, &a.text_layers})
        for (auto& l : *layers)
            std::fill(l.w_rel.data().begin(), l.w_rel.data().end(), 0.0);
    Rng rng(16);
    Cell cell = tiny_cell(rng, 4);
    Tensor ra = a.encode_cell(cell), rb = b.encode_cell(cell);
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_NEAR(ra.at(i), rb.at(i), 1e-12);
    auto hints = tiny_hints(4);
    Tensor qa = a.encode_query(hints), qb = b.encode_query(hints);
    for (std::size_t i = 0; i < qa.size(); ++i) EXPECT_NEAR(qa.at(i), qb.at(i), 1e-12);
}

TEST(RankingLoss, SaturatedMarginsGiveZero) {
    // Orthogonal matched pairs with inner product comfortably above the margin.
    const std::size_t nb = 3, d = 3;
    std::vector<double> e(nb * d, 0.0);
    for (std::size_t i = 0; i < nb; ++i) e[i * d + i] = 2.0;
    Tensor c = Tensor::from({nb, d}, e);
    Tensor t = Tensor::from({nb, d}, e);
    Tensor loss = ranking_loss(c, t, 0.35);
    EXPECT_DOUBLE_EQ(loss.value(), 0.0);
}

TEST(RankingLoss, DegenerateHandValue) {
    // All four inner products equal 1 → every hinge term is exactly α,
    // and there are 2·N_b·(N_b−1) = 4 of them: loss = 4 · 0.35 = 1.4.
    Tensor c = Tensor::from({2, 2}, {1, 0, 1, 0});
    Tensor t = Tensor::from({2, 2}, {1, 0, 1, 0});
    Tensor loss = ranking_loss(c, t, 0.35);
    EXPECT_NEAR(loss.value(), 1.4, 1e-12);
}

TEST(RankingLoss, SaturatedTermsHaveZeroGradient) {
    const std::size_t nb = 2, d = 2;
    Tensor c = Tensor::param({nb, d}, {3, 0, 0, 3});
    Tensor t = Tensor::param({nb, d}, {3, 0, 0, 3});
    Tape tape;
    Tensor loss = ranking_loss(c, t, 0.35);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(loss.value(), 0.0);
    for (double g : c.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
    for (double g : t.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(RankingLoss, SmallBatchThrows) {
    Tensor c = Tensor::zeros({1, 4});
    EXPECT_THROW(ranking_loss(c, c, 0.35), UsageError);
}

TEST(RankingLoss, NonNegativeOnRandomInputs) {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor c = random_param(rng, {4, 6});
        Tensor t = random_param(rng, {4, 6});
        EXPECT_GE(ranking_loss(c, t, 0.35).value(), 0.0);
    }
}

TEST(RankingLoss, Gradcheck) {
    Rng rng(18);
    Tensor c = random_param(rng, {3, 5});
    Tensor t = random_param(rng, {3, 5});
    auto loss = [&] { return ranking_loss(c, t, 0.35); };
    auto res = grad_check(loss, {{"c", c}, {"t", t}});
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst_param;
}

TEST(RetrieveTopk, UnitNormMatchRanksFirst) {
    std::vector<CellEmbedding> cells = {
        {0, {1, 0, 0}}, {1, {0, 1, 0}}, {2, {0, 0, 1}}};
    auto ids = retrieve_topk({0, 1, 0}, cells, 2);
    ASSERT_EQ(ids.size(), 2u);
    EXPECT_EQ(ids[0], 1);
}

TEST(RetrieveTopk, KLargerThanCellCountClamps) {
    std::vector<CellEmbedding> cells = {{0, {1.0}}, {1, {2.0}}};
    auto ids = retrieve_topk({1.0}, cells, 10);
    EXPECT_EQ(ids.size(), 2u);
    EXPECT_EQ(ids[0], 1);
}

TEST(RetrieveTopk, TieBreaksByLowerCellId) {
    std::vector<CellEmbedding> cells = {{5, {1.0}}, {2, {1.0}}, {9, {1.0}}};
    auto ids = retrieve_topk({1.0}, cells, 3);
    EXPECT_EQ(ids, (std::vector<int>{2, 5, 9}));
}

TEST(RetrieveTopk, AgreesWithExhaustiveOracle) {
    Rng rng(19);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n_cells = 2 + rng.index(30), d = 1 + rng.index(8);
        std::vector<CellEmbedding> cells;
        for (std::size_t i = 0; i < n_cells; ++i) {
            std::vector<double> e(d);
            for (double& v : e) v = rng.uniform(-1, 1);
            cells.push_back({static_cast<int>(i), e});
        }
        std::vector<double> q(d);
        for (double& v : q) v = rng.uniform(-1, 1);
        const std::size_t k = 1 + rng.index(n_cells + 2);

        // Oracle: repeatedly scan for the best remaining cell.
        std::vector<bool> used(n_cells, false);
        std::vector<int> expected;
        for (std::size_t round = 0; round < std::min(k, n_cells); ++round) {
            int best = -1;
            double best_score = 0;
            for (std::size_t i = 0; i < n_cells; ++i) {
                if (used[i]) continue;
                double s = 0;
                for (std::size_t c = 0; c < d; ++c) s += q[c] * cells[i].embedding[c];
                if (best == -1 || s > best_score ||
                    (s == best_score && cells[i].cell_id < best)) {
                    best = cells[i].cell_id;
                    best_score = s;
                }
            }
            expected.push_back(best);
            used[best] = true;
        }
        EXPECT_EQ(retrieve_topk(q, cells, k), expected);
    }
}

TEST(CoarseModel, FullModelGradcheckTinyConfig) {
    // Tiny end-to-end configuration: d=12, 2 heads, 1 layer, 2 cells of 3
    // instances each, ranking loss over the 2-pair batch.
    CoarseConfig cfg{.d = 12, .heads = 2, .layers = 1, .hidden = 24};
    CoarseModel model = CoarseModel::create(cfg, Rng(99));
    Rng rng(20);
    std::vector<Cell> cells = {tiny_cell(rng, 3), tiny_cell(rng, 3)};
    cells[1].origin = {10, 10};
    std::vector<std::vector<Hint>> queries = {tiny_hints(3), tiny_hints(4)};
    std::reverse(queries[1].begin(), queries[1].end());

    ParamMap params;
    model.collect(params);
    auto loss = [&] {
        Tensor c = stack_rows({model.encode_cell(cells[0]), model.encode_cell(cells[1])});
        Tensor t = stack_rows({model.encode_query(queries[0]), model.encode_query(queries[1])});
        return ranking_loss(c, t, 0.35);
    };
    auto res = grad_check(loss, as_named(params), 1e-5);
    EXPECT_LT(res.max_rel_err, 1e-4)
        << res.worst_param << "[" << res.worst_index << "] analytic=" << res.analytic
        << " numeric=" << res.numeric;
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}
