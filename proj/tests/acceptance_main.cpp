// Acceptance suite: one pass/fail line per criterion, exit 0 only if all pass.
//
// Criteria 1-5 and 9 are property checks (seconds). Criteria 6-8 train the
// desk-scale models for three seeds (full + ablation variants) and compare
// medians; expect roughly half an hour per seed on one core.
//
// Usage: acceptance [criterion ...]   e.g. `acceptance 1 2 5`; default = all.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "retloc/retloc.hpp"

using namespace retloc;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = true;
    std::string detail;
};

struct Check {
    bool ok;
    std::string text;
};

Outcome combine(const std::vector<Check>& checks) {
    Outcome out;
    std::ostringstream os;
    for (const auto& c : checks) {
        out.pass &= c.ok;
        os << (c.ok ? "[ok] " : "[FALSIFIED] ") << c.text << "\n";
    }
    out.detail = os.str();
    return out;
}

double median3(double a, double b, double c) {
    std::vector<double> v = {a, b, c};
    std::sort(v.begin(), v.end());
    return v[1];
}

Tensor random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(detail::shape_numel(shape));
    for (double& e : v) e = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// C1: gradient correctness
// ---------------------------------------------------------------------------

Instance make_instance(Rng& rng, int id, Vec2 around) {
    std::vector<ScenePoint> pts;
    for (int i = 0; i < 9; ++i)
        pts.push_back({around.x + rng.uniform(-2, 2), around.y + rng.uniform(-2, 2),
                       rng.uniform(0, 4), rng.uniform(), rng.uniform(), rng.uniform()});
    return Instance::make(id, ClassLabel::Car, pts);
}

Cell make_cell(Rng& rng, int n) {
    Cell cell;
    cell.id = 0;
    cell.origin = {0, 0};
    cell.size = 30.0;
    for (int i = 0; i < n; ++i)
        cell.instances.push_back(
            make_instance(rng, i, {rng.uniform(3, 27), rng.uniform(3, 27)}));
    return cell;
}

std::vector<Hint> make_hints(int n) {
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

Outcome criterion1() {
    const auto start = Clock::now();
    std::vector<Check> checks;
    Rng rng(20240901);
    auto expect = [&](const char* name, const GradCheckResult& res, double tol) {
        std::ostringstream os;
        os << name << ": rel-err " << res.max_rel_err << " (worst " << res.worst_param
           << ")";
        checks.push_back({res.max_rel_err < tol, os.str()});
    };

    {  // matmul / transpose
        Tensor a = random_param(rng, {3, 4}), b = random_param(rng, {4, 2});
        expect("matmul",
               grad_check([&] { return sum_all(relu(matmul(a, transpose(transpose(b))))); },
                          {{"a", a}, {"b", b}}),
               1e-4);
    }
    {  // softmax_rows
        Tensor x = random_param(rng, {4, 6}), w = random_param(rng, {4, 6});
        expect("softmax_rows",
               grad_check([&] { return sum_all(hadamard(softmax_rows(x), w)); },
                          {{"x", x}}),
               1e-4);
    }
    {  // layer_norm
        Tensor x = random_param(rng, {3, 5});
        Tensor g = random_param(rng, {5}, 0.5, 1.5), b = random_param(rng, {5});
        Tensor w = random_param(rng, {3, 5});
        expect("layer_norm",
               grad_check([&] { return sum_all(hadamard(layer_norm(x, g, b), w)); },
                          {{"x", x}, {"g", g}, {"b", b}}),
               1e-4);
    }
    {  // elementwise & reduction family
        Tensor a = random_param(rng, {3, 4}), b = random_param(rng, {3, 4});
        Tensor rv = random_param(rng, {4}), cv = random_param(rng, {3});
        Tensor z = random_param(rng, {1});
        expect("elementwise_and_reduce",
               grad_check(
                   [&] {
                       Tensor x = add(hadamard(sub(a, b), b), scale(a, 0.7));
                       x = add_rowvec(add_colvec(x, cv), rv);
                       x = hadamard(x, broadcast_scalar(z, {3, 4}));
                       Tensor m = concat({mean_axis(x, 0), max_axis(relu(x), 0)}, 0);
                       Tensor e = exp(scale(m, 0.2));
                       Tensor l = log(clamp_min(e, 1e-12));
                       Tensor g = gather_rows(reshape(l, {4, 2}), {1, 1, 3});
                       return add(mean_all(g),
                                  dot(gather_elems(x, {0, 5, 11}),
                                      gather_elems(x, {2, 4, 6})));
                   },
                   {{"a", a}, {"b", b}, {"rv", rv}, {"cv", cv}, {"z", z}}),
               1e-4);
    }
    {  // logsumexp + stack/slice
        Tensor x = random_param(rng, {3, 4});
        Tensor r0 = random_param(rng, {3}), r1 = random_param(rng, {3});
        expect("logsumexp/stack/slice",
               grad_check(
                   [&] {
                       Tensor s = stack_rows({r0, r1});
                       Tensor y = slice_last(concat({x, transpose(s)}, 1), 2, 5);
                       return dot(logsumexp_axis(y, 1), logsumexp_axis(transpose(y), 0));
                   },
                   {{"x", x}, {"r0", r0}, {"r1", r1}}),
               1e-4);
    }
    {  // attention / rsa / relations
        Tensor q = random_param(rng, {3, 4}), k = random_param(rng, {3, 4});
        Tensor v = random_param(rng, {3, 4}), r = random_param(rng, {3, 3, 4});
        Tensor w = random_param(rng, {3, 4});
        expect("attention",
               grad_check([&] { return sum_all(hadamard(attention(q, k, v), w)); },
                          {{"q", q}, {"k", k}, {"v", v}}),
               1e-4);
        expect("rsa",
               grad_check([&] { return sum_all(hadamard(rsa(q, k, v, r), w)); },
                          {{"q", q}, {"k", k}, {"v", v}, {"r", r}}),
               1e-4);
        Tensor wr = random_param(rng, {8, 4});
        Tensor probe = random_param(rng, {3, 3, 4});
        expect("hint_relations",
               grad_check(
                   [&] { return sum_all(hadamard(hint_relations(q, wr), probe)); },
                   {{"h", q}, {"w", wr}}),
               1e-4);
        Tensor wp = random_param(rng, {3, 4});
        std::vector<Vec3> centers = {{1, 2, 0}, {5, 1, 1}, {0, 7, 2}};
        expect("point_relations",
               grad_check(
                   [&] { return sum_all(hadamard(point_relations(centers, wp), probe)); },
                   {{"w", wp}}),
               1e-4);
    }
    {  // sinkhorn + matcher loss + cross-attention + regressor
        Rng mrng(8);
        Matcher matcher = Matcher::create(6, 4, 25, mrng);
        CrossAttentionBlock ca = CrossAttentionBlock::create(6, mrng);
        Regressor reg = Regressor::create(6, mrng);
        for (double& v : reg.w3.data()) v = mrng.uniform(-0.3, 0.3);
        Tensor hints = random_param(rng, {3, 6});
        Tensor insts = random_param(rng, {5, 6});
        ParamMap params;
        matcher.collect(params, "matcher");
        ca.collect(params, "ca");
        reg.collect(params, "reg");
        params["hints"] = hints;
        params["insts"] = insts;
        expect("sinkhorn/matcher_loss/cross_attend/regress",
               grad_check(
                   [&] {
                       Tensor plan = sinkhorn_match(hints, insts, matcher);
                       Tensor nll = matcher_loss(plan, {{0, 1}, {1, 0}}, {2, 3, 4});
                       Tensor fused = ca.forward(hints, insts);
                       Tensor off = reg.forward(fused);
                       Tensor target = Tensor::from({3, 2}, {1, 0, -1, 2, 0.5, 0.5});
                       Tensor diff = sub(off, target);
                       return add(nll, mean_all(hadamard(diff, diff)));
                   },
                   as_named(params)),
               1e-4);
    }
    {  // instance encoder end to end
        Rng erng(9);
        InstanceEncoder enc = InstanceEncoder::create(12, erng);
        Instance inst = make_instance(rng, 0, {10, 10});
        Tensor w = random_param(rng, {12});
        ParamMap params;
        enc.collect(params, "enc");
        expect("instance_encoder",
               grad_check(
                   [&] { return dot(enc.encode(inst, CellFrame{{0, 0}, 30.0}), w); },
                   as_named(params)),
               1e-4);
    }
    {  // full coarse model, tiny config d=12 h=2 L=1, 2 cells × 3 instances
        CoarseConfig mc{.d = 12, .heads = 2, .layers = 1, .hidden = 24};
        CoarseModel model = CoarseModel::create(mc, Rng(99));
        std::vector<Cell> cells = {make_cell(rng, 3), make_cell(rng, 3)};
        cells[1].origin = {10, 10};
        std::vector<std::vector<Hint>> queries = {make_hints(3), make_hints(4)};
        std::reverse(queries[1].begin(), queries[1].end());
        ParamMap params;
        model.collect(params);
        expect("full_coarse_model",
               grad_check(
                   [&] {
                       Tensor c = stack_rows({model.encode_cell(cells[0]),
                                              model.encode_cell(cells[1])});
                       Tensor t = stack_rows({model.encode_query(queries[0]),
                                              model.encode_query(queries[1])});
                       return ranking_loss(c, t, 0.35);
                   },
                   as_named(params)),
               1e-4);
    }

    const double elapsed = seconds_since(start);
    std::ostringstream os;
    os << "runtime " << elapsed << " s (< 60 s required)";
    checks.push_back({elapsed < 60.0, os.str()});
    return combine(checks);
}

// ---------------------------------------------------------------------------
// C2 / C3 / C4 / C5
// ---------------------------------------------------------------------------

Outcome criterion2() {
    Rng rng(2);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.index(8), d = 2 + rng.index(8);
        Tensor q = random_param(rng, {n, d}), k = random_param(rng, {n, d});
        Tensor v = random_param(rng, {n, d});
        Tensor plain = attention(q, k, v);
        Tensor enhanced = rsa(q, k, v, Tensor::zeros({n, n, d}));
        for (std::size_t i = 0; i < plain.size(); ++i)
            worst = std::max(worst, std::fabs(plain.at(i) - enhanced.at(i)));
    }
    std::ostringstream os;
    os << "max |rsa(Q,K,V,0) - attention(Q,K,V)| = " << worst
       << " over 100 random instances (<= 1e-12 required)";
    return combine({{worst <= 1e-12, os.str()}});
}

Outcome criterion3() {
    Rng rng(3);
    double worst_anti = 0.0, worst_shift = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.index(6), d = 1 + rng.index(8);
        Tensor w = random_param(rng, {3, d});
        std::vector<Vec3> centers, shifted;
        const Vec3 t{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-10, 10)};
        for (std::size_t i = 0; i < n; ++i) {
            Vec3 c{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(0, 8)};
            centers.push_back(c);
            shifted.push_back({c.x + t.x, c.y + t.y, c.z + t.z});
        }
        Tensor r = point_relations(centers, w);
        Tensor rs = point_relations(shifted, w);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < d; ++c) {
                    worst_anti = std::max(worst_anti,
                                          std::fabs(r.at((i * n + j) * d + c) +
                                                    r.at((j * n + i) * d + c)));
                    worst_shift = std::max(worst_shift,
                                           std::fabs(r.at((i * n + j) * d + c) -
                                                     rs.at((i * n + j) * d + c)));
                }
    }
    std::ostringstream a, b;
    a << "anti-symmetry worst |R_ij + R_ji| = " << worst_anti << " (<= 1e-12)";
    b << "translation invariance worst deviation = " << worst_shift << " (<= 1e-12)";
    return combine({{worst_anti <= 1e-12, a.str()}, {worst_shift <= 1e-12, b.str()}});
}

Outcome criterion4() {
    Rng rng(4);
    double worst = 0.0, most_negative = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> scores(7 * 17);
        for (double& s : scores) s = rng.normal();
        Tensor plan = sinkhorn_plan(Tensor::from({7, 17}, scores), 100);
        for (double v : plan.data()) most_negative = std::min(most_negative, v);
        for (std::size_t j = 0; j < 7; ++j) {
            double sum = 0.0;
            for (std::size_t i = 0; i < 17; ++i) sum += plan.at(j, i);
            worst = std::max(worst, std::fabs(sum - (j == 6 ? 16.0 : 1.0)));
        }
        for (std::size_t i = 0; i < 17; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) sum += plan.at(j, i);
            worst = std::max(worst, std::fabs(sum - (i == 16 ? 6.0 : 1.0)));
        }
    }
    std::ostringstream a, b;
    a << "worst marginal violation over 1000 random 7x17 trials = " << worst
      << " (< 1e-6 required)";
    b << "most negative plan entry = " << most_negative << " (>= 0 required)";
    return combine({{worst < 1e-6, a.str()}, {most_negative >= 0.0, b.str()}});
}

Outcome criterion5() {
    std::vector<Check> checks;
    {  // margin-satisfied construction → exactly zero
        const std::size_t nb = 3, d = 3;
        std::vector<double> e(nb * d, 0.0);
        for (std::size_t i = 0; i < nb; ++i) e[i * d + i] = 2.0;
        Tensor c = Tensor::from({nb, d}, e), t = Tensor::from({nb, d}, e);
        const double loss = ranking_loss(c, t, 0.35).value();
        std::ostringstream os;
        os << "ranking_loss on margin-satisfied construction = " << loss << " (expect 0)";
        checks.push_back({loss == 0.0, os.str()});
    }
    {  // N_b = 2 degenerate example → 4 hinge terms of α each = 1.4
        Tensor c = Tensor::from({2, 2}, {1, 0, 1, 0});
        Tensor t = Tensor::from({2, 2}, {1, 0, 1, 0});
        const double loss = ranking_loss(c, t, 0.35).value();
        std::ostringstream os;
        os << "ranking_loss on degenerate N_b=2 example = " << loss << " (expect 1.4)";
        checks.push_back({std::fabs(loss - 1.4) < 1e-12, os.str()});
    }
    {  // perfect plan → matcher NLL ≈ 0
        const std::size_t h = 3, p = 5;
        std::vector<double> plan((h + 1) * (p + 1), 0.0);
        plan[0 * (p + 1) + 2] = 1.0;
        plan[1 * (p + 1) + 0] = 1.0;
        plan[2 * (p + 1) + 4] = 1.0;
        plan[h * (p + 1) + 1] = 1.0;
        plan[h * (p + 1) + 3] = 1.0;
        const double loss =
            matcher_loss(Tensor::from({h + 1, p + 1}, plan), {{0, 2}, {1, 0}, {2, 4}},
                         {1, 3})
                .value();
        std::ostringstream os;
        os << "matcher_loss on perfect plan = " << loss << " (expect ~0)";
        checks.push_back({std::fabs(loss) < 1e-9, os.str()});
    }
    return combine(checks);
}

// ---------------------------------------------------------------------------
// Desk-scale runs shared by C6-C8
// ---------------------------------------------------------------------------

struct DeskResult {
    std::uint64_t seed = 0;
    double mc_recall1 = 0.0, mc_recall5 = 0.0;
    double full_recall5 = 0.0, norel_recall5 = 0.0;
    double cascade_precision = 0.0, cascade_recall = 0.0;
    double joint_precision = 0.0, joint_recall = 0.0;
    double err_full = 0.0, err_center = 0.0, err_noca = 0.0;
    double loc_full_k5e5 = 0.0, loc_center_k5e5 = 0.0;
    double coarse_seconds = 0.0, fine_seconds = 0.0;
};

TrainConfig desk_config(std::uint64_t seed) {
    TrainConfig cfg;  // defaults are the desk-scale configuration
    cfg.seed = seed;
    return cfg;
}

DeskResult run_desk_seed(std::uint64_t seed) {
    DeskResult r;
    r.seed = seed;
    TrainConfig cfg = desk_config(seed);
    std::fprintf(stderr, "[desk seed %llu] building dataset...\n",
                 static_cast<unsigned long long>(seed));
    Dataset data = build_dataset(cfg);
    std::fprintf(stderr, "[desk seed %llu] %zu cells, %zu train / %zu val queries\n",
                 static_cast<unsigned long long>(seed), data.cells.size(),
                 data.train.size(), data.val.size());

    r.mc_recall1 = random_ranking_recall(data.val, data.cells, 1, 20, seed ^ 0xabcULL);
    r.mc_recall5 = random_ranking_recall(data.val, data.cells, 5, 20, seed ^ 0xabcULL);

    const auto coarse_start = Clock::now();
    auto full = train_coarse(data, cfg);
    r.full_recall5 = full.history.back().val_recall5;
    std::fprintf(stderr, "[desk seed %llu] full coarse recall@5 = %.3f\n",
                 static_cast<unsigned long long>(seed), r.full_recall5);

    TrainConfig norel_cfg = cfg;
    norel_cfg.point_relations = false;
    norel_cfg.text_relations = false;
    auto norel = train_coarse(data, norel_cfg);
    r.norel_recall5 = norel.history.back().val_recall5;
    r.coarse_seconds = seconds_since(coarse_start);
    std::fprintf(stderr,
                 "[desk seed %llu] no-relation recall@5 = %.3f (coarse %.0f s)\n",
                 static_cast<unsigned long long>(seed), r.norel_recall5,
                 r.coarse_seconds);

    const auto fine_start = Clock::now();
    auto cascade = train_fine(data, cfg);
    auto cascade_pr = eval_matcher(cascade.model, data, data.val, cfg.seed ^ 0xe7a1ULL);
    r.cascade_precision = cascade_pr.precision;
    r.cascade_recall = cascade_pr.recall;

    auto joint = train_fine_joint(data, cfg);
    auto joint_pr = eval_matcher(joint.model, data, data.val, cfg.seed ^ 0xe7a1ULL);
    r.joint_precision = joint_pr.precision;
    r.joint_recall = joint_pr.recall;
    r.fine_seconds = seconds_since(fine_start);
    std::fprintf(stderr,
                 "[desk seed %llu] matcher P/R cascade %.3f/%.3f joint %.3f/%.3f "
                 "(fine %.0f s)\n",
                 static_cast<unsigned long long>(seed), r.cascade_precision,
                 r.cascade_recall, r.joint_precision, r.joint_recall, r.fine_seconds);

    // No-cross-attention ablation: same matcher phase (deterministic and
    // identical under this seed), fresh fusion-free regressor phase.
    TrainConfig noca_cfg = cfg;
    noca_cfg.cross_attention = false;
    FineModel noca = FineModel::create(
        FineConfig{noca_cfg.d, noca_cfg.d_match, noca_cfg.sinkhorn_iterations, false},
        Rng(noca_cfg.seed ^ 0xf19eULL));
    {
        ParamMap src, dst;
        cascade.model.collect_matcher_params(src);
        noca.collect_matcher_params(dst);
        for (auto& [name, t] : dst) t.data() = src.at(name).data();
        Rng rng(noca_cfg.seed ^ 0x0caULL);
        std::vector<FineEpochStats> history;
        train_regressor_phase(noca, data, noca_cfg, rng, history);
    }

    r.err_full = gt_cell_regression_error(cascade.model, data, data.val,
                                          cfg.seed ^ 0xe7a1ULL);
    r.err_center = gt_cell_regression_error(cascade.model, data, data.val,
                                            cfg.seed ^ 0xe7a1ULL, true);
    r.err_noca = gt_cell_regression_error(noca, data, data.val, cfg.seed ^ 0xe7a1ULL);

    auto loc = eval_localization(full.model, full.cell_index, cascade.model, data,
                                 data.val, {5}, {5.0}, cfg.seed ^ 0x10cULL);
    r.loc_full_k5e5 = loc.recall[{5, 5.0}];
    r.loc_center_k5e5 = loc.center_recall[{5, 5.0}];
    std::fprintf(stderr,
                 "[desk seed %llu] err full/center/noCA %.2f/%.2f/%.2f, "
                 "loc(k5,e5) full/center %.3f/%.3f\n",
                 static_cast<unsigned long long>(seed), r.err_full, r.err_center,
                 r.err_noca, r.loc_full_k5e5, r.loc_center_k5e5);
    return r;
}

const std::vector<DeskResult>& desk_results() {
    static std::vector<DeskResult> results = [] {
        std::vector<DeskResult> r;
        for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) r.push_back(run_desk_seed(seed));
        return r;
    }();
    return results;
}

Outcome criterion6() {
    const auto& r = desk_results();
    const double full5 = median3(r[0].full_recall5, r[1].full_recall5, r[2].full_recall5);
    const double norel5 =
        median3(r[0].norel_recall5, r[1].norel_recall5, r[2].norel_recall5);
    const double rand1 = median3(r[0].mc_recall1, r[1].mc_recall1, r[2].mc_recall1);
    const double gap = median3(r[0].full_recall5 - r[0].norel_recall5,
                               r[1].full_recall5 - r[1].norel_recall5,
                               r[2].full_recall5 - r[2].norel_recall5);
    const double worst_seconds =
        std::max({r[0].coarse_seconds, r[1].coarse_seconds, r[2].coarse_seconds});

    std::vector<Check> checks;
    {
        std::ostringstream os;
        os << "median val recall@5 = " << full5 << " >= 10x random baseline ("
           << 10.0 * rand1 << "; Monte-Carlo recall@1 " << rand1 << ", recall@5 "
           << median3(r[0].mc_recall5, r[1].mc_recall5, r[2].mc_recall5) << ")";
        checks.push_back({full5 >= 10.0 * rand1, os.str()});
    }
    {
        std::ostringstream os;
        os << "median recall@5 gap over no-relation ablation = " << gap
           << " (>= 0.03 required; full " << full5 << ", no-relation " << norel5 << ")";
        checks.push_back({gap >= 0.03, os.str()});
    }
    {
        std::ostringstream os;
        os << "slowest per-seed coarse runtime " << worst_seconds
           << " s (< 2700 s required)";
        checks.push_back({worst_seconds < 2700.0, os.str()});
    }
    return combine(checks);
}

Outcome criterion7() {
    const auto& r = desk_results();
    const double cp =
        median3(r[0].cascade_precision, r[1].cascade_precision, r[2].cascade_precision);
    const double cr =
        median3(r[0].cascade_recall, r[1].cascade_recall, r[2].cascade_recall);
    const double dp = median3(r[0].cascade_precision - r[0].joint_precision,
                              r[1].cascade_precision - r[1].joint_precision,
                              r[2].cascade_precision - r[2].joint_precision);
    const double dr = median3(r[0].cascade_recall - r[0].joint_recall,
                              r[1].cascade_recall - r[1].joint_recall,
                              r[2].cascade_recall - r[2].joint_recall);
    const double worst_seconds =
        std::max({r[0].fine_seconds, r[1].fine_seconds, r[2].fine_seconds});

    std::vector<Check> checks;
    {
        std::ostringstream os;
        os << "median cascade precision " << cp << " and recall " << cr
           << " (>= 0.85 required)";
        checks.push_back({cp >= 0.85 && cr >= 0.85, os.str()});
    }
    {
        std::ostringstream os;
        os << "median (cascade - joint): precision " << dp << ", recall " << dr
           << " (>= 0 required)";
        checks.push_back({dp >= 0.0 && dr >= 0.0, os.str()});
    }
    {
        std::ostringstream os;
        os << "slowest per-seed matcher-experiment runtime " << worst_seconds
           << " s (< 900 s required)";
        checks.push_back({worst_seconds < 900.0, os.str()});
    }
    return combine(checks);
}

Outcome criterion8() {
    const auto& r = desk_results();
    const double full = median3(r[0].err_full, r[1].err_full, r[2].err_full);
    const double center = median3(r[0].err_center, r[1].err_center, r[2].err_center);
    const double noca = median3(r[0].err_noca, r[1].err_noca, r[2].err_noca);
    const double loc_full =
        median3(r[0].loc_full_k5e5, r[1].loc_full_k5e5, r[2].loc_full_k5e5);
    const double loc_center =
        median3(r[0].loc_center_k5e5, r[1].loc_center_k5e5, r[2].loc_center_k5e5);

    std::vector<Check> checks;
    {
        std::ostringstream os;
        os << "median gt-cell regression error: full " << full << " < cell-center "
           << center;
        checks.push_back({full < center, os.str()});
    }
    {
        std::ostringstream os;
        os << "median gt-cell regression error: full " << full
           << " < no-cross-attention " << noca;
        checks.push_back({full < noca, os.str()});
    }
    {
        std::ostringstream os;
        os << "recall(k=5, eps<5m): full " << loc_full << " >= 2x cell-center baseline "
           << 2.0 * loc_center << " (baseline " << loc_center << ")";
        checks.push_back({loc_full >= 2.0 * loc_center, os.str()});
    }
    return combine(checks);
}

// ---------------------------------------------------------------------------
// C9: determinism & persistence
// ---------------------------------------------------------------------------

Outcome criterion9() {
    std::vector<Check> checks;
    TrainConfig cfg;
    cfg.seed = 77;
    cfg.d = 48;
    cfg.heads = 4;
    cfg.layers = 1;
    cfg.hidden = 128;
    cfg.d_match = 24;
    cfg.sinkhorn_iterations = 50;
    cfg.scene.width = cfg.scene.height = 120.0;
    cfg.n_train_queries = 300;
    cfg.n_val_queries = 80;
    cfg.coarse_epochs = 3;
    cfg.coarse_batch = 8;
    cfg.matcher_epochs = 4;
    cfg.regressor_epochs = 2;

    auto run_once = [&] {
        Dataset data = build_dataset(cfg);
        auto coarse = train_coarse(data, cfg);
        auto fine = train_fine(data, cfg);
        auto pr = eval_matcher(fine.model, data, data.val, cfg.seed ^ 0xe7a1ULL);
        auto loc = eval_localization(coarse.model, coarse.cell_index, fine.model, data,
                                     data.val, {1, 5}, {5.0, 15.0}, cfg.seed ^ 0x10cULL);
        MetricsReport report;
        auto recall = coarse_recall(coarse.model, coarse.cell_index, data.val, {1, 3, 5});
        for (auto [k, v] : recall)
            report.values["coarse.recall@" + std::to_string(k)] = v;
        report.values["matcher.precision"] = pr.precision;
        report.values["matcher.recall"] = pr.recall;
        for (const auto& [key, v] : loc.recall) {
            std::ostringstream name;
            name << "loc.k" << key.first << ".eps" << key.second;
            report.values[name.str()] = v;
        }
        report.values["gt_cell_error"] = loc.gt_cell_error;
        return std::make_pair(report.to_json().dump(), coarse);
    };

    auto [metrics_a, coarse_a] = run_once();
    auto [metrics_b, coarse_b] = run_once();
    {
        std::ostringstream os;
        os << "identical (config, seed) reproduces the metrics report bitwise ("
           << (metrics_a == metrics_b ? "identical" : "DIFFERS") << ")";
        checks.push_back({metrics_a == metrics_b, os.str()});
    }
    {
        ParamMap pa, pb;
        coarse_a.model.collect(pa);
        coarse_b.model.collect(pb);
        bool same = true;
        for (const auto& [name, t] : pa) same &= t.data() == pb.at(name).data();
        checks.push_back({same, "retrained parameters are bit-identical"});
    }
    {
        const std::string p1 = "acceptance_ckpt_1.retl", p2 = "acceptance_ckpt_2.retl";
        save_coarse_checkpoint(p1, coarse_a.model, cfg, coarse_a.cell_index);
        auto loaded = load_coarse_checkpoint(p1);
        save_coarse_checkpoint(p2, loaded.model, loaded.cfg, loaded.index);
        std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
        std::ostringstream os;
        os << "checkpoint save -> load -> save is byte-identical (" << s1.size()
           << " bytes)";
        checks.push_back({!s1.empty() && s1 == s2, os.str()});
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }
    return combine(checks);
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int number;
        const char* title;
        Outcome (*run)();
    };
    const Criterion criteria[] = {
        {1, "gradient correctness (every op + full coarse model, rel-err < 1e-4, < 60 s)",
         criterion1},
        {2, "RSA with zero relations reduces to plain attention (1e-12)", criterion2},
        {3, "point-relation anti-symmetry and translation invariance (1e-12)",
         criterion3},
        {4, "Sinkhorn marginals on random 7x17 scores (< 1e-6, 1000 trials)",
         criterion4},
        {5, "ranking/matcher loss sanity values", criterion5},
        {6, "desk-scale coarse retrieval vs random baseline and no-relation ablation",
         criterion6},
        {7, "desk-scale matcher precision/recall, cascade vs joint", criterion7},
        {8, "desk-scale localization vs cell-center and no-cross-attention baselines",
         criterion8},
        {9, "determinism and checkpoint persistence", criterion9},
    };

    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.number)) continue;
        const auto start = Clock::now();
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome.pass = false;
            outcome.detail = std::string("exception: ") + e.what() + "\n";
        }
        std::printf("[%s] C%d: %s (%.1f s)\n", outcome.pass ? "PASS" : "FAIL", c.number,
                    c.title, seconds_since(start));
        std::istringstream lines(outcome.detail);
        for (std::string line; std::getline(lines, line);)
            std::printf("        %s\n", line.c_str());
        if (!outcome.pass) ++failures;
        std::fflush(stdout);
    }
    if (failures > 0) {
        std::printf("%d criterion(s) FAILED\n", failures);
        return 1;
    }
    std::printf("all selected acceptance criteria passed\n");
    return 0;
}
