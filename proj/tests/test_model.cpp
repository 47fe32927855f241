#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mdan/errors.hpp"
#include "mdan/model.hpp"

using namespace mdan;

namespace {

Tensor make_rand(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.6);
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) v = dist(rng);
    return Tensor(std::move(shape), std::move(d));
}

EmotionHierarchy ekman() {
    std::istringstream in(
        "1\tpositive\t-\n1\tnegative\t-\n"
        "2\thappiness\tpositive\n2\tsurprise\tpositive\n"
        "2\tanger\tnegative\n2\tdisgust\tnegative\n"
        "2\tfear\tnegative\n2\tsadness\tnegative\n");
    return EmotionHierarchy::parse(in);
}

Tensor identity_filter(std::size_t n) {
    std::vector<double> d(n * n * 1 * 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return Tensor({n, n, 1, 1}, std::move(d));
}

MdanConfig small_config(std::size_t input = 32) {
    MdanConfig c;
    c.input_h = c.input_w = input;
    c.widths = {4, 8, 16, 32};
    c.pyramid_width = 8;
    return c;
}

}  // namespace

TEST_CASE("validate_config resolves the sequential preset with default heads") {
    MdanConfig c = small_config();
    validate_config(c, {2, 6, 25});
    CHECK(c.mapping_table == std::map<int, int>{{1, 4}, {2, 3}, {3, 2}});
    CHECK(sequential_mapping(c, 3));
    CHECK(c.heads.at(3) == 2);
    CHECK(c.heads.at(2) == 4);
}

TEST_CASE("validate_config resolves the reversed preset and disables attention") {
    MdanConfig c = small_config();
    c.mapping = "f";
    validate_config(c, {2, 6});
    CHECK(c.mapping_table == std::map<int, int>{{1, 3}, {2, 4}});
    CHECK_FALSE(sequential_mapping(c, 2));
    CHECK_FALSE(c.mhcca_on);
    CHECK_FALSE(c.lcam_enabled());
}

TEST_CASE("validate_config turns attention off without feature fusion") {
    MdanConfig c = small_config();
    c.feature_fusion = false;
    validate_config(c, {2, 6});
    CHECK_FALSE(c.mhcca_on);
    CHECK_FALSE(c.lcam_enabled());
}

TEST_CASE("validate_config rejects malformed settings") {
    MdanConfig c = small_config();
    c.input_h = 30;
    CHECK_THROWS_AS(validate_config(c, {2}), ConfigError);

    c = small_config();
    c.alpha = 1.5;
    CHECK_THROWS_AS(validate_config(c, {2}), ConfigError);

    c = small_config();
    CHECK_THROWS_AS(validate_config(c, {2, 3, 4, 5, 6}), ConfigError);  // runs past l_s=2

    c = small_config();
    c.mapping = "table";
    c.mapping_table = {{1, 4}, {2, 4}};
    CHECK_THROWS_AS(validate_config(c, {2, 6}), ConfigError);  // not injective

    c = small_config();
    c.heads[3] = 7;  // does not divide 8*8
    CHECK_THROWS_AS(validate_config(c, {2, 6}), ConfigError);
}

TEST_CASE("per-head dimensions at the full-scale input size") {
    MdanConfig c;
    c.input_h = c.input_w = 224;
    CHECK(c.head_dim(4, 1) == 784);
    CHECK(c.head_dim(4, 2) == 392);
    CHECK(c.head_dim(3, 1) == 3136);
    CHECK_THROWS_AS(c.head_dim(4, 3), ConfigError);
}

TEST_CASE("fpn_fuse is lateral projection plus upsampled context") {
    Tensor c = make_rand({4, 8, 8}, 1);
    Tensor f_above = make_rand({3, 4, 4}, 2);
    Tensor lat = make_rand({3, 4, 1, 1}, 3);
    Tensor fused = fpn_fuse(c, f_above, lat);
    Tensor expect = add(conv2d(c, lat, 1, 0), upsample_bilinear_2x(f_above));
    REQUIRE(fused.shape() == expect.shape());
    for (std::size_t i = 0; i < fused.size(); ++i)
        CHECK(fused.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("single-head attention matches a scalar reference") {
    const std::size_t df = 3, cl = 4, h2 = 4, w2 = 4, flat = h2 * w2;
    Tensor f_coarse = make_rand({df, 2, 2}, 4);
    Tensor c_fine = make_rand({cl, h2, w2}, 5);
    Tensor q = make_rand({df, df, 1, 1}, 6);
    Tensor o = make_rand({df, df, 1, 1}, 7);

    MhccaResult r = mhcca(f_coarse, c_fine, q, o, nullptr, nullptr, 1);
    REQUIRE(r.attention.size() == 1);
    REQUIRE(r.attention[0].shape() == Shape{df, cl});
    REQUIRE(r.out.shape() == Shape{df, h2, w2});

    // scalar reference of the unpartitioned formula
    Tensor queries = conv2d(upsample_bilinear_2x(f_coarse), q, 1, 0);
    const double* Q = queries.values().data();
    const double* K = c_fine.values().data();
    std::vector<double> attn(df * cl);
    for (std::size_t i = 0; i < df; ++i) {
        std::vector<double> score(cl);
        double mx = -1e300;
        for (std::size_t j = 0; j < cl; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < flat; ++p) s += Q[i * flat + p] * K[j * flat + p];
            score[j] = s / std::sqrt(static_cast<double>(flat));
            mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < cl; ++j) z += std::exp(score[j] - mx);
        for (std::size_t j = 0; j < cl; ++j) attn[i * cl + j] = std::exp(score[j] - mx) / z;
    }
    for (std::size_t i = 0; i < attn.size(); ++i)
        CHECK(r.attention[0].values()[i] == doctest::Approx(attn[i]).epsilon(1e-12));

    std::vector<double> merged(df * flat, 0.0);
    for (std::size_t i = 0; i < df; ++i)
        for (std::size_t p = 0; p < flat; ++p)
            for (std::size_t j = 0; j < cl; ++j)
                merged[i * flat + p] += attn[i * cl + j] * K[j * flat + p];
    const double* O = o.values().data();
    for (std::size_t oc = 0; oc < df; ++oc) {
        for (std::size_t p = 0; p < flat; ++p) {
            double expect = 0.0;
            for (std::size_t ic = 0; ic < df; ++ic)
                expect += O[oc * df + ic] * merged[ic * flat + p];
            CHECK(r.out.values()[oc * flat + p] ==
                  doctest::Approx(expect).epsilon(1e-10));
        }
    }
}

TEST_CASE("attention rows are normalized per head") {
    Tensor f_coarse = make_rand({4, 2, 2}, 8);
    Tensor c_fine = make_rand({5, 4, 4}, 9);
    Tensor q = make_rand({4, 4, 1, 1}, 10);
    Tensor o = make_rand({4, 4, 1, 1}, 11);
    MhccaResult r = mhcca(f_coarse, c_fine, q, o, nullptr, nullptr, 4);
    REQUIRE(r.attention.size() == 4);
    for (const Tensor& a : r.attention) {
        for (std::size_t i = 0; i < a.shape()[0]; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < a.shape()[1]; ++j) s += a.values()[i * a.shape()[1] + j];
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("head partition is irrelevant under uniform attention") {
    // Constant queries and keys that are zero-sum within every contiguous
    // half make all scores zero, so any partition yields the same output.
    const std::size_t df = 3, cl = 4;
    Tensor f_coarse({df, 1, 1}, {0.7, -1.2, 0.4});
    std::vector<double> fine(cl * 4);
    std::mt19937_64 rng(12);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t j = 0; j < cl; ++j) {
        const double a = dist(rng), b = dist(rng);
        fine[j * 4 + 0] = a;
        fine[j * 4 + 1] = -a;
        fine[j * 4 + 2] = b;
        fine[j * 4 + 3] = -b;
    }
    Tensor c_fine({cl, 2, 2}, fine);
    Tensor id = identity_filter(df);

    MhccaResult r1 = mhcca(f_coarse, c_fine, id, id, nullptr, nullptr, 1);
    MhccaResult r2 = mhcca(f_coarse, c_fine, id, id, nullptr, nullptr, 2);
    for (const Tensor& a : r2.attention)
        for (double v : a.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    for (std::size_t i = 0; i < r1.out.size(); ++i)
        CHECK(r1.out.values()[i] == doctest::Approx(r2.out.values()[i]).epsilon(1e-12));
}

TEST_CASE("mhcca validates operand geometry") {
    Tensor f = make_rand({3, 2, 2}, 13);
    Tensor c = make_rand({4, 6, 6}, 14);
    Tensor id = identity_filter(3);
    CHECK_THROWS_AS(mhcca(f, c, id, id, nullptr, nullptr, 1), ShapeError);
    Tensor c2 = make_rand({4, 4, 4}, 15);
    CHECK_THROWS_AS(mhcca(f, c2, id, id, nullptr, nullptr, 3), ConfigError);
}

TEST_CASE("class activation map spatial mean equals the pre-softmax logit") {
    Tensor f = make_rand({6, 5, 5}, 16);
    Tensor w = make_rand({4, 6}, 17);
    Tensor pooled = global_avg_pool(f);
    for (std::size_t k = 0; k < 4; ++k) {
        Tensor cam = compute_cam(f, w, k);
        const double mean =
            std::accumulate(cam.values().begin(), cam.values().end(), 0.0) / cam.size();
        double logit = 0.0;
        for (std::size_t c = 0; c < 6; ++c) logit += w.values()[k * 6 + c] * pooled.values()[c];
        CHECK(std::abs(mean - logit) <= 1e-10);
    }
    CHECK_THROWS_AS(compute_cam(f, w, 4), IndexError);
}

TEST_CASE("class activation maps are linear in the classifier weights") {
    Tensor f = make_rand({3, 4, 4}, 18);
    Tensor w = make_rand({2, 3}, 19);
    std::vector<double> doubled = w.values();
    for (double& v : doubled) v *= 2.0;
    Tensor cam1 = compute_cam(f, w, 1);
    Tensor cam2 = compute_cam(f, Tensor({2, 3}, doubled), 1);
    for (std::size_t i = 0; i < cam1.size(); ++i)
        CHECK(cam2.values()[i] == doctest::Approx(2.0 * cam1.values()[i]).epsilon(1e-12));
}

TEST_CASE("fused activation map is normalized to the unit interval") {
    std::vector<Tensor> cams = {make_rand({4, 4}, 20), make_rand({4, 4}, 21)};
    Tensor m = lcam_fuse(cams, true, true);
    double lo = 1e300, hi = -1e300;
    for (double v : m.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(lo == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));

    // constant maps normalize to zero rather than dividing by zero
    Tensor flat = lcam_fuse({Tensor::full({3, 3}, 2.5)}, true, true);
    for (double v : flat.values()) CHECK(v == 0.0);

    CHECK_THROWS_AS(lcam_fuse(cams, false, false), ContractError);
    CHECK_THROWS_AS(lcam_fuse({}, true, true), ContractError);
}

TEST_CASE("a zero attention map leaves the features unchanged") {
    Tensor x = make_rand({3, 4, 4}, 22);
    Tensor y = lcam_apply(Tensor::zeros({4, 4}), x);
    CHECK(y.values() == x.values());

    Tensor ones = lcam_apply(Tensor::full({4, 4}, 1.0), x);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(ones.values()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-12));
}

TEST_CASE("prediction fusion endpoints are exact") {
    Tensor pl({3}, {0.2, 0.5, 0.3});
    Tensor pg({3}, {0.6, 0.1, 0.3});
    CHECK(fuse_predictions(pl, pg, 1.0).values() == pl.values());
    CHECK(fuse_predictions(pl, pg, 0.0).values() == pg.values());
    Tensor mid = fuse_predictions(pl, pg, 0.25);
    CHECK(mid.values()[0] == doctest::Approx(0.25 * 0.2 + 0.75 * 0.6).epsilon(1e-12));
    CHECK(std::accumulate(mid.values().begin(), mid.values().end(), 0.0) ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("forward pass emits normalized per-level predictions") {
    EmotionHierarchy h = ekman();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 3);
    Tensor image = make_rand({3, 32, 32}, 23);

    ForwardResult fr = mdan_forward(image, params, c, h);
    REQUIRE(fr.predictions.local.size() == 2);
    REQUIRE(fr.predictions.local[0].shape() == Shape{2});
    REQUIRE(fr.predictions.local[1].shape() == Shape{6});
    for (const auto& group :
         {fr.predictions.local, fr.predictions.global_, fr.predictions.overall}) {
        for (const Tensor& p : group) {
            double s = std::accumulate(p.values().begin(), p.values().end(), 0.0);
            CHECK(std::abs(s - 1.0) <= 1e-9);
            for (double v : p.values()) CHECK(v >= 0.0);
        }
    }

    // bottom-up branch: coarse global prediction is the children sum
    std::vector<double> agg = h.aggregate_to_parent(2, fr.predictions.global_[1].values());
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(fr.predictions.global_[0].values()[i] == doctest::Approx(agg[i]).epsilon(1e-12));

    // attended level exposes its artifacts
    CHECK(fr.artifacts.attention.count(2) == 1);
    CHECK(fr.artifacts.fused_map.count(2) == 1);
    CHECK(fr.artifacts.child_cams.at(2).size() == fr.artifacts.child_classes.at(2).size());

    CHECK_THROWS_AS(mdan_forward(make_rand({3, 16, 16}, 24), params, c, h), ShapeError);
}

TEST_CASE("forward pass covers depths one and three") {
    std::istringstream flat_src("1\ta\t-\n1\tb\t-\n1\tc\t-\n");
    EmotionHierarchy flat = EmotionHierarchy::parse(flat_src);
    MdanConfig c1 = small_config();
    validate_config(c1, flat.level_sizes());
    MdanParams p1 = MdanParams::init(c1, flat.level_sizes(), 4);
    ForwardResult r1 = mdan_forward(make_rand({3, 32, 32}, 25), p1, c1, flat);
    CHECK(r1.predictions.overall.size() == 1);
    CHECK(r1.artifacts.attention.empty());

    EmotionHierarchy deep =
        EmotionHierarchy::load(std::string(MDAN_CONFIG_DIR) + "/parrott3.tsv");
    MdanConfig c3 = small_config();
    validate_config(c3, deep.level_sizes());
    MdanParams p3 = MdanParams::init(c3, deep.level_sizes(), 5);
    ForwardResult r3 = mdan_forward(make_rand({3, 32, 32}, 26), p3, c3, deep);
    CHECK(r3.predictions.overall.size() == 3);
    CHECK(r3.predictions.overall[2].shape() == Shape{25});
    CHECK(r3.artifacts.attention.count(2) == 1);
    CHECK(r3.artifacts.attention.count(3) == 1);
}

TEST_CASE("ablation grid runs and parameter counts track the modules") {
    EmotionHierarchy h = ekman();
    struct Row {
        bool mhcca, kv, up, mean, max;
    };
    const std::vector<Row> rows = {
        {false, false, false, false, false}, {true, false, false, false, false},
        {true, true, false, false, false},   {true, false, true, false, false},
        {true, false, true, true, false},    {true, false, true, false, true},
        {true, false, true, true, true},     {true, true, true, true, true},
    };
    std::vector<std::size_t> counts;
    Tensor image = make_rand({3, 32, 32}, 27);
    for (const Row& r : rows) {
        MdanConfig c = small_config();
        c.mhcca_on = r.mhcca;
        c.kv_projections_on = r.kv;
        c.upsample_add_on = r.up;
        c.lcam_mean_on = r.mean;
        c.lcam_max_on = r.max;
        validate_config(c, h.level_sizes());
        MdanParams p = MdanParams::init(c, h.level_sizes(), 6);
        ForwardResult fr = mdan_forward(image, p, c, h);
        CHECK(fr.predictions.overall.size() == 2);
        counts.push_back(p.parameter_count());
    }
    CHECK(counts[0] != counts[1]);  // lateral conv vs attention projections
    CHECK(counts[2] > counts[1]);   // key/value projections add weights
    CHECK(counts[3] == counts[1]);  // upsample-add is parameter free
    CHECK(counts[4] == counts[1]);  // pooling choices are parameter free
    CHECK(counts[5] == counts[1]);
    CHECK(counts[6] == counts[1]);
    CHECK(counts[7] == counts[2]);
}

TEST_CASE("joint loss of uniform predictions is the mean log class count") {
    EmotionHierarchy h = ekman();
    std::vector<PredictionSet> batch(3);
    for (auto& ps : batch) {
        ps.overall = {Tensor::full({2}, 0.5), Tensor::full({6}, 1.0 / 6.0)};
    }
    std::vector<LabelPath> truths = {{{0, 1}}, {{1, 3}}, {{1, 5}}};
    Tensor loss = joint_loss(batch, truths, h);
    CHECK(loss.item() ==
          doctest::Approx((std::log(2.0) + std::log(6.0)) / 2.0).epsilon(1e-9));
    CHECK_THROWS_AS(joint_loss({}, {}, h), ContractError);
}

TEST_CASE("argmax prefers the lowest index on ties") {
    CHECK(argmax({0.2, 0.5, 0.5, 0.1}) == 1);
    CHECK(argmax({1.0}) == 0);
    CHECK_THROWS_AS(argmax({}), ContractError);
}

TEST_CASE("parameter naming is stable and grouped") {
    EmotionHierarchy h = ekman();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams p = MdanParams::init(c, h.level_sizes(), 7);
    std::size_t named_total = 0;
    for (const auto& [name, t] : p.named()) named_total += t.size();
    CHECK(named_total == p.parameter_count());
    CHECK(p.backbone_group().size() + p.head_group().size() == p.all().size());
    // same seed, same weights
    MdanParams q = MdanParams::init(c, h.level_sizes(), 7);
    CHECK(q.backbone[0].values() == p.backbone[0].values());
    CHECK(q.global_w.values() == p.global_w.values());
    MdanParams r = MdanParams::init(c, h.level_sizes(), 8);
    CHECK(r.backbone[0].values() != p.backbone[0].values());
}
