#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mdan/checkpoint.hpp"
#include "mdan/errors.hpp"
#include "mdan/grad_check.hpp"
#include "mdan/optim.hpp"
#include "mdan/synthetic.hpp"
#include "mdan/train.hpp"

using namespace mdan;

namespace {

EmotionHierarchy ekman() {
    std::istringstream in(
        "1\tpositive\t-\n1\tnegative\t-\n"
        "2\thappiness\tpositive\n2\tsurprise\tpositive\n"
        "2\tanger\tnegative\n2\tdisgust\tnegative\n"
        "2\tfear\tnegative\n2\tsadness\tnegative\n");
    return EmotionHierarchy::parse(in);
}

EmotionHierarchy binary() {
    std::istringstream in("1\tpositive\t-\n1\tnegative\t-\n");
    return EmotionHierarchy::parse(in);
}

MdanConfig small_config() {
    MdanConfig c;
    c.input_h = c.input_w = 32;
    c.widths = {4, 8, 16, 32};
    c.pyramid_width = 8;
    return c;
}

SyntheticSpec small_spec(std::size_t per_class = 4, std::uint64_t seed = 7) {
    SyntheticSpec s;
    s.image_h = s.image_w = 32;
    s.samples_per_class = per_class;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("sgd step follows the momentum recurrence") {
    Tensor p({2}, {1.0, 2.0}, true);
    backward(sum(scale(p, 3.0)));  // grad = 3
    SgdState opt({p});
    opt.step(0.1, 0.9, 0.0);
    // v = 3, p -= 0.1*3
    CHECK(p.values()[0] == doctest::Approx(1.0 - 0.3).epsilon(1e-12));
    CHECK_FALSE(p.has_grad());  // cleared

    backward(sum(scale(p, 3.0)));
    opt.step(0.1, 0.9, 0.0);
    // v = 0.9*3 + 3 = 5.7; total update 0.1*3*(1 + 1.9)
    CHECK(p.values()[0] == doctest::Approx(1.0 - 0.1 * 3.0 * 2.9).epsilon(1e-12));
}

TEST_CASE("weight decay pulls parameters toward zero") {
    Tensor p({1}, {2.0}, true);
    SgdState opt({p});
    opt.step(0.5, 0.0, 0.1);  // no grad accumulated: v = 0.1*2
    CHECK(p.values()[0] == doctest::Approx(2.0 - 0.5 * 0.2).epsilon(1e-12));
}

TEST_CASE("zero learning rate leaves the model untouched") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 7);
    const std::string before = serialize_checkpoint(c, h.level_sizes(), params);

    std::vector<Sample> data = generate_dataset(small_spec(2), h);
    TrainConfig tc;
    tc.epochs = 1;
    tc.lr_new = 0.0;
    tc.lr_backbone = 0.0;
    tc.momentum = 0.0;
    tc.weight_decay = 0.0;
    train(params, c, h, data, tc);
    CHECK(serialize_checkpoint(c, h.level_sizes(), params) == before);
}

TEST_CASE("synthetic data is balanced, deterministic and label-consistent") {
    EmotionHierarchy h = ekman();
    std::vector<Sample> a = generate_dataset(small_spec(3), h);
    std::vector<Sample> b = generate_dataset(small_spec(3), h);
    REQUIRE(a.size() == 18);
    std::map<std::size_t, int> per_leaf;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.values() == b[i].image.values());
        CHECK(h.violation_count(a[i].label) == 0);
        per_leaf[a[i].label.at(2)] += 1;
        for (double v : a[i].image.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    for (const auto& [leaf, count] : per_leaf) CHECK(count == 3);

    std::vector<Sample> other = generate_dataset(small_spec(3, 8), h);
    CHECK(other[0].image.values() != a[0].image.values());
}

TEST_CASE("channel normalization yields zero mean and unit spread") {
    EmotionHierarchy h = binary();
    std::vector<Sample> data = generate_dataset(small_spec(5), h);
    ChannelStats stats = compute_channel_stats(data);
    normalize_in_place(data, stats);
    const std::size_t plane = 32 * 32;
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, sq = 0.0;
        for (const Sample& x : data) {
            for (std::size_t i = 0; i < plane; ++i) {
                double v = x.image.values()[c * plane + i];
                s += v;
                sq += v * v;
            }
        }
        const double n = static_cast<double>(data.size() * plane);
        CHECK(std::abs(s / n) <= 1e-9);
        CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("training loss decreases on a learnable problem") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 7);
    std::vector<Sample> data = generate_dataset(small_spec(10), h);
    normalize_in_place(data, compute_channel_stats(data));

    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 5;
    TrainResult result = train(params, c, h, data, tc);
    REQUIRE(result.curve.size() == 16);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        first += result.curve[i].loss;
        last += result.curve[result.curve.size() - 1 - i].loss;
    }
    CHECK(last < first);
}

TEST_CASE("a single sample can be overfit") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 7);
    std::vector<Sample> data = generate_dataset(small_spec(1), h);
    data.resize(1);
    normalize_in_place(data, compute_channel_stats(data));

    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 1;
    tc.weight_decay = 0.0;
    tc.lr_decay_every = 1000;
    TrainResult result = train(params, c, h, data, tc);
    CHECK(result.curve.back().loss < 0.01);
}

TEST_CASE("evaluation does not mutate the parameters") {
    EmotionHierarchy h = ekman();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 7);
    std::vector<Sample> data = generate_dataset(small_spec(2), h);
    normalize_in_place(data, compute_channel_stats(data));

    const std::string before = serialize_checkpoint(c, h.level_sizes(), params);
    EvalReport report = evaluate(params, c, h, data, 0.7);
    CHECK(serialize_checkpoint(c, h.level_sizes(), params) == before);
    REQUIRE(report.acc_local.size() == 2);
    for (double a : report.acc_overall) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
    CHECK(report.confusion_overall[1].classes == 6);
    std::size_t total = std::accumulate(report.confusion_overall[1].counts.begin(),
                                        report.confusion_overall[1].counts.end(),
                                        static_cast<std::size_t>(0));
    CHECK(total == data.size());
}

TEST_CASE("alpha endpoints reproduce the pure local and global reports") {
    EmotionHierarchy h = ekman();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 9);
    std::vector<Sample> data = generate_dataset(small_spec(2), h);
    normalize_in_place(data, compute_channel_stats(data));

    EvalReport local_end = evaluate(params, c, h, data, 1.0);
    EvalReport global_end = evaluate(params, c, h, data, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(local_end.acc_overall[i] == local_end.acc_local[i]);
        CHECK(global_end.acc_overall[i] == global_end.acc_global[i]);
    }
    CHECK(local_end.violation_rate_overall == local_end.violation_rate_local);
    // the bottom-up branch is children-sum consistent by construction
    CHECK(global_end.violation_rate_overall == 0.0);
}

TEST_CASE("alpha sweep reuses one prediction pass across the grid") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 10);
    std::vector<Sample> data = generate_dataset(small_spec(3), h);
    normalize_in_place(data, compute_channel_stats(data));

    auto curve = alpha_sweep(params, c, h, data, {0.0, 0.5, 1.0});
    REQUIRE(curve.size() == 3);
    EvalReport at_half = evaluate(params, c, h, data, 0.5);
    CHECK(curve[1].acc_overall[0] == at_half.acc_overall[0]);
}

TEST_CASE("end-to-end gradients agree with finite differences") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 11);
    std::vector<Sample> data = generate_dataset(small_spec(1), h);
    normalize_in_place(data, compute_channel_stats(data));

    auto loss_fn = [&]() {
        std::vector<PredictionSet> preds;
        std::vector<LabelPath> truths;
        for (const Sample& s : data) {
            preds.push_back(mdan_forward(s.image, params, c, h).predictions);
            truths.push_back(s.label);
        }
        return joint_loss(preds, truths, h);
    };
    CHECK(grad_check_params(loss_fn, params.all(), 1e-5, 17) <= 1e-4);
}

TEST_CASE("training rejects degenerate configurations") {
    EmotionHierarchy h = binary();
    MdanConfig c = small_config();
    validate_config(c, h.level_sizes());
    MdanParams params = MdanParams::init(c, h.level_sizes(), 12);
    TrainConfig tc;
    CHECK_THROWS_AS(train(params, c, h, {}, tc), DataError);
    tc.batch_size = 0;
    std::vector<Sample> data = generate_dataset(small_spec(1), h);
    CHECK_THROWS_AS(train(params, c, h, data, tc), ConfigError);
}
