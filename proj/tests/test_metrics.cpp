#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "voxfuse/errors.hpp"
#include "voxfuse/losses.hpp"
#include "voxfuse/metrics.hpp"
#include "voxfuse/rng.hpp"

using namespace voxfuse;

TEST_CASE("focal loss closed-form values") {
    CHECK(focal_loss({0.0, 1.0}, 1, 1.0) == 0.0);
    CHECK(focal_loss({0.5, 0.5}, 0, 1.0) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
    // gamma = 0 reduces to cross-entropy
    Rng rng(601);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits(4);
        for (double& v : logits) v = rng.normal();
        const std::vector<double> p = softmax(logits);
        const int target = rng.below_int(4);
        CHECK(std::abs(focal_loss(p, target, 0.0) + std::log(p[static_cast<size_t>(target)])) < 1e-12);
        CHECK(focal_loss(p, target, 1.0) >= 0.0);
    }
    // zero probability is clamped, not infinite
    CHECK(focal_loss({1.0, 0.0}, 1, 1.0) == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
    CHECK_THROWS_AS(focal_loss({0.5, 0.5}, 2, 1.0), DimensionError);
    CHECK_THROWS_AS(focal_loss({0.5, 1.5}, 1, 1.0), NumericError);
}

TEST_CASE("batched focal loss: ignore rows dropped, mean over the rest") {
    LossConfig cfg;
    cfg.num_classes = 3;
    cfg.ignore_label = 2;
    cfg.gamma = 1.0;

    Rng rng(602);
    Tensor logits({5, 3});
    for (size_t i = 0; i < logits.size(); ++i) logits[i] = rng.normal();
    const std::vector<int> targets = {0, 2, 1, 2, 0};

    Tape t;
    const VarId loss = focal_loss_rows(t, t.constant(logits), targets, cfg);

    double expect = 0.0;
    int used = 0;
    for (int r = 0; r < 5; ++r) {
        if (targets[static_cast<size_t>(r)] == cfg.ignore_label) continue;
        std::vector<double> row(3);
        for (int c = 0; c < 3; ++c) row[static_cast<size_t>(c)] = logits.at(r, c);
        expect += focal_loss(softmax(row), targets[static_cast<size_t>(r)], cfg.gamma);
        ++used;
    }
    expect /= used;
    CHECK(t.val(loss)[0] == doctest::Approx(expect).epsilon(1e-12));

    SUBCASE("all rows ignored gives a zero constant") {
        Tape t2;
        const VarId z = focal_loss_rows(t2, t2.constant(logits), {2, 2, 2, 2, 2}, cfg);
        CHECK(t2.val(z)[0] == 0.0);
    }
    SUBCASE("bad targets rejected") {
        Tape t2;
        CHECK_THROWS_AS(focal_loss_rows(t2, t2.constant(logits), {0, 1, 3, 0, 1}, cfg),
                        DimensionError);
        CHECK_THROWS_AS(focal_loss_rows(t2, t2.constant(logits), {0, 1}, cfg), DimensionError);
    }
}

TEST_CASE("composite loss is the weighted sum and routes gradients by weight") {
    LossConfig cfg;
    CHECK(composite_loss(2.0, 3.0, 5.0, cfg) == 10.0);
    cfg.lambda_2d = 0.25;
    cfg.lambda_3d = 1.5;
    cfg.lambda_expert = 0.0;
    Rng rng(603);
    for (int trial = 0; trial < 20; ++trial) {
        const double a = rng.normal(), b = rng.normal(), c = rng.normal();
        CHECK(composite_loss(a, b, c, cfg) == doctest::Approx(0.25 * a + 1.5 * b).epsilon(1e-12));
    }

    // tape version: zero weight kills the gradient through that component
    Tape t;
    Tensor g2d = Tensor::scalar(0.0), g3d = Tensor::scalar(0.0), gexp = Tensor::scalar(0.0);
    const VarId a = t.leaf(Tensor::scalar(1.0), &g2d);
    const VarId b = t.leaf(Tensor::scalar(2.0), &g3d);
    const VarId c = t.leaf(Tensor::scalar(3.0), &gexp);
    t.backward(composite_loss(t, a, b, c, cfg));
    CHECK(g2d[0] == 0.25);
    CHECK(g3d[0] == 1.5);
    CHECK(gexp[0] == 0.0);

    LossConfig bad;
    bad.gamma = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = LossConfig{};
    bad.lambda_3d = -0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("confusion matrix counts, ignore handling, and range checks") {
    ConfusionMatrix cm(3, 2);
    cm.add(1, 0);
    cm.add(1, 0);
    cm.add(0, 0);
    cm.add(2, 1);
    cm.add(0, 2);  // gt == ignore: dropped
    CHECK(cm.total() == 4);
    CHECK(cm.at(0, 1) == 2);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(1, 2) == 1);
    CHECK_THROWS_AS(cm.add(3, 0), DimensionError);
    CHECK_THROWS_AS(cm.add(-1, 1), DimensionError);
    CHECK_THROWS_AS(cm.at(0, 3), DimensionError);
}

TEST_CASE("streamed accumulation equals a brute-force tally and is order independent") {
    Rng rng(604);
    const int classes = 5;
    std::vector<std::pair<int, int>> stream;  // (pred, gt)
    for (int i = 0; i < 400; ++i)
        stream.push_back({rng.below_int(classes), rng.below_int(classes + 1) - 1});  // gt may be -1

    ConfusionMatrix forward(classes, -1);
    ConfusionMatrix backward(classes, -1);
    for (const auto& [pred, gt] : stream) forward.add(pred, gt);
    for (auto it = stream.rbegin(); it != stream.rend(); ++it) backward.add(it->first, it->second);

    std::vector<int64_t> tally(static_cast<size_t>(classes) * classes, 0);
    for (const auto& [pred, gt] : stream)
        if (gt != -1) ++tally[static_cast<size_t>(gt) * classes + pred];
    for (int g = 0; g < classes; ++g)
        for (int p = 0; p < classes; ++p) {
            CHECK(forward.at(g, p) == tally[static_cast<size_t>(g) * classes + p]);
            CHECK(backward.at(g, p) == forward.at(g, p));
        }

    // sharded accumulation merges to the same counts
    ConfusionMatrix a(classes, -1), b(classes, -1);
    for (size_t i = 0; i < stream.size(); ++i)
        (i % 2 == 0 ? a : b).add(stream[i].first, stream[i].second);
    a.merge(b);
    for (int g = 0; g < classes; ++g)
        for (int p = 0; p < classes; ++p) CHECK(a.at(g, p) == forward.at(g, p));
}

TEST_CASE("hand-computed IoU and summary values") {
    ConfusionMatrix cm(2);
    // [[2,1],[1,2]]
    cm.add(0, 0);
    cm.add(0, 0);
    cm.add(1, 0);
    cm.add(0, 1);
    cm.add(1, 1);
    cm.add(1, 1);
    const std::vector<double> iou = cm.iou_per_class();
    CHECK(iou[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(iou[1] == doctest::Approx(0.5).epsilon(1e-12));
    const auto s = cm.summary();
    CHECK(s.miou == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.macc == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(s.wiou == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("perfect predictions score 1 everywhere; empty matrix is an error") {
    ConfusionMatrix cm(4);
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i <= c; ++i) cm.add(c, c);
    const auto s = cm.summary();
    CHECK(s.miou == 1.0);
    CHECK(s.macc == 1.0);
    CHECK(s.wiou == 1.0);

    ConfusionMatrix empty(3);
    CHECK_THROWS_AS(empty.summary(), DimensionError);
}

TEST_CASE("classes absent from GT and predictions are excluded from the means") {
    ConfusionMatrix cm(4);
    cm.add(0, 0);
    cm.add(0, 0);
    cm.add(1, 0);  // one class-0 point predicted as 1
    // classes 2 and 3 never appear
    const std::vector<double> iou = cm.iou_per_class();
    CHECK(iou[0] == doctest::Approx(2.0 / 3.0));
    CHECK(iou[1] == doctest::Approx(0.0));  // pure false positives: defined, zero
    CHECK(std::isnan(iou[2]));
    CHECK(std::isnan(iou[3]));
    const auto s = cm.summary();
    CHECK(s.miou == doctest::Approx((2.0 / 3.0) / 2.0));
    CHECK(s.macc == doctest::Approx(2.0 / 3.0));  // only class 0 present in GT
    CHECK(s.wiou == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("summary is invariant under a simultaneous class relabeling") {
    Rng rng(605);
    const int classes = 6;
    std::vector<std::pair<int, int>> stream;
    for (int i = 0; i < 300; ++i) stream.push_back({rng.below_int(classes), rng.below_int(classes)});

    ConfusionMatrix plain(classes);
    for (const auto& [pred, gt] : stream) plain.add(pred, gt);

    const std::vector<int> relabel = {3, 0, 5, 1, 4, 2};
    ConfusionMatrix renamed(classes);
    for (const auto& [pred, gt] : stream)
        renamed.add(relabel[static_cast<size_t>(pred)], relabel[static_cast<size_t>(gt)]);

    const auto s1 = plain.summary();
    const auto s2 = renamed.summary();
    CHECK(s1.miou == doctest::Approx(s2.miou).epsilon(1e-12));
    CHECK(s1.macc == doctest::Approx(s2.macc).epsilon(1e-12));
    CHECK(s1.wiou == doctest::Approx(s2.wiou).epsilon(1e-12));
    CHECK(s1.miou >= 0.0);
    CHECK(s1.wiou <= 1.0);
    CHECK(s1.macc <= 1.0);
}

TEST_CASE("branch votes take the majority with ties to the lowest class") {
    BranchVotes v(4);
    const int64_t key = 42;
    v.add(key, 2);
    v.add(key, 2);
    v.add(key, 1);
    CHECK(v.majority(key) == 2);
    v.add(key, 1);  // 2:2 tie between classes 1 and 2
    CHECK(v.majority(key) == 1);
    CHECK(v.majority(7) == -1);
    CHECK_THROWS_AS(v.add(key, 4), DimensionError);

    // single frame: voting equals that frame's label
    BranchVotes single(4);
    single.add(5, 3);
    CHECK(single.majority(5) == 3);

    // order independence
    Rng rng(606);
    std::vector<int> labels;
    for (int i = 0; i < 99; ++i) labels.push_back(rng.below_int(4));
    BranchVotes fwd(4), rev(4);
    for (const int l : labels) fwd.add(9, l);
    for (auto it = labels.rbegin(); it != labels.rend(); ++it) rev.add(9, *it);
    CHECK(fwd.majority(9) == rev.majority(9));
}
