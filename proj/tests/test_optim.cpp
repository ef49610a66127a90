#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <string>

#include "voxfuse/checkpoint.hpp"
#include "voxfuse/errors.hpp"
#include "voxfuse/optim.hpp"
#include "voxfuse/rng.hpp"

using namespace voxfuse;

namespace {

std::string temp_path(const char* stem) {
    return std::string("/tmp/voxfuse_test_") + stem;
}

}  // namespace

TEST_CASE("adam follows the hand-evaluated recurrence") {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    ps.entry(0).grad[0] = 0.5;

    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ps.adam_step(lr, b1, b2, eps);

    // one step by hand: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2
    const double g = 0.5;
    const double mhat = (1.0 - b1) * g / (1.0 - b1);
    const double vhat = (1.0 - b2) * g * g / (1.0 - b2);
    const double expect = 1.0 - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(ps.entry(0).value[0] == doctest::Approx(expect).epsilon(1e-14));
    CHECK(ps.step_count() == 1);
    // to bias-correction/eps terms this is a move by -lr * sign(g)
    CHECK(ps.entry(0).value[0] == doctest::Approx(1.0 - lr).epsilon(1e-6));
    // gradients stay until zeroed
    CHECK(ps.entry(0).grad[0] == 0.5);
    ps.zero_grad();
    CHECK(ps.entry(0).grad[0] == 0.0);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    ParamStore ps;
    ps.add("w", Tensor::vec({2.0, -3.0}));
    ps.adam_step(0.1);
    CHECK(ps.entry(0).value[0] == 2.0);
    CHECK(ps.entry(0).value[1] == -3.0);
}

TEST_CASE("adam validates its configuration") {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    CHECK_THROWS_AS(ps.adam_step(0.0), ConfigError);
    CHECK_THROWS_AS(ps.adam_step(-1.0), ConfigError);
    CHECK_THROWS_AS(ps.adam_step(0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(ps.add("w", Tensor::scalar(0.0)), ConfigError);
}

TEST_CASE("per-group rates apply to the right parameters") {
    ParamStore ps;
    ps.add("core", Tensor::scalar(0.0), 0);
    ps.add("slow", Tensor::scalar(0.0), 1);
    ps.entry(0).grad[0] = 1.0;
    ps.entry(1).grad[0] = 1.0;
    ps.adam_step_groups({1e-2, 1e-5});
    CHECK(ps.entry(0).value[0] == doctest::Approx(-1e-2).epsilon(1e-4));
    CHECK(ps.entry(1).value[0] == doctest::Approx(-1e-5).epsilon(1e-4));

    ParamStore missing;
    missing.add("x", Tensor::scalar(0.0), 2);
    CHECK_THROWS_AS(missing.adam_step_groups({1e-3}), ConfigError);
}

TEST_CASE("two identical runs give bit-identical parameters") {
    auto run = [] {
        Rng rng(42);
        ParamStore ps;
        Tensor init({4});
        for (size_t i = 0; i < 4; ++i) init[i] = rng.normal();
        ps.add("w", init);
        for (int step = 0; step < 25; ++step) {
            for (size_t i = 0; i < 4; ++i) ps.entry(0).grad[i] = rng.normal();
            ps.adam_step(1e-3);
            ps.zero_grad();
        }
        return ps.entry(0).value;
    };
    const Tensor a = run();
    const Tensor b = run();
    for (size_t i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("onecycle endpoints and peak") {
    ScheduleConfig cfg;
    cfg.max_lr = {1e-3};
    cfg.total_steps = 1000;
    cfg.warmup_fraction = 0.3;
    cfg.initial_divisor = 25.0;
    cfg.final_divisor = 1e4;

    CHECK(onecycle_lr(0, cfg) == doctest::Approx(1e-3 / 25.0).epsilon(1e-12));
    CHECK(onecycle_lr(300, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(onecycle_lr(1000, cfg) == doctest::Approx(1e-3 / 1e4).epsilon(1e-12));
    // past the end clamps to the final value
    CHECK(onecycle_lr(5000, cfg) == doctest::Approx(1e-3 / 1e4).epsilon(1e-12));

    // midpoint of the decay phase, from the closed form:
    // fin + (max-fin) * 0.5 * (1 + cos(pi/2)) = fin + (max-fin)/2
    const double fin = 1e-3 / 1e4;
    CHECK(onecycle_lr(650, cfg) == doctest::Approx(fin + (1e-3 - fin) * 0.5).epsilon(1e-12));

    // monotone up then down
    for (int s = 1; s <= 300; ++s) CHECK(onecycle_lr(s, cfg) >= onecycle_lr(s - 1, cfg));
    for (int s = 301; s <= 1000; ++s) CHECK(onecycle_lr(s, cfg) <= onecycle_lr(s - 1, cfg));
}

TEST_CASE("onecycle validates configuration") {
    ScheduleConfig cfg;
    cfg.total_steps = 100;
    cfg.warmup_fraction = 0.0;
    CHECK_THROWS_AS(onecycle_lr(0, cfg), ConfigError);
    cfg.warmup_fraction = 0.3;
    cfg.initial_divisor = 0.5;
    CHECK_THROWS_AS(onecycle_lr(0, cfg), ConfigError);
    cfg.initial_divisor = 25.0;
    CHECK_THROWS_AS(onecycle_lr(0, cfg, 3), ConfigError);
    CHECK_THROWS_AS(onecycle_lr(-1, cfg), ConfigError);
}

TEST_CASE("tensor container round-trips names, shapes, and bits") {
    Rng rng(7);
    std::vector<NamedTensor> entries;
    Tensor a({3, 4});
    for (size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    Tensor b({5});
    for (size_t i = 0; i < b.size(); ++i) b[i] = rng.uniform(-10.0, 10.0);
    entries.push_back({"alpha", a});
    entries.push_back({"beta/gamma", b});

    const std::string path = temp_path("roundtrip.bin");
    save_tensor_file(path, entries, false, 77);
    const TensorFile loaded = load_tensor_file(path);
    REQUIRE(loaded.entries.size() == 2);
    CHECK(loaded.step == 77);
    CHECK(loaded.entries[0].name == "alpha");
    CHECK(loaded.entries[1].name == "beta/gamma");
    REQUIRE(loaded.entries[0].value.same_shape(a));
    for (size_t i = 0; i < a.size(); ++i) CHECK(loaded.entries[0].value[i] == a[i]);
    for (size_t i = 0; i < b.size(); ++i) CHECK(loaded.entries[1].value[i] == b[i]);
    std::remove(path.c_str());
}

TEST_CASE("f32 storage quantizes but round-trips through upcast") {
    Tensor a({2});
    a[0] = 0.1;  // not representable in f32
    a[1] = 0.5;  // exactly representable
    const std::string path = temp_path("f32.bin");
    save_tensor_file(path, {{"a", a}}, true);
    const TensorFile loaded = load_tensor_file(path);
    CHECK(loaded.entries[0].value[0] == doctest::Approx(0.1).epsilon(1e-7));
    CHECK(loaded.entries[0].value[0] != 0.1);
    CHECK(loaded.entries[0].value[1] == 0.5);
    std::remove(path.c_str());
}

TEST_CASE("corrupt tensor files are rejected") {
    const std::string path = temp_path("corrupt.bin");
    save_tensor_file(path, {{"a", Tensor::vec({1.0, 2.0})}});

    // truncate
    {
        std::FILE* f = std::fopen(path.c_str(), "rb+");
        REQUIRE(f != nullptr);
        std::fseek(f, 0, SEEK_END);
        const long len = std::ftell(f);
        std::fclose(f);
        REQUIRE(truncate(path.c_str(), len - 5) == 0);
    }
    CHECK_THROWS_AS(load_tensor_file(path), FormatError);

    // wrong magic
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("not a tensor file at all", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_tensor_file(path), FormatError);
    CHECK_THROWS_AS(load_tensor_file("/nonexistent/nope.bin"), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("checkpoints restore parameters by name and reject mismatches") {
    ParamStore ps;
    Rng rng(9);
    Tensor w({4, 3});
    for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
    ps.add("enc.w", w);
    ps.add("enc.b", Tensor::vec({1.0, 2.0, 3.0}));
    for (size_t i = 0; i < 3; ++i) ps.entry(1).grad[i] = 1.0;
    ps.adam_step(1e-2);

    const std::string path = temp_path("ckpt.bin");
    save_checkpoint(path, ps, false, true);

    // fresh store with the same layout, different values
    ParamStore fresh;
    fresh.add("enc.w", Tensor::zeros({4, 3}));
    fresh.add("enc.b", Tensor::zeros({3}));
    load_checkpoint(path, fresh);
    CHECK(fresh.step_count() == 1);
    for (size_t i = 0; i < w.size(); ++i) CHECK(fresh.entry(0).value[i] == ps.entry(0).value[i]);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(fresh.entry(1).value[i] == ps.entry(1).value[i]);
        CHECK(fresh.entry(1).m[i] == ps.entry(1).m[i]);
        CHECK(fresh.entry(1).v[i] == ps.entry(1).v[i]);
    }

    // moments restored => the next step matches exactly
    ParamStore cont = std::move(fresh);
    for (size_t i = 0; i < 3; ++i) {
        cont.entry(1).grad[i] = 0.5;
        ps.entry(1).grad[i] = 0.5;
    }
    cont.adam_step(1e-2);
    ps.adam_step(1e-2);
    for (size_t i = 0; i < 3; ++i) CHECK(cont.entry(1).value[i] == ps.entry(1).value[i]);

    ParamStore wrong_shape;
    wrong_shape.add("enc.w", Tensor::zeros({4, 2}));
    wrong_shape.add("enc.b", Tensor::zeros({3}));
    CHECK_THROWS_AS(load_checkpoint(path, wrong_shape), FormatError);

    ParamStore missing;
    missing.add("enc.w", Tensor::zeros({4, 3}));
    missing.add("enc.b", Tensor::zeros({3}));
    missing.add("extra", Tensor::zeros({1}));
    CHECK_THROWS_AS(load_checkpoint(path, missing), FormatError);

    ParamStore fewer;
    fewer.add("enc.w", Tensor::zeros({4, 3}));
    CHECK_THROWS_AS(load_checkpoint(path, fewer), FormatError);
    std::remove(path.c_str());
}
