#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "haicomm/checkpoint.hpp"
#include "haicomm/optim.hpp"
#include "haicomm/rng.hpp"

using namespace haicomm;

namespace {

std::filesystem::path tmp_file(const char* name) {
    const auto dir = std::filesystem::temp_directory_path() / "haicomm_test_optim";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("adamw leaves parameters alone with zero gradient and zero decay") {
    ParamSet<double> ps;
    auto p = ps.add("p", Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true));
    p.add_to_grad({0.0, 0.0, 0.0});
    AdamW<double> opt({.weight_decay = 0.0});
    for (int i = 0; i < 5; ++i) opt.step(ps, 0.1);
    CHECK(p.data() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adamw single hand-computed step") {
    ParamSet<double> ps;
    auto p = ps.add("p", Tensor<double>::from({1}, {1.0}, true));
    p.add_to_grad({1.0});
    AdamW<double> opt({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
    opt.step(ps, 0.1);
    // bias-corrected first step moves by ~lr
    CHECK(p.data()[0] == Catch::Approx(0.9).margin(1e-6));
}

TEST_CASE("adamw update magnitude approaches lr under a constant gradient") {
    ParamSet<double> ps;
    auto p = ps.add("p", Tensor<double>::from({1}, {5.0}, true));
    AdamW<double> opt({.weight_decay = 0.0});
    double prev = p.data()[0];
    double step_size = 0.0;
    for (int i = 0; i < 300; ++i) {
        ps.zero_grad();
        p.add_to_grad({2.5});
        opt.step(ps, 0.01);
        step_size = prev - p.data()[0];
        prev = p.data()[0];
    }
    CHECK(step_size == Catch::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adamw decay is decoupled from the gradient path") {
    ParamSet<double> ps;
    auto p = ps.add("p", Tensor<double>::from({1}, {2.0}, true));
    p.add_to_grad({0.0});
    AdamW<double> opt({.weight_decay = 0.1});
    opt.step(ps, 0.5);
    // zero gradient: the only movement is -lr * wd * p
    CHECK(p.data()[0] == Catch::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-12));
}

TEST_CASE("adamw rejects non-finite gradients naming the parameter") {
    ParamSet<double> ps;
    auto p = ps.add("enc.block0.qkv.w", Tensor<double>::from({2}, {1.0, 1.0}, true));
    p.add_to_grad({1.0, std::numeric_limits<double>::quiet_NaN()});
    AdamW<double> opt;
    try {
        opt.step(ps, 0.1);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("enc.block0.qkv.w") != std::string::npos);
    }
}

TEST_CASE("cosine schedule: warmup ramp, peak, decay to zero") {
    const double base = 1e-3;
    CHECK(cosine_annealing_lr(0, 5, 60, base) == Catch::Approx(base / 5.0));
    CHECK(cosine_annealing_lr(1, 5, 60, base) == Catch::Approx(2.0 * base / 5.0));
    CHECK(cosine_annealing_lr(4, 5, 60, base) == Catch::Approx(base));
    CHECK(cosine_annealing_lr(5, 5, 60, base) == Catch::Approx(base));
    CHECK(cosine_annealing_lr(32.5, 5, 60, base) == Catch::Approx(base * 0.5));
    CHECK(cosine_annealing_lr(60, 5, 60, base) == Catch::Approx(0.0).margin(1e-15));
    for (double e = 5.0; e < 59.0; e += 1.0)
        CHECK(cosine_annealing_lr(e + 1, 5, 60, base) < cosine_annealing_lr(e, 5, 60, base));
    CHECK_THROWS_AS(cosine_annealing_lr(0, 60, 60, base), ConfigError);
}

TEST_CASE("identical seeds give bit-identical parameter trajectories") {
    const auto run = [] {
        Rng rng(99);
        ParamSet<float> ps;
        auto w = ps.add("w", make_param<float>({4, 4}, rng, 0.1f));
        auto b = ps.add("b", make_param<float>({4}, rng, 0.1f));
        AdamW<float> opt({.weight_decay = 0.01});
        const auto x = make_param<float>({2, 4}, rng, 1.0f);
        for (int step = 0; step < 20; ++step) {
            ps.zero_grad();
            const auto loss = mean(mul(linear(Tensor<float>(x), w, b), linear(Tensor<float>(x), w, b)));
            loss.backward();
            opt.step(ps, 1e-2f);
        }
        return std::make_pair(w.data(), b.data());
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(std::memcmp(a.first.data(), b.first.data(), a.first.size() * sizeof(float)) == 0);
    REQUIRE(std::memcmp(a.second.data(), b.second.data(), b.second.size() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(4242);
    ParamSet<float> ps;
    ps.add("enc.patch_embed.w", make_param<float>({16, 8}, rng, 0.3f));
    ps.add("enc.pos", make_param<float>({5, 8}, rng, 0.02f));
    ps.add("proj.b", make_param<float>({2}, rng, 1.0f));
    const Checkpoint out = to_checkpoint(ps);
    const auto path = tmp_file("roundtrip.ckpt");
    out.save(path);
    const Checkpoint in = Checkpoint::load(path);
    REQUIRE(in.entries.size() == out.entries.size());
    for (std::size_t i = 0; i < in.entries.size(); ++i) {
        CHECK(in.entries[i].name == out.entries[i].name);
        CHECK(in.entries[i].shape == out.entries[i].shape);
        REQUIRE(std::memcmp(in.entries[i].data.data(), out.entries[i].data.data(),
                            in.entries[i].data.size() * sizeof(float)) == 0);
    }
    // and the file itself is stable across saves
    const auto path2 = tmp_file("roundtrip2.ckpt");
    in.save(path2);
    CHECK(read_file_bytes(path) == read_file_bytes(path2));
}

TEST_CASE("checkpoint loading validates names and shapes") {
    Rng rng(1);
    ParamSet<float> ps;
    ps.add("a", make_param<float>({2, 2}, rng, 1.0f));
    const Checkpoint ckpt = to_checkpoint(ps);

    ParamSet<float> missing;
    missing.add("zzz", make_param<float>({2, 2}, rng, 1.0f));
    CHECK_THROWS_AS(load_from_checkpoint(missing, ckpt), FormatError);

    ParamSet<float> wrong;
    wrong.add("a", make_param<float>({2, 3}, rng, 1.0f));
    CHECK_THROWS_AS(load_from_checkpoint(wrong, ckpt), ShapeError);
}

TEST_CASE("corrupt checkpoint files are rejected") {
    const auto path = tmp_file("bad.ckpt");
    write_file_bytes(path, "this is not json\n");
    CHECK_THROWS_AS(Checkpoint::load(path), FormatError);
    CHECK_THROWS_AS(Checkpoint::load(tmp_file("missing.ckpt")), IoError);
}
