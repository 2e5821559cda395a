#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "haicomm/fusion.hpp"
#include "haicomm/metrics.hpp"
#include "haicomm/synthgen.hpp"
#include "haicomm/volprep.hpp"
#include "oracles.hpp"

using namespace haicomm;

namespace {

ViTConfig toy_vit() {
    ViTConfig v;
    v.volume_extents = {4, 4, 8};  // 2 tokens
    v.patch = {4, 4, 4};
    v.embed_dim = 8;
    v.blocks = 1;
    v.heads = 2;
    v.mlp_ratio = 2.0;
    v.decoder_dim = 8;
    v.decoder_blocks = 1;
    v.decoder_heads = 2;
    return v;
}

ViTConfig mini_vit() {
    ViTConfig v;
    v.volume_extents = {8, 16, 16};
    v.patch = {4, 8, 8};
    v.embed_dim = 16;
    v.blocks = 1;
    v.heads = 2;
    v.mlp_ratio = 2.0;
    v.decoder_dim = 8;
    v.decoder_blocks = 1;
    v.decoder_heads = 2;
    return v;
}

template <typename T>
Tensor<T> random_tokens(const ViTConfig& vit, Rng& rng) {
    std::vector<T> v(vit.token_count() * vit.patch_volume());
    for (auto& x : v) x = static_cast<T>(rng.uniform(0.0, 1.0));
    return Tensor<T>::from({vit.token_count(), vit.patch_volume()}, std::move(v));
}

template <typename T>
std::vector<CaseSample<T>> render_labeled(const GenConfig& g, const ViTConfig& vit, std::size_t n,
                                          std::int64_t id0, bool label_from_raters) {
    std::vector<CaseSample<T>> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t id = id0 + static_cast<std::int64_t>(i);
        const int latent = synth::draw_latent(g, id);
        CaseSample<T> s;
        s.case_id = id;
        s.t1_tokens = patchify<T>(normalize01(synth::render_canonical(g, id, true, latent)), vit);
        s.t2_tokens = patchify<T>(normalize01(synth::render_canonical(g, id, false, latent)), vit);
        s.rater_bits = synth::draw_rater_labels(g, id, latent);
        if (label_from_raters) {
            const int votes = s.rater_bits[0] + s.rater_bits[1] + s.rater_bits[2];
            s.label = votes >= 2 ? 1 : 0;
        } else {
            s.label = latent;
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("feature widths follow the ablation spec") {
    ViTConfig vit = toy_vit();
    vit.embed_dim = 64;
    vit.heads = 4;
    AblationSpec full;
    const auto m = FusionModel<float>::build(vit, full, 3, Rng(1), nullptr);
    CHECK(m.proj.w.shape() == Shape{192, 2});  // 3 * embed_dim

    AblationSpec wo;
    wo.use_raters = false;
    CHECK(FusionModel<float>::build(vit, wo, 3, Rng(1), nullptr).proj.w.shape() == Shape{128, 2});

    AblationSpec one_rater;
    one_rater.rater_subset = {1};
    const auto mr = FusionModel<float>::build(vit, one_rater, 3, Rng(1), nullptr);
    CHECK(mr.rater_enc.w.shape() == Shape{1, 64});

    AblationSpec t1_only;
    t1_only.use_t2 = false;
    CHECK(FusionModel<float>::build(vit, t1_only, 3, Rng(1), nullptr).proj.w.shape() ==
          Shape{128, 2});

    AblationSpec none;
    none.use_t1 = none.use_t2 = false;
    CHECK_THROWS_AS(none.validate(3), ConfigError);
    AblationSpec bad_subset;
    bad_subset.rater_subset = {3};
    CHECK_THROWS_AS(bad_subset.validate(3), ConfigError);
}

TEST_CASE("identical encoder parameters give identical modality features") {
    const ViTConfig vit = toy_vit();
    // both encoders initialized from one checkpoint
    const MaeModel<float> mae = MaeModel<float>::build(vit, Rng(5));
    Checkpoint phi;
    for (const auto& e : to_checkpoint(mae.params).entries)
        if (e.name.rfind("enc.", 0) == 0) phi.entries.push_back(e);
    const auto m = FusionModel<float>::build(vit, {}, 3, Rng(6), &phi);
    Rng rng(7);
    const auto tokens = random_tokens<float>(vit, rng);
    const auto feats = m.encode_features(tokens, tokens, {0, 1, 0});
    REQUIRE(feats.size() == 3);
    CHECK(feats[0].data() == feats[1].data());
}

TEST_CASE("rater feature separates distinct rater vectors") {
    const ViTConfig vit = toy_vit();
    const auto m = FusionModel<float>::build(vit, {}, 3, Rng(8), nullptr);
    const auto zero = m.rater_feature({0, 0, 0});
    const auto one_hot = m.rater_feature({0, 1, 0});
    CHECK(zero.data() != one_hot.data());
    CHECK_THROWS_AS(m.rater_feature({0, 1}), ConfigError);
}

TEST_CASE("fuse_predict: zero projection gives the uniform distribution") {
    const ViTConfig vit = toy_vit();
    auto m = FusionModel<float>::build(vit, {}, 3, Rng(9), nullptr);
    std::fill(m.proj.w.data().begin(), m.proj.w.data().end(), 0.0f);
    std::fill(m.proj.b.data().begin(), m.proj.b.data().end(), 0.0f);
    Rng rng(10);
    const auto tokens = random_tokens<float>(vit, rng);
    const auto p = m.predict_probs(tokens, tokens, {1, 0, 1});
    CHECK(p.at(0, 0) == Catch::Approx(0.5).margin(1e-7));
    CHECK(p.at(0, 1) == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("fuse_predict: bias logits (ln1, ln3) give (0.25, 0.75)") {
    const ViTConfig vit = toy_vit();
    auto m = FusionModel<double>::build(vit, {}, 3, Rng(11), nullptr);
    std::fill(m.proj.w.data().begin(), m.proj.w.data().end(), 0.0);
    m.proj.b.data() = {std::log(1.0), std::log(3.0)};
    Rng rng(12);
    const auto tokens = random_tokens<double>(vit, rng);
    const auto p = m.predict_probs(tokens, tokens, {0, 0, 0});
    CHECK(p.at(0, 0) == Catch::Approx(0.25).margin(1e-12));
    CHECK(p.at(0, 1) == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("prediction sums to one and repeats exactly") {
    const ViTConfig vit = toy_vit();
    const auto m = FusionModel<float>::build(vit, {}, 3, Rng(13), nullptr);
    Rng rng(14);
    const auto t1 = random_tokens<float>(vit, rng);
    const auto t2 = random_tokens<float>(vit, rng);
    const auto a = m.predict_probs(t1, t2, {1, 1, 0});
    const auto b = m.predict_probs(t1, t2, {1, 1, 0});
    CHECK(a.data() == b.data());
    CHECK(static_cast<double>(a.at(0, 0)) + a.at(0, 1) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("permuting concat blocks with matching projection rows keeps p") {
    Rng rng(15);
    const auto block = [&](std::size_t c) {
        std::vector<double> v(c);
        for (auto& x : v) x = rng.uniform(-1, 1);
        return Tensor<double>::from({1, c}, std::move(v));
    };
    const auto A = block(4), B = block(4), C = block(4);
    std::vector<double> w(12 * 2);
    for (auto& x : w) x = rng.uniform(-1, 1);
    const auto W = Tensor<double>::from({12, 2}, w);
    const auto bias = Tensor<double>::from({2}, {0.3, -0.2});
    const auto p1 = softmax(linear(concat_cols<double>({A, B, C}), W, bias));

    std::vector<double> wp(12 * 2);  // rows reordered to B, C, A blocks
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 2; ++c) {
            wp[(r + 0) * 2 + c] = w[(r + 4) * 2 + c];
            wp[(r + 4) * 2 + c] = w[(r + 8) * 2 + c];
            wp[(r + 8) * 2 + c] = w[(r + 0) * 2 + c];
        }
    const auto p2 = softmax(linear(concat_cols<double>({B, C, A}), Tensor<double>::from({12, 2}, wp), bias));
    CHECK(p1.at(0, 0) == Catch::Approx(p2.at(0, 0)).margin(1e-12));
    CHECK(p1.at(0, 1) == Catch::Approx(p2.at(0, 1)).margin(1e-12));
}

TEST_CASE("zero learning rate leaves the fusion model untouched") {
    const ViTConfig vit = mini_vit();
    GenConfig g;
    g.volume_extents = vit.volume_extents;
    g.seed = 16;
    auto train = render_labeled<float>(g, vit, 8, 0, true);
    auto m = FusionModel<float>::build(vit, {}, 3, Rng(16), nullptr);
    const Checkpoint before = to_checkpoint(m.params);
    FusionTrainConfig fc;
    fc.epochs = 3;
    fc.warmup_epochs = 1;
    fc.base_lr = 0.0;
    fc.patience = 0;
    fc.seed = 16;
    train_fusion(m, train, {}, fc);
    const Checkpoint after = to_checkpoint(m.params);
    for (std::size_t i = 0; i < before.entries.size(); ++i)
        CHECK(before.entries[i].data == after.entries[i].data);
}

TEST_CASE("training requires a non-empty train split") {
    auto m = FusionModel<float>::build(mini_vit(), {}, 3, Rng(99), nullptr);
    FusionTrainConfig fc;
    CHECK_THROWS_AS(train_fusion(m, {}, {}, fc), DataError);
}

TEST_CASE("training loss decreases on separable data with informative raters") {
    const ViTConfig vit = mini_vit();
    GenConfig g;
    g.volume_extents = vit.volume_extents;
    g.signal_amplitude = 1.5;
    g.noise_sigma = 0.2;
    g.seed = 17;
    auto train = render_labeled<float>(g, vit, 24, 0, true);
    auto m = FusionModel<float>::build(vit, {}, 3, Rng(17), nullptr);
    FusionTrainConfig fc;
    fc.epochs = 12;
    fc.warmup_epochs = 2;
    fc.patience = 0;
    fc.seed = 17;
    const auto log = train_fusion(m, train, {}, fc);
    CHECK(log.back().loss < log.front().loss);
}

TEST_CASE("gradient of the training loss matches finite differences end to end") {
    const ViTConfig vit = toy_vit();
    GenConfig g;
    g.volume_extents = vit.volume_extents;
    g.seed = 18;
    const auto batch = render_labeled<double>(g, vit, 2, 0, false);
    auto m = FusionModel<double>::build(vit, {}, 3, Rng(18), nullptr);

    const auto loss_fn = [&] {
        std::vector<Tensor<double>> p_rows;
        for (const auto& s : batch)
            p_rows.push_back(slice_cols(m.predict_probs(s.t1_tokens, s.t2_tokens, s.rater_bits), 1, 1));
        return bce_loss(concat_rows(p_rows), {batch[0].label, batch[1].label});
    };

    SECTION("projection parameters") {
        ParamSet<double> eta;
        eta.add("proj.w", m.proj.w);
        eta.add("proj.b", m.proj.b);
        const double err = oracles::max_rel_grad_err(eta, loss_fn);
        INFO("eta err " << err);
        CHECK(err <= 1e-4);
    }

    SECTION("every parameter group") {
        const double err = oracles::max_rel_grad_err(m.params, loss_fn);
        INFO("all-params err " << err);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("training is bit-deterministic in the seed") {
    const ViTConfig vit = mini_vit();
    GenConfig g;
    g.volume_extents = vit.volume_extents;
    g.seed = 19;
    const auto train = render_labeled<float>(g, vit, 10, 0, true);
    const auto val = render_labeled<float>(g, vit, 4, 100, true);
    const auto run = [&] {
        auto m = FusionModel<float>::build(vit, {}, 3, Rng(19), nullptr);
        FusionTrainConfig fc;
        fc.epochs = 5;
        fc.warmup_epochs = 1;
        fc.patience = 3;
        fc.seed = 19;
        train_fusion(m, train, val, fc);
        return to_checkpoint(m.params);
    };
    const Checkpoint a = run();
    const Checkpoint b = run();
    REQUIRE(a.entries.size() == b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i)
        CHECK(std::memcmp(a.entries[i].data.data(), b.entries[i].data.data(),
                          a.entries[i].data.size() * sizeof(float)) == 0);
}

TEST_CASE("the rater pathway is live after training on informative raters") {
    const ViTConfig vit = mini_vit();
    GenConfig g;
    g.volume_extents = vit.volume_extents;
    g.signal_amplitude = 0.3;
    g.noise_sigma = 0.4;
    g.annotators = {{0.9, 0.9, "a"}, {0.85, 0.85, "b"}, {0.9, 0.85, "c"}};
    g.seed = 20;
    auto train = render_labeled<float>(g, vit, 32, 0, true);
    auto m = FusionModel<float>::build(vit, {}, 3, Rng(20), nullptr);
    FusionTrainConfig fc;
    fc.epochs = 15;
    fc.warmup_epochs = 3;
    fc.patience = 0;
    fc.seed = 20;
    train_fusion(m, train, {}, fc);
    const auto probe = render_labeled<float>(g, vit, 1, 500, true)[0];
    const double p_orig = m.predict_p_pos(probe.t1_tokens, probe.t2_tokens, probe.rater_bits);
    std::vector<int> flipped;
    for (int b : probe.rater_bits) flipped.push_back(1 - b);
    const double p_flip = m.predict_p_pos(probe.t1_tokens, probe.t2_tokens, flipped);
    CHECK(std::fabs(p_orig - p_flip) > 1e-4);
}

TEST_CASE("standalone separability rises with the signal amplitude") {
    const ViTConfig vit = mini_vit();
    const double amplitudes[4] = {0.0, 0.5, 1.0, 2.0};
    double mean_auc[4] = {0, 0, 0, 0};
    const int n_seeds = 5;
    for (int a = 0; a < 4; ++a) {
        for (int seed = 0; seed < n_seeds; ++seed) {
            GenConfig g;
            g.volume_extents = vit.volume_extents;
            g.signal_amplitude = amplitudes[a];
            g.noise_sigma = 0.4;
            g.seed = 600 + seed;
            const auto train = render_labeled<float>(g, vit, 40, 0, false);
            const auto test = render_labeled<float>(g, vit, 80, 1000, false);
            AblationSpec image_only;
            image_only.use_raters = false;
            auto m = FusionModel<float>::build(vit, image_only, 0, Rng(600 + seed), nullptr);
            FusionTrainConfig fc;
            fc.epochs = 16;
            fc.warmup_epochs = 2;
            fc.patience = 0;
            fc.seed = 600 + seed;
            train_fusion(m, train, {}, fc);
            std::vector<double> scores;
            std::vector<int> labels;
            for (const auto& s : test) {
                scores.push_back(m.predict_p_pos(s.t1_tokens, s.t2_tokens, s.rater_bits));
                labels.push_back(s.label);
            }
            mean_auc[a] += auroc(scores, labels);
        }
        mean_auc[a] /= n_seeds;
    }
    INFO("auroc by amplitude: " << mean_auc[0] << " " << mean_auc[1] << " " << mean_auc[2] << " "
                                << mean_auc[3]);
    CHECK(mean_auc[0] <= mean_auc[1]);
    CHECK(mean_auc[1] <= mean_auc[2]);
    CHECK(mean_auc[2] <= mean_auc[3]);
    CHECK(mean_auc[0] >= 0.35);
    CHECK(mean_auc[0] <= 0.65);
    CHECK(mean_auc[3] >= 0.8);
}
