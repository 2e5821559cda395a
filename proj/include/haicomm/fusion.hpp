#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "haicomm/checkpoint.hpp"
#include "haicomm/encoder3d.hpp"
#include "haicomm/optim.hpp"
#include "haicomm/rng.hpp"
#include "haicomm/tensor.hpp"

namespace haicomm {

// Which input pathways a model variant keeps. An empty rater_subset with
// use_raters means all raters.
struct AblationSpec {
    bool use_raters = true;
    std::vector<std::size_t> rater_subset;  // indices into the dataset's rater set
    bool use_t1 = true;
    bool use_t2 = true;

    void validate(std::size_t n_raters) const {
        if (!use_t1 && !use_t2) throw ConfigError("ablation: at least one modality must be selected");
        for (std::size_t r : rater_subset)
            if (r >= n_raters)
                throw ConfigError("ablation: rater index " + std::to_string(r) + " out of range for " +
                                  std::to_string(n_raters) + " raters");
    }

    std::size_t rater_input_width(std::size_t n_raters) const {
        if (!use_raters) return 0;
        return rater_subset.empty() ? n_raters : rater_subset.size();
    }

    std::string name() const {
        if (!use_raters && use_t1 && use_t2) return "haicomm_wo_haic";
        std::string n;
        if (use_t1 && !use_t2) n = "t1_only_w_haic";
        else if (!use_t1 && use_t2) n = "t2_only_w_haic";
        else n = "haicomm";
        if (use_raters && !rater_subset.empty()) {
            n += "_r";
            for (std::size_t i = 0; i < rater_subset.size(); ++i)
                n += (i ? "_" : "") + std::to_string(rater_subset[i] + 1);
        }
        return n;
    }
};

// Dual modality encoders plus a one-layer rater encoder; features concatenate
// in T1, T2, rater order into an affine projection and softmax.
template <typename T>
struct FusionModel {
    ViTConfig vit;
    AblationSpec spec;
    std::size_t n_raters = 0;
    std::optional<VitEncoder<T>> t1_enc, t2_enc;
    nn::Linear<T> rater_enc;
    nn::Linear<T> proj;
    ParamSet<T> params;

    static FusionModel build(const ViTConfig& vit, const AblationSpec& spec, std::size_t n_raters,
                             const Rng& base_rng, const Checkpoint* pretrained_encoder) {
        vit.validate();
        spec.validate(n_raters);
        FusionModel m;
        m.vit = vit;
        m.spec = spec;
        m.n_raters = n_raters;
        std::size_t width = 0;
        if (spec.use_t1) {
            m.t1_enc = VitEncoder<T>::build(vit, base_rng.derive(stream::kInit, 11));
            if (pretrained_encoder) load_from_checkpoint(m.t1_enc->params, *pretrained_encoder, "enc.");
            m.params.append(m.t1_enc->params, "t1.");
            width += vit.embed_dim;
        }
        if (spec.use_t2) {
            m.t2_enc = VitEncoder<T>::build(vit, base_rng.derive(stream::kInit, 12));
            if (pretrained_encoder) load_from_checkpoint(m.t2_enc->params, *pretrained_encoder, "enc.");
            m.params.append(m.t2_enc->params, "t2.");
            width += vit.embed_dim;
        }
        if (spec.use_raters) {
            Rng r = base_rng.derive(stream::kInit, 13);
            ParamSet<T> ps;
            m.rater_enc = nn::make_linear(ps, "rater", spec.rater_input_width(n_raters),
                                          vit.embed_dim, r);
            m.params.append(ps, "");
            width += vit.embed_dim;
        }
        {
            Rng r = base_rng.derive(stream::kInit, 14);
            ParamSet<T> ps;
            m.proj = nn::make_linear(ps, "proj", width, 2, r);
            m.params.append(ps, "");
        }
        return m;
    }

    Tensor<T> rater_feature(const std::vector<int>& rater_bits) const {
        if (rater_bits.size() != n_raters)
            throw ConfigError("fusion: rater vector has " + std::to_string(rater_bits.size()) +
                              " entries, model expects " + std::to_string(n_raters));
        std::vector<T> row;
        if (spec.rater_subset.empty()) {
            row.assign(rater_bits.begin(), rater_bits.end());
        } else {
            for (std::size_t r : spec.rater_subset) row.push_back(static_cast<T>(rater_bits[r]));
        }
        const std::size_t width = row.size();
        const Tensor<T> y = Tensor<T>::from({1, width}, std::move(row));
        return gelu(rater_enc(y));
    }

    // Feature blocks in concatenation order (dropped pathways omitted).
    std::vector<Tensor<T>> encode_features(const Tensor<T>& t1_tokens, const Tensor<T>& t2_tokens,
                                           const std::vector<int>& rater_bits) const {
        std::vector<Tensor<T>> feats;
        if (spec.use_t1) feats.push_back(t1_enc->summary_feature(t1_tokens));
        if (spec.use_t2) feats.push_back(t2_enc->summary_feature(t2_tokens));
        if (spec.use_raters) feats.push_back(rater_feature(rater_bits));
        return feats;
    }

    // p = softmax(proj(F_t1 ++ F_t2 ++ F_r)), [1 x 2]; positive class last.
    Tensor<T> fuse_predict(const std::vector<Tensor<T>>& feats) const {
        return softmax(proj(concat_cols(feats)));
    }

    Tensor<T> predict_probs(const Tensor<T>& t1_tokens, const Tensor<T>& t2_tokens,
                            const std::vector<int>& rater_bits) const {
        return fuse_predict(encode_features(t1_tokens, t2_tokens, rater_bits));
    }

    double predict_p_pos(const Tensor<T>& t1_tokens, const Tensor<T>& t2_tokens,
                         const std::vector<int>& rater_bits) const {
        return static_cast<double>(predict_probs(t1_tokens, t2_tokens, rater_bits).at(0, 1));
    }
};

template <typename T>
FusionModel<T> build_ablation(const AblationSpec& spec, const ViTConfig& vit, std::size_t n_raters,
                              const Rng& base_rng, const Checkpoint* pretrained_encoder) {
    return FusionModel<T>::build(vit, spec, n_raters, base_rng, pretrained_encoder);
}

// One training/evaluation case held in memory as patch tokens.
template <typename T>
struct CaseSample {
    std::int64_t case_id = 0;
    Tensor<T> t1_tokens, t2_tokens;  // undefined when the manifest lacks the modality
    std::vector<int> rater_bits;
    int label = 0;  // training target (pseudo label) or evaluation truth
};

struct FusionTrainConfig {
    std::size_t epochs = 60;
    std::size_t batch = 8;
    double base_lr = 1e-3;
    double warmup_epochs = 5;
    double weight_decay = 0.01;
    int patience = 10;  // epochs without val-accuracy improvement; <= 0 disables
    bool restore_best = true;
    bool freeze_encoders = false;
    std::uint64_t seed = 42;

    void validate() const {
        if (epochs < 1 || batch < 1) throw ConfigError("fusion: epochs and batch must be >= 1");
        if (base_lr < 0 || weight_decay < 0) throw ConfigError("fusion: negative rates");
        if (warmup_epochs >= static_cast<double>(epochs))
            throw ConfigError("fusion: warmup must be shorter than the run");
    }
};

struct FusionEpochLog {
    std::size_t epoch;
    double loss;
    double val_accuracy;  // NaN when there is no val split
    double lr;
};

namespace detail_fusion {

template <typename T>
Tensor<T> sample_loss(const FusionModel<T>& m, const CaseSample<T>& s) {
    const Tensor<T> p = m.predict_probs(s.t1_tokens, s.t2_tokens, s.rater_bits);
    return bce_loss(slice_cols(p, 1, 1), {s.label});
}

template <typename T>
double accuracy_on(const FusionModel<T>& m, const std::vector<CaseSample<T>>& samples) {
    if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::size_t hit = 0;
    for (const auto& s : samples) {
        const int pred = m.predict_p_pos(s.t1_tokens, s.t2_tokens, s.rater_bits) > 0.5 ? 1 : 0;
        hit += pred == s.label;
    }
    return static_cast<double>(hit) / static_cast<double>(samples.size());
}

}  // namespace detail_fusion

// Joint optimization of every kept parameter group under the warmup+cosine
// schedule, early stopping on val accuracy when patience is enabled.
template <typename T>
std::vector<FusionEpochLog> train_fusion(FusionModel<T>& model, const std::vector<CaseSample<T>>& train,
                                         const std::vector<CaseSample<T>>& val,
                                         const FusionTrainConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw DataError("fusion: empty train split");

    ParamSet<T> trainable;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& name = model.params.names[i];
        if (cfg.freeze_encoders &&
            (name.rfind("t1.", 0) == 0 || name.rfind("t2.", 0) == 0))
            continue;
        trainable.add(name, model.params.tensors[i]);
    }

    const Rng base(cfg.seed);
    AdamW<T> opt({.weight_decay = cfg.weight_decay});
    std::vector<FusionEpochLog> log;
    double best_val = -1.0;
    int since_best = 0;
    std::vector<std::vector<T>> best_snapshot;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_annealing_lr(static_cast<double>(epoch), cfg.warmup_epochs,
                                              static_cast<double>(cfg.epochs), cfg.base_lr);
        Rng shuffle_rng = base.derive(stream::kShuffle, epoch);
        const auto order = shuffle_rng.permutation(train.size());
        double epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t take = std::min(cfg.batch, order.size() - done);
            trainable.zero_grad();
            for (std::size_t b = 0; b < take; ++b) {
                const Tensor<T> loss = detail_fusion::sample_loss(model, train[order[done + b]]);
                if (!std::isfinite(static_cast<double>(loss.item())))
                    throw NumericError("fusion: non-finite loss at epoch " + std::to_string(epoch));
                epoch_loss += static_cast<double>(loss.item());
                loss.backward();
            }
            trainable.scale_grads(T(1) / static_cast<T>(take));
            opt.step(trainable, static_cast<T>(lr));
            done += take;
        }
        const double val_acc = detail_fusion::accuracy_on(model, val);
        log.push_back({epoch, epoch_loss / static_cast<double>(train.size()), val_acc, lr});

        if (cfg.patience > 0 && !val.empty()) {
            if (val_acc > best_val) {
                best_val = val_acc;
                since_best = 0;
                if (cfg.restore_best) best_snapshot = model.params.snapshot();
            } else {
                // on ties keep the later snapshot (more training at equal val
                // accuracy) but do not extend the patience window
                if (val_acc == best_val && cfg.restore_best) best_snapshot = model.params.snapshot();
                if (++since_best >= cfg.patience) break;
            }
        }
    }
    if (cfg.patience > 0 && cfg.restore_best && !best_snapshot.empty())
        model.params.restore(best_snapshot);
    return log;
}

}  // namespace haicomm
