#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "haicomm/fusion.hpp"
#include "haicomm/rng.hpp"

namespace haicomm {

struct RaterMatrix {
    std::vector<std::vector<int>> labels;  // N rows of K binary annotations
    std::vector<std::string> rater_ids;

    std::size_t n() const { return labels.size(); }
    std::size_t k() const { return labels.empty() ? 0 : labels[0].size(); }

    void validate() const {
        if (labels.empty()) throw DataError("rater matrix: no samples");
        const std::size_t K = labels[0].size();
        if (K < 1) throw DataError("rater matrix: no raters");
        for (const auto& row : labels) {
            if (row.size() != K) throw DataError("rater matrix: ragged rows");
            for (int y : row)
                if (y != 0 && y != 1) throw DataError("rater matrix: entries must be 0/1");
        }
    }
};

// Per-sample most frequent label. Even-K ties break by model probability when
// provided, otherwise label 0.
inline std::vector<int> majority_vote(const RaterMatrix& r,
                                      const std::vector<std::array<double, 2>>* tie_break = nullptr) {
    r.validate();
    if (tie_break && tie_break->size() != r.n())
        throw DataError("majority_vote: tie-break probabilities do not match sample count");
    std::vector<int> out(r.n());
    for (std::size_t i = 0; i < r.n(); ++i) {
        std::size_t ones = 0;
        for (int y : r.labels[i]) ones += static_cast<std::size_t>(y);
        const std::size_t zeros = r.k() - ones;
        if (ones > zeros) out[i] = 1;
        else if (ones < zeros) out[i] = 0;
        else out[i] = tie_break && (*tie_break)[i][1] > (*tie_break)[i][0] ? 1 : 0;
    }
    return out;
}

struct ConsensusReport {
    std::vector<int> pseudo_labels;
    std::vector<std::array<double, 2>> ensemble_probs;  // rows sum to 1
    std::vector<double> rater_weights;
    double model_weight = 0.0;
    std::vector<double> rater_quality;   // agreement with the majority label
    double model_quality = 0.0;
    double baseline_agreement = 0.0;     // most-common-class predictor vs majority label
    double pairwise_agreement = 1.0;     // mean inter-rater agreement
    bool fallback_majority_vote = false;
};

// Model-weighted ensemble over annotator labels and classifier probabilities.
// Quality scores are agreements with the majority label; weights rescale them
// against the most-common-class baseline; each rater label enters as a soft
// distribution at the mean pairwise inter-rater agreement.
inline ConsensusReport crowdlab_consensus(const RaterMatrix& r,
                                          const std::vector<std::array<double, 2>>& model_probs) {
    r.validate();
    if (model_probs.size() != r.n())
        throw DataError("crowdlab: model probabilities do not match sample count");
    for (const auto& p : model_probs)
        if (std::abs(p[0] + p[1] - 1.0) > 1e-6)
            throw DataError("crowdlab: model probability rows must sum to 1");

    constexpr double eps = 1e-6;
    const std::size_t N = r.n(), K = r.k();
    ConsensusReport rep;

    const std::vector<int> mv = majority_vote(r, &model_probs);

    rep.rater_quality.resize(K, 0.0);
    for (std::size_t j = 0; j < K; ++j) {
        std::size_t agree = 0;
        for (std::size_t i = 0; i < N; ++i) agree += r.labels[i][j] == mv[i];
        rep.rater_quality[j] = static_cast<double>(agree) / static_cast<double>(N);
    }
    {
        std::size_t agree = 0;
        for (std::size_t i = 0; i < N; ++i) {
            const int pred = model_probs[i][1] > model_probs[i][0] ? 1 : 0;
            agree += pred == mv[i];
        }
        rep.model_quality = static_cast<double>(agree) / static_cast<double>(N);
    }
    {
        std::size_t ones = 0;
        for (int y : mv) ones += static_cast<std::size_t>(y);
        rep.baseline_agreement =
            static_cast<double>(std::max(ones, N - ones)) / static_cast<double>(N);
    }

    const double denom = 1.0 - rep.baseline_agreement + eps;
    rep.rater_weights.resize(K);
    for (std::size_t j = 0; j < K; ++j)
        rep.rater_weights[j] = std::max(0.0, 1.0 - (1.0 - rep.rater_quality[j]) / denom);
    const double mean_annotations = static_cast<double>(K);  // every rater labels every sample
    rep.model_weight =
        mean_annotations * std::max(0.0, 1.0 - (1.0 - rep.model_quality) / denom);

    if (K >= 2) {
        double agree_sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t a = 0; a < K; ++a)
                for (std::size_t b = a + 1; b < K; ++b) {
                    agree_sum += r.labels[i][a] == r.labels[i][b] ? 1.0 : 0.0;
                    ++pairs;
                }
        rep.pairwise_agreement = agree_sum / static_cast<double>(pairs);
    } else {
        rep.pairwise_agreement = 1.0;
    }

    double weight_total = rep.model_weight;
    for (double w : rep.rater_weights) weight_total += w;

    rep.pseudo_labels.resize(N);
    rep.ensemble_probs.resize(N);
    if (weight_total <= 0.0) {
        rep.fallback_majority_vote = true;
        for (std::size_t i = 0; i < N; ++i) {
            rep.pseudo_labels[i] = mv[i];
            rep.ensemble_probs[i] = mv[i] == 1 ? std::array<double, 2>{0.0, 1.0}
                                               : std::array<double, 2>{1.0, 0.0};
        }
        return rep;
    }

    for (std::size_t i = 0; i < N; ++i) {
        std::array<double, 2> acc{rep.model_weight * model_probs[i][0],
                                  rep.model_weight * model_probs[i][1]};
        for (std::size_t j = 0; j < K; ++j) {
            const int c = r.labels[i][j];
            acc[static_cast<std::size_t>(c)] += rep.rater_weights[j] * rep.pairwise_agreement;
            acc[static_cast<std::size_t>(1 - c)] += rep.rater_weights[j] * (1.0 - rep.pairwise_agreement);
        }
        rep.ensemble_probs[i] = {acc[0] / weight_total, acc[1] / weight_total};
        rep.pseudo_labels[i] = rep.ensemble_probs[i][1] > rep.ensemble_probs[i][0] ? 1 : 0;
    }
    return rep;
}

struct ConsensusConfig {
    std::size_t folds = 3;
    std::size_t epochs = 12;
    std::size_t batch = 8;
    double base_lr = 1e-3;
    double warmup_epochs = 2;
    double weight_decay = 0.01;
    std::uint64_t seed = 42;

    void validate() const {
        if (folds < 2) throw ConfigError("consensus: folds must be >= 2");
        if (epochs < 1 || batch < 1) throw ConfigError("consensus: epochs and batch must be >= 1");
        if (warmup_epochs >= static_cast<double>(epochs))
            throw ConfigError("consensus: warmup must be shorter than the run");
    }
};

// Builds the per-fold classifier; the default is the image-only dual-encoder
// model, swappable for other backbone families.
template <typename T>
using ConsensusBackbone = std::function<FusionModel<T>(const Rng& fold_rng, const Checkpoint*)>;

template <typename T>
ConsensusBackbone<T> dual_encoder_backbone(const ViTConfig& vit) {
    return [vit](const Rng& rng, const Checkpoint* pretrained) {
        AblationSpec image_only;
        image_only.use_raters = false;
        return FusionModel<T>::build(vit, image_only, 0, rng, pretrained);
    };
}

// Out-of-fold probabilities from the image-only classifier trained on the
// majority-vote labels. Stratified folds; each sample's probability comes
// from the model that never saw it.
template <typename T>
std::vector<std::array<double, 2>> train_consensus_classifier(
    const std::vector<CaseSample<T>>& samples, const std::vector<int>& mv_labels,
    const ViTConfig& vit, const ConsensusConfig& cfg, const Checkpoint* pretrained_encoder,
    int threads = 1, const ConsensusBackbone<T>& backbone = nullptr) {
    cfg.validate();
    if (samples.size() != mv_labels.size())
        throw DataError("consensus: label count does not match sample count");
    if (samples.empty()) throw DataError("consensus: no samples");

    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < mv_labels.size(); ++i)
        by_class[mv_labels[i] == 1 ? 1 : 0].push_back(i);
    if (by_class[0].empty() || by_class[1].empty())
        throw DataError("consensus: single-class training data");
    if (std::min(by_class[0].size(), by_class[1].size()) < 2)
        throw DataError("consensus: a class has too few samples for out-of-fold training");

    const std::size_t folds = std::min(cfg.folds, samples.size());
    std::vector<std::size_t> fold_of(samples.size());
    const Rng base(cfg.seed);
    for (int c = 0; c < 2; ++c) {
        Rng shuffle = base.derive(stream::kFold, static_cast<std::uint64_t>(100 + c));
        auto idx = by_class[c];
        const auto perm = shuffle.permutation(idx.size());
        for (std::size_t p = 0; p < idx.size(); ++p) fold_of[idx[perm[p]]] = p % folds;
    }

    const ConsensusBackbone<T> make_model = backbone ? backbone : dual_encoder_backbone<T>(vit);
    std::vector<std::array<double, 2>> probs(samples.size(), {0.0, 0.0});
    parallel_for(folds, threads, [&](std::size_t f) {
        std::vector<CaseSample<T>> train;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (fold_of[i] == f) {
                held.push_back(i);
            } else {
                CaseSample<T> s = samples[i];
                s.label = mv_labels[i];
                train.push_back(std::move(s));
            }
        }
        if (held.empty()) return;
        FusionModel<T> model = make_model(base.derive(stream::kFold, f), pretrained_encoder);
        FusionTrainConfig tc;
        tc.epochs = cfg.epochs;
        tc.batch = cfg.batch;
        tc.base_lr = cfg.base_lr;
        tc.warmup_epochs = cfg.warmup_epochs;
        tc.weight_decay = cfg.weight_decay;
        tc.patience = 0;  // fixed horizon; no val split inside a fold
        tc.seed = base.derive(stream::kFold, f).seed();
        train_fusion(model, train, {}, tc);
        for (std::size_t i : held) {
            const Tensor<T> p = model.predict_probs(samples[i].t1_tokens, samples[i].t2_tokens,
                                                    samples[i].rater_bits);
            probs[i] = {static_cast<double>(p.at(0, 0)), static_cast<double>(p.at(0, 1))};
        }
    });
    return probs;
}

}  // namespace haicomm
