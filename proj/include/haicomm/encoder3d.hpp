#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "haicomm/checkpoint.hpp"
#include "haicomm/manifest.hpp"
#include "haicomm/optim.hpp"
#include "haicomm/rng.hpp"
#include "haicomm/tensor.hpp"
#include "haicomm/volume.hpp"

namespace haicomm {

struct ViTConfig {
    std::array<std::size_t, 3> volume_extents{16, 32, 32};
    std::array<std::size_t, 3> patch{8, 8, 8};
    std::size_t embed_dim = 64;
    std::size_t blocks = 4;  // 12 matches the reference geometry; 4 is the desk default
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    std::size_t decoder_dim = 32;
    std::size_t decoder_blocks = 2;
    std::size_t decoder_heads = 4;
    double mask_ratio = 0.75;

    void validate() const {
        for (std::size_t k = 0; k < 3; ++k) {
            if (patch[k] < 1) throw ConfigError("vit: patch extents must be >= 1");
            if (volume_extents[k] % patch[k] != 0)
                throw ConfigError("vit: volume extent " + std::to_string(volume_extents[k]) +
                                  " not divisible by patch extent " + std::to_string(patch[k]) +
                                  " on axis " + std::to_string(k));
        }
        if (embed_dim % heads != 0)
            throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (decoder_dim % decoder_heads != 0)
            throw ConfigError("vit: decoder_dim not divisible by decoder heads");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw ConfigError("vit: mask_ratio must lie in (0,1)");
        if (blocks < 1 || decoder_blocks < 1) throw ConfigError("vit: need at least one block");
        if (mlp_ratio <= 0) throw ConfigError("vit: mlp_ratio must be positive");
    }

    std::size_t patch_volume() const { return patch[0] * patch[1] * patch[2]; }

    std::array<std::size_t, 3> grid() const {
        return {volume_extents[0] / patch[0], volume_extents[1] / patch[1], volume_extents[2] / patch[2]};
    }

    std::size_t token_count() const {
        const auto g = grid();
        return g[0] * g[1] * g[2];
    }
};

// Row-major patch order, row-major voxels within a patch. Exact inverse pair
// with unpatchify.
template <typename T>
Tensor<T> patchify(const Volume& v, const ViTConfig& cfg) {
    cfg.validate();
    if (v.extents != cfg.volume_extents)
        throw ConfigError("patchify: volume extents do not match configured geometry");
    const auto g = cfg.grid();
    const auto p = cfg.patch;
    const std::size_t P = cfg.patch_volume();
    std::vector<T> out(cfg.token_count() * P);
    std::size_t t = 0;
    for (std::size_t g0 = 0; g0 < g[0]; ++g0)
        for (std::size_t g1 = 0; g1 < g[1]; ++g1)
            for (std::size_t g2 = 0; g2 < g[2]; ++g2, ++t) {
                std::size_t e = 0;
                for (std::size_t p0 = 0; p0 < p[0]; ++p0)
                    for (std::size_t p1 = 0; p1 < p[1]; ++p1)
                        for (std::size_t p2 = 0; p2 < p[2]; ++p2, ++e)
                            out[t * P + e] = static_cast<T>(
                                v.at(g0 * p[0] + p0, g1 * p[1] + p1, g2 * p[2] + p2));
            }
    return Tensor<T>::from({cfg.token_count(), P}, std::move(out));
}

template <typename T>
Volume unpatchify(const std::vector<T>& tokens, const ViTConfig& cfg) {
    const auto g = cfg.grid();
    const auto p = cfg.patch;
    const std::size_t P = cfg.patch_volume();
    if (tokens.size() != cfg.token_count() * P)
        throw ShapeError("unpatchify: token buffer does not match configured geometry");
    Volume v = Volume::make(cfg.volume_extents, {1.0, 1.0, 1.0});
    std::size_t t = 0;
    for (std::size_t g0 = 0; g0 < g[0]; ++g0)
        for (std::size_t g1 = 0; g1 < g[1]; ++g1)
            for (std::size_t g2 = 0; g2 < g[2]; ++g2, ++t) {
                std::size_t e = 0;
                for (std::size_t p0 = 0; p0 < p[0]; ++p0)
                    for (std::size_t p1 = 0; p1 < p[1]; ++p1)
                        for (std::size_t p2 = 0; p2 < p[2]; ++p2, ++e)
                            v.at(g0 * p[0] + p0, g1 * p[1] + p1, g2 * p[2] + p2) =
                                static_cast<float>(tokens[t * P + e]);
            }
    return v;
}

namespace nn {

template <typename T>
struct Linear {
    Tensor<T> w, b;
    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> g, b;
    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, g, b); }
};

template <typename T>
Linear<T> make_linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                      Rng& rng) {
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in + out)));
    Linear<T> l{make_param<T>({in, out}, rng, stddev), make_param_const<T>({out}, T(0))};
    ps.add(name + ".w", l.w);
    ps.add(name + ".b", l.b);
    return l;
}

template <typename T>
LayerNorm<T> make_layer_norm(ParamSet<T>& ps, const std::string& name, std::size_t dim) {
    LayerNorm<T> l{make_param_const<T>({dim}, T(1)), make_param_const<T>({dim}, T(0))};
    ps.add(name + ".g", l.g);
    ps.add(name + ".b", l.b);
    return l;
}

// Pre-norm transformer block.
template <typename T>
struct Block {
    LayerNorm<T> ln1, ln2;
    Linear<T> qkv, proj, fc1, fc2;
    std::size_t heads = 1;

    Tensor<T> forward(const Tensor<T>& x) const {
        const std::size_t dim = x.cols();
        const std::size_t hd = dim / heads;
        const Tensor<T> qkv_out = qkv(ln1(x));
        std::vector<Tensor<T>> head_out;
        head_out.reserve(heads);
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        for (std::size_t h = 0; h < heads; ++h) {
            const Tensor<T> q = slice_cols(qkv_out, h * hd, hd);
            const Tensor<T> k = slice_cols(qkv_out, dim + h * hd, hd);
            const Tensor<T> v = slice_cols(qkv_out, 2 * dim + h * hd, hd);
            const Tensor<T> att = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
            head_out.push_back(matmul(att, v));
        }
        const Tensor<T> x1 = add(x, proj(concat_cols(head_out)));
        const Tensor<T> h = fc2(gelu(fc1(ln2(x1))));
        return add(x1, h);
    }
};

template <typename T>
Block<T> make_block(ParamSet<T>& ps, const std::string& name, std::size_t dim, std::size_t heads,
                    double mlp_ratio, Rng& rng) {
    Block<T> b;
    b.heads = heads;
    b.ln1 = make_layer_norm(ps, name + ".ln1", dim);
    b.qkv = make_linear(ps, name + ".qkv", dim, 3 * dim, rng);
    b.proj = make_linear(ps, name + ".proj", dim, dim, rng);
    b.ln2 = make_layer_norm(ps, name + ".ln2", dim);
    const auto hidden = static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim)));
    b.fc1 = make_linear(ps, name + ".fc1", dim, hidden, rng);
    b.fc2 = make_linear(ps, name + ".fc2", hidden, dim, rng);
    return b;
}

}  // namespace nn

// Patch-token ViT with a learned summary token; positional embeddings cover
// token_count + 1 rows (summary first).
template <typename T>
struct VitEncoder {
    ViTConfig cfg;
    ParamSet<T> params;
    nn::Linear<T> patch_embed;
    Tensor<T> summary_token;
    Tensor<T> pos;
    std::vector<nn::Block<T>> blocks;
    nn::LayerNorm<T> ln_f;

    static VitEncoder build(const ViTConfig& cfg, Rng rng) {
        cfg.validate();
        VitEncoder enc;
        enc.cfg = cfg;
        enc.patch_embed = nn::make_linear(enc.params, "patch_embed", cfg.patch_volume(),
                                          cfg.embed_dim, rng);
        enc.summary_token = make_param<T>({1, cfg.embed_dim}, rng, T(0.02));
        enc.params.add("summary_token", enc.summary_token);
        enc.pos = make_param<T>({cfg.token_count() + 1, cfg.embed_dim}, rng, T(0.02));
        enc.params.add("pos", enc.pos);
        for (std::size_t i = 0; i < cfg.blocks; ++i)
            enc.blocks.push_back(nn::make_block(enc.params, "block" + std::to_string(i),
                                                cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng));
        enc.ln_f = nn::make_layer_norm(enc.params, "ln_f", cfg.embed_dim);
        return enc;
    }

    // tokens: [V x P] rows already restricted to the given original positions.
    // Output: [V+1 x embed_dim], summary row first.
    Tensor<T> forward(const Tensor<T>& tokens, const std::vector<std::size_t>& positions) const {
        if (tokens.rows() != positions.size())
            throw ShapeError("encoder: " + std::to_string(positions.size()) + " positions for " +
                             shape_str(tokens.shape()));
        std::vector<std::size_t> pos_idx(positions.size());
        for (std::size_t i = 0; i < positions.size(); ++i) pos_idx[i] = positions[i] + 1;
        Tensor<T> x_tokens = add(patch_embed(tokens), gather_rows(pos, pos_idx));
        Tensor<T> x_summary = add(summary_token, slice_rows(pos, 0, 1));
        Tensor<T> x = concat_rows<T>({x_summary, x_tokens});
        for (const auto& b : blocks) x = b.forward(x);
        return ln_f(x);
    }

    Tensor<T> forward_all(const Tensor<T>& tokens) const {
        std::vector<std::size_t> all(cfg.token_count());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return forward(tokens, all);
    }

    // Volume-level feature: the summary-token embedding, [1 x embed_dim].
    Tensor<T> summary_feature(const Tensor<T>& tokens) const {
        return slice_rows(forward_all(tokens), 0, 1);
    }
};

struct MaskSet {
    std::vector<std::size_t> masked;   // ascending
    std::vector<std::size_t> visible;  // ascending
};

// Uniformly random ceil(ratio * T)-subset.
inline MaskSet draw_mask(std::size_t token_count, double mask_ratio, Rng& rng) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ConfigError("draw_mask: mask_ratio must lie in (0,1)");
    const auto m = static_cast<std::size_t>(
        std::ceil(mask_ratio * static_cast<double>(token_count)));
    const auto perm = rng.permutation(token_count);
    MaskSet s;
    s.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
    s.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
    std::sort(s.masked.begin(), s.masked.end());
    std::sort(s.visible.begin(), s.visible.end());
    return s;
}

// Asymmetric encoder-decoder: the encoder sees only visible tokens, the
// decoder sees embedded visible tokens plus a shared mask token at masked
// positions, all with decoder positional embeddings, and reconstructs every
// patch.
template <typename T>
struct MaeModel {
    VitEncoder<T> encoder;
    nn::Linear<T> dec_embed;
    Tensor<T> mask_token;
    Tensor<T> dec_pos;
    std::vector<nn::Block<T>> dec_blocks;
    nn::LayerNorm<T> dec_ln;
    nn::Linear<T> dec_pred;
    ParamSet<T> params;

    static MaeModel build(const ViTConfig& cfg, const Rng& base_rng) {
        MaeModel m;
        m.encoder = VitEncoder<T>::build(cfg, base_rng.derive(stream::kInit, 1));
        Rng rng = base_rng.derive(stream::kInit, 2);
        ParamSet<T> dec;
        m.dec_embed = nn::make_linear(dec, "embed", cfg.embed_dim, cfg.decoder_dim, rng);
        m.mask_token = make_param<T>({1, cfg.decoder_dim}, rng, T(0.02));
        dec.add("mask_token", m.mask_token);
        m.dec_pos = make_param<T>({cfg.token_count() + 1, cfg.decoder_dim}, rng, T(0.02));
        dec.add("pos", m.dec_pos);
        for (std::size_t i = 0; i < cfg.decoder_blocks; ++i)
            m.dec_blocks.push_back(nn::make_block(dec, "block" + std::to_string(i), cfg.decoder_dim,
                                                  cfg.decoder_heads, cfg.mlp_ratio, rng));
        m.dec_ln = nn::make_layer_norm(dec, "ln_f", cfg.decoder_dim);
        m.dec_pred = nn::make_linear(dec, "pred", cfg.decoder_dim, cfg.patch_volume(), rng);
        m.params.append(m.encoder.params, "enc.");
        m.params.append(dec, "dec.");
        return m;
    }

    const ViTConfig& cfg() const { return encoder.cfg; }

    // Reconstruction for every token position, [T x P]. The visible list may
    // come in any order; rows are placed back by original position.
    Tensor<T> reconstruct(const Tensor<T>& tokens, const MaskSet& mask) const {
        const std::size_t T_tokens = cfg().token_count();
        const Tensor<T> enc_out = encoder.forward(gather_rows(tokens, mask.visible), mask.visible);
        const Tensor<T> dec_in = dec_embed(enc_out);  // [V+1 x Ed]
        std::vector<std::size_t> vis_dest(mask.visible.size() + 1);
        vis_dest[0] = 0;
        for (std::size_t i = 0; i < mask.visible.size(); ++i) vis_dest[i + 1] = mask.visible[i] + 1;
        Tensor<T> placed = scatter_rows(dec_in, vis_dest, T_tokens + 1);
        if (!mask.masked.empty()) {
            std::vector<std::size_t> mask_dest(mask.masked.size());
            for (std::size_t i = 0; i < mask.masked.size(); ++i) mask_dest[i] = mask.masked[i] + 1;
            placed = add(placed, scatter_rows(repeat_rows(mask_token, mask.masked.size()), mask_dest,
                                              T_tokens + 1));
        }
        Tensor<T> x = add(placed, dec_pos);
        for (const auto& b : dec_blocks) x = b.forward(x);
        return slice_rows(dec_pred(dec_ln(x)), 1, T_tokens);
    }
};

// Mean squared error over masked tokens only.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& recon, const Tensor<T>& target, const std::vector<std::size_t>& masked) {
    if (masked.empty()) throw ConfigError("mae_loss: empty mask set");
    ops::check_same_shape(recon, target, "mae_loss");
    return mse_loss(gather_rows(recon, masked), gather_rows(target, masked));
}

template <typename T>
std::pair<Tensor<T>, MaskSet> mae_forward(const MaeModel<T>& m, const Tensor<T>& tokens, Rng& rng) {
    MaskSet mask = draw_mask(m.cfg().token_count(), m.cfg().mask_ratio, rng);
    Tensor<T> recon = m.reconstruct(tokens, mask);
    return {std::move(recon), std::move(mask)};
}

struct PretrainConfig {
    ViTConfig vit;
    std::size_t epochs = 30;
    std::size_t batch = 8;
    double base_lr = 1e-3;
    double warmup_epochs = 5;
    double weight_decay = 0.01;
    std::uint64_t seed = 42;

    void validate() const {
        vit.validate();
        if (epochs < 1 || batch < 1) throw ConfigError("pretrain: epochs and batch must be >= 1");
        if (base_lr < 0 || weight_decay < 0) throw ConfigError("pretrain: negative rates");
        if (warmup_epochs >= static_cast<double>(epochs))
            throw ConfigError("pretrain: warmup must be shorter than the run");
    }
};

struct PretrainEpochLog {
    std::size_t epoch;
    double masked_mse;
    double lr;
};

struct PretrainResult {
    Checkpoint encoder;  // the enc.* parameter group
    std::vector<PretrainEpochLog> log;
};

// Joint encoder/decoder optimization of masked-reconstruction MSE over the
// pretrain split; T1-like and T2-like volumes flow through the same model.
template <typename T = float>
PretrainResult pretrain_mae(const DatasetManifest& manifest, const PretrainConfig& cfg) {
    cfg.validate();
    const auto idx = manifest.split_indices(Split::pretrain);
    if (idx.empty()) throw DataError("pretrain: manifest has no pretrain split");

    std::vector<Tensor<T>> tokens(idx.size());
    std::vector<std::int64_t> case_ids(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& r = manifest.records[idx[i]];
        const std::string& path = r.t1_path.empty() ? r.t2_path : r.t1_path;
        if (path.empty()) throw DataError("pretrain: record " + std::to_string(r.case_id) + " has no volume");
        tokens[i] = patchify<T>(load_volume(manifest.resolve(path)), cfg.vit);
        case_ids[i] = r.case_id;
    }

    const Rng base(cfg.seed);
    MaeModel<T> model = MaeModel<T>::build(cfg.vit, base);
    AdamW<T> opt({.weight_decay = cfg.weight_decay});

    PretrainResult res;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_annealing_lr(static_cast<double>(epoch), cfg.warmup_epochs,
                                              static_cast<double>(cfg.epochs), cfg.base_lr);
        Rng shuffle_rng = base.derive(stream::kShuffle, epoch);
        const auto order = shuffle_rng.permutation(tokens.size());
        double epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t take = std::min(cfg.batch, order.size() - done);
            model.params.zero_grad();
            for (std::size_t b = 0; b < take; ++b) {
                const std::size_t s = order[done + b];
                Rng mask_rng = base.derive(stream::kMask, epoch)
                                   .derive(static_cast<std::uint64_t>(case_ids[s]));
                auto [recon, mask] = mae_forward(model, tokens[s], mask_rng);
                const Tensor<T> loss = mae_loss(recon, tokens[s], mask.masked);
                if (!std::isfinite(static_cast<double>(loss.item())))
                    throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch));
                epoch_loss += static_cast<double>(loss.item());
                loss.backward();
            }
            model.params.scale_grads(T(1) / static_cast<T>(take));
            opt.step(model.params, static_cast<T>(lr));
            done += take;
        }
        res.log.push_back({epoch, epoch_loss / static_cast<double>(order.size()), lr});
    }

    const Checkpoint all = to_checkpoint(model.params);
    for (const auto& e : all.entries)
        if (e.name.rfind("enc.", 0) == 0) res.encoder.entries.push_back(e);
    return res;
}

}  // namespace haicomm
