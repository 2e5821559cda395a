#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "haicomm/manifest.hpp"
#include "haicomm/rng.hpp"
#include "haicomm/volprep.hpp"

namespace haicomm {

struct AnnotatorProfile {
    double sensitivity = 0.75;
    double specificity = 0.75;
    std::string id;
};

inline std::vector<AnnotatorProfile> default_annotators() {
    return {{0.70, 0.85, "A1"}, {0.80, 0.80, "A2"}, {0.75, 0.60, "A3"}};
}

struct GenConfig {
    std::size_t n_pretrain = 320;
    std::size_t n_train = 32;  // labeled pool; a quarter becomes the val split
    std::size_t n_test = 40;
    double prevalence = 0.5;
    double signal_amplitude = 0.3;
    double noise_sigma = 0.4;
    std::array<std::size_t, 3> volume_extents{20, 40, 40};
    std::vector<AnnotatorProfile> annotators = default_annotators();
    std::uint64_t seed = 42;
    double min_pretrain_ratio = 10.0;

    void validate() const {
        if (n_pretrain < 1 || n_train < 1 || n_test < 1)
            throw ConfigError("gen: counts must be >= 1");
        if (!(prevalence > 0.0 && prevalence < 1.0))
            throw ConfigError("gen: prevalence must lie in (0,1)");
        if (noise_sigma < 0.0) throw ConfigError("gen: noise_sigma must be >= 0");
        if (signal_amplitude < 0.0) throw ConfigError("gen: signal_amplitude must be >= 0");
        if (annotators.empty()) throw ConfigError("gen: need at least one annotator");
        for (const auto& a : annotators)
            if (a.sensitivity < 0 || a.sensitivity > 1 || a.specificity < 0 || a.specificity > 1)
                throw ConfigError("gen: annotator rates must lie in [0,1]");
        for (std::size_t e : volume_extents)
            if (e < 4) throw ConfigError("gen: volume extents must be >= 4");
    }
};

namespace synth {

// Per-case substream ids.
constexpr std::uint64_t kLatent = 0;
constexpr std::uint64_t kGeometry = 1;
constexpr std::uint64_t kNoiseT1 = 2;
constexpr std::uint64_t kNoiseT2 = 3;
constexpr std::uint64_t kRaters = 4;
constexpr std::uint64_t kLayout = 5;

inline Rng case_rng(const GenConfig& cfg, std::int64_t case_id) {
    return Rng(cfg.seed).derive(stream::kCase, static_cast<std::uint64_t>(case_id));
}

inline int draw_latent(const GenConfig& cfg, std::int64_t case_id) {
    Rng r = case_rng(cfg, case_id).derive(kLatent);
    return r.bernoulli(cfg.prevalence) ? 1 : 0;
}

inline std::vector<int> draw_rater_labels(const GenConfig& cfg, std::int64_t case_id, int latent) {
    Rng r = case_rng(cfg, case_id).derive(kRaters);
    std::vector<int> out;
    out.reserve(cfg.annotators.size());
    for (const auto& a : cfg.annotators) {
        const double p_correct = latent == 1 ? a.sensitivity : a.specificity;
        const bool correct = r.bernoulli(p_correct);
        out.push_back(correct ? latent : 1 - latent);
    }
    return out;
}

struct CaseGeometry {
    std::array<double, 3> center_a, center_b;   // normalized coordinates
    std::array<double, 3> radius_a, radius_b;   // normalized half-axes
    double band_radius;
    std::array<double, 3> spacing;
    std::string orientation;
};

inline const std::array<const char*, 8>& orientation_pool() {
    static const std::array<const char*, 8> pool = {"RAS", "LAS", "RPS", "RAI",
                                                    "ARS", "SAR", "PSL", "IRA"};
    return pool;
}

inline CaseGeometry draw_geometry(const GenConfig& cfg, std::int64_t case_id) {
    Rng g = case_rng(cfg, case_id).derive(kGeometry);
    CaseGeometry geo;
    const auto jit = [&](double base, double amp) { return base + g.uniform(-amp, amp); };
    geo.center_a = {jit(0.42, 0.03), jit(0.40, 0.03), jit(0.40, 0.03)};
    geo.center_b = {jit(0.62, 0.03), jit(0.66, 0.03), jit(0.64, 0.03)};
    geo.radius_a = {jit(0.20, 0.03), jit(0.19, 0.03), jit(0.19, 0.03)};
    geo.radius_b = {jit(0.16, 0.02), jit(0.15, 0.02), jit(0.15, 0.02)};
    geo.band_radius = jit(0.09, 0.015);
    geo.spacing = {1.0 * g.uniform(0.9, 1.1), 1.0 * g.uniform(0.9, 1.1), 3.0 * g.uniform(0.9, 1.1)};
    Rng lay = case_rng(cfg, case_id).derive(kLayout);
    geo.orientation = orientation_pool()[lay.below(orientation_pool().size())];
    return geo;
}

inline double smoothstep_in(double signed_dist, double k) {
    return 1.0 / (1.0 + std::exp(-k * signed_dist));
}

inline double ellipsoid_field(const std::array<double, 3>& u, const std::array<double, 3>& c,
                              const std::array<double, 3>& r) {
    double q = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double d = (u[k] - c[k]) / r[k];
        q += d * d;
    }
    return smoothstep_in(1.0 - std::sqrt(q), 10.0);
}

inline double segment_distance(const std::array<double, 3>& u, const std::array<double, 3>& a,
                               const std::array<double, 3>& b) {
    std::array<double, 3> ab{}, au{};
    double ab2 = 0.0, dot = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
        ab[k] = b[k] - a[k];
        au[k] = u[k] - a[k];
        ab2 += ab[k] * ab[k];
        dot += ab[k] * au[k];
    }
    const double t = ab2 > 0 ? std::clamp(dot / ab2, 0.0, 1.0) : 0.0;
    double d2 = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double d = u[k] - (a[k] + t * ab[k]);
        d2 += d * d;
    }
    return std::sqrt(d2);
}

// Renders one modality in canonical RAS axes: two soft ellipsoids with
// modality-specific contrast, the shared adhesion band when latent == 1,
// plus voxel noise.
inline Volume render_canonical(const GenConfig& cfg, std::int64_t case_id, bool t1, int latent) {
    const CaseGeometry geo = draw_geometry(cfg, case_id);
    Rng noise = case_rng(cfg, case_id).derive(t1 ? kNoiseT1 : kNoiseT2);
    Volume v = Volume::make(cfg.volume_extents, geo.spacing, "RAS");
    const double bg = t1 ? 0.10 : 0.15;
    const double lvl_a = t1 ? 0.75 : 0.25;
    const double lvl_b = t1 ? 0.30 : 0.65;
    const auto& e = cfg.volume_extents;
    for (std::size_t i0 = 0; i0 < e[0]; ++i0)
        for (std::size_t i1 = 0; i1 < e[1]; ++i1)
            for (std::size_t i2 = 0; i2 < e[2]; ++i2) {
                const std::array<double, 3> u{(static_cast<double>(i0) + 0.5) / static_cast<double>(e[0]),
                                              (static_cast<double>(i1) + 0.5) / static_cast<double>(e[1]),
                                              (static_cast<double>(i2) + 0.5) / static_cast<double>(e[2])};
                double val = bg;
                val += lvl_a * ellipsoid_field(u, geo.center_a, geo.radius_a);
                val += lvl_b * ellipsoid_field(u, geo.center_b, geo.radius_b);
                if (latent == 1) {
                    const double d = segment_distance(u, geo.center_a, geo.center_b);
                    val += cfg.signal_amplitude *
                           smoothstep_in(1.0 - d / geo.band_radius, 8.0);
                }
                val += cfg.noise_sigma * noise.normal();
                v.at(i0, i1, i2) = static_cast<float>(val);
            }
    for (std::size_t k = 0; k < 3; ++k) {
        const double mid = 0.5 * (geo.center_a[k] + geo.center_b[k]);
        const auto c = static_cast<std::int64_t>(
            std::llround(mid * static_cast<double>(e[k]) - 0.5));
        v.center[k] = std::clamp<std::int64_t>(c, 0, static_cast<std::int64_t>(e[k]) - 1);
    }
    return v;
}

// Stores a canonical RAS render under the given orientation code so that
// reorient_ras() recovers the canonical volume bit-exactly.
inline Volume apply_orientation(const Volume& canonical, const std::string& code) {
    if (code == "RAS") return canonical;
    Volume out;
    out.orientation = code;
    std::array<int, 3> fam{};
    std::array<bool, 3> pos{};
    for (std::size_t j = 0; j < 3; ++j) {
        fam[j] = orient::family(code[j]);
        pos[j] = orient::positive(code[j]);
        out.extents[j] = canonical.extents[static_cast<std::size_t>(fam[j])];
        out.spacing[j] = canonical.spacing[static_cast<std::size_t>(fam[j])];
        const std::int64_t c = canonical.center[static_cast<std::size_t>(fam[j])];
        out.center[j] = pos[j] ? c : static_cast<std::int64_t>(out.extents[j]) - 1 - c;
    }
    out.data.assign(out.extents[0] * out.extents[1] * out.extents[2], 0.0f);
    std::array<std::size_t, 3> o{};
    for (std::size_t i0 = 0; i0 < out.extents[0]; ++i0)
        for (std::size_t i1 = 0; i1 < out.extents[1]; ++i1)
            for (std::size_t i2 = 0; i2 < out.extents[2]; ++i2) {
                const std::array<std::size_t, 3> i{i0, i1, i2};
                for (std::size_t j = 0; j < 3; ++j) {
                    const auto k = static_cast<std::size_t>(fam[j]);
                    o[k] = pos[j] ? i[j] : out.extents[j] - 1 - i[j];
                }
                out.at(i0, i1, i2) = canonical.at(o[0], o[1], o[2]);
            }
    return out;
}

inline Volume render_case(const GenConfig& cfg, std::int64_t case_id, bool t1, int latent) {
    const Volume canonical = render_canonical(cfg, case_id, t1, latent);
    return apply_orientation(canonical, draw_geometry(cfg, case_id).orientation);
}

}  // namespace synth

// Labeled cohort: paired T1/T2 volumes, K rater labels per case, and surgical
// ground truth on the test split only. Case ids: [0, n_train) labeled pool
// (last quarter becomes val), [n_train, n_train + n_test) test.
inline DatasetManifest gen_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir,
                                   int threads = 1) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "vols", ec);
    if (ec) throw IoError("cannot create output directory: " + (out_dir / "vols").string());

    const std::size_t n_val = cfg.n_train / 4;
    const std::size_t n_total = cfg.n_train + cfg.n_test;
    DatasetManifest m;
    m.set_base_dir(out_dir);
    m.records.resize(n_total);

    parallel_for(n_total, threads, [&](std::size_t i) {
        const auto case_id = static_cast<std::int64_t>(i);
        const int latent = synth::draw_latent(cfg, case_id);
        ManifestRecord r;
        r.case_id = case_id;
        r.split = i < cfg.n_train - n_val ? Split::train
                  : i < cfg.n_train       ? Split::val
                                          : Split::test;
        r.t1_path = "vols/case_" + std::to_string(case_id) + "_t1.vol";
        r.t2_path = "vols/case_" + std::to_string(case_id) + "_t2.vol";
        const Volume t1 = synth::render_case(cfg, case_id, true, latent);
        const Volume t2 = synth::render_case(cfg, case_id, false, latent);
        save_volume(t1, out_dir / r.t1_path);
        save_volume(t2, out_dir / r.t2_path);
        r.center_voxel = t1.center;
        r.rater_labels = synth::draw_rater_labels(cfg, case_id, latent);
        m.records[i] = std::move(r);
    });
    for (std::size_t i = 0; i < n_total; ++i) {
        if (m.records[i].split == Split::test)
            m.set_surgical(i, synth::draw_latent(cfg, m.records[i].case_id));
        else
            m.set_surgical(i, std::nullopt);
    }
    return m;
}

// Unlabeled pretraining corpus: single-modality renders, alternating T1-like
// and T2-like. Case ids continue after the labeled cohort.
inline DatasetManifest gen_pretrain(const GenConfig& cfg, const std::filesystem::path& out_dir,
                                    int threads = 1) {
    cfg.validate();
    if (static_cast<double>(cfg.n_pretrain) <
        cfg.min_pretrain_ratio * static_cast<double>(cfg.n_train))
        throw ConfigError("gen: n_pretrain (" + std::to_string(cfg.n_pretrain) +
                          ") must be at least " + std::to_string(cfg.min_pretrain_ratio) +
                          " x n_train (" + std::to_string(cfg.n_train) + ")");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "vols", ec);
    if (ec) throw IoError("cannot create output directory: " + (out_dir / "vols").string());

    const std::int64_t id0 = static_cast<std::int64_t>(cfg.n_train + cfg.n_test);
    DatasetManifest m;
    m.set_base_dir(out_dir);
    m.records.resize(cfg.n_pretrain);
    parallel_for(cfg.n_pretrain, threads, [&](std::size_t i) {
        const std::int64_t case_id = id0 + static_cast<std::int64_t>(i);
        const int latent = synth::draw_latent(cfg, case_id);
        const bool t1 = (i % 2) == 0;
        ManifestRecord r;
        r.case_id = case_id;
        r.split = Split::pretrain;
        const std::string path =
            "vols/case_" + std::to_string(case_id) + (t1 ? "_t1.vol" : "_t2.vol");
        (t1 ? r.t1_path : r.t2_path) = path;
        const Volume vol = synth::render_case(cfg, case_id, t1, latent);
        save_volume(vol, out_dir / path);
        r.center_voxel = vol.center;
        m.records[i] = std::move(r);
    });
    for (std::size_t i = 0; i < cfg.n_pretrain; ++i) m.set_surgical(i, std::nullopt);
    return m;
}

}  // namespace haicomm
