#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "haicomm/volume.hpp"

namespace haicomm {

namespace orient {

// Letter family: 0 = R/L, 1 = A/P, 2 = S/I. Positive directions are R, A, S.
inline int family(char c) {
    switch (c) {
        case 'R':
        case 'L': return 0;
        case 'A':
        case 'P': return 1;
        case 'S':
        case 'I': return 2;
        default: return -1;
    }
}

inline bool positive(char c) { return c == 'R' || c == 'A' || c == 'S'; }

inline void validate(const std::string& code) {
    if (code.size() != 3) throw FormatError("orientation code must have 3 letters: '" + code + "'");
    bool seen[3] = {false, false, false};
    for (char c : code) {
        const int f = family(c);
        if (f < 0) throw FormatError("orientation code has unknown letter: '" + code + "'");
        if (seen[f]) throw FormatError("orientation code repeats an axis family: '" + code + "'");
        seen[f] = true;
    }
}

}  // namespace orient

// Permute and flip axes so the result is in RAS order; spacing and the
// reference center voxel move with their axes.
inline Volume reorient_ras(const Volume& v) {
    orient::validate(v.orientation);
    if (v.orientation == "RAS") return v;
    // source axis and flip for each target axis
    std::array<std::size_t, 3> src{};
    std::array<bool, 3> flip{};
    for (std::size_t j = 0; j < 3; ++j) {
        const int fam = orient::family(v.orientation[j]);
        src[static_cast<std::size_t>(fam)] = j;
        flip[static_cast<std::size_t>(fam)] = !orient::positive(v.orientation[j]);
    }
    Volume out = Volume::make({v.extents[src[0]], v.extents[src[1]], v.extents[src[2]]},
                              {v.spacing[src[0]], v.spacing[src[1]], v.spacing[src[2]]}, "RAS");
    for (std::size_t k = 0; k < 3; ++k) {
        const std::int64_t c = v.center[src[k]];
        out.center[k] = flip[k] ? static_cast<std::int64_t>(v.extents[src[k]]) - 1 - c : c;
    }
    std::array<std::size_t, 3> in_idx{};
    for (std::size_t o0 = 0; o0 < out.extents[0]; ++o0)
        for (std::size_t o1 = 0; o1 < out.extents[1]; ++o1)
            for (std::size_t o2 = 0; o2 < out.extents[2]; ++o2) {
                const std::array<std::size_t, 3> o{o0, o1, o2};
                for (std::size_t k = 0; k < 3; ++k)
                    in_idx[src[k]] = flip[k] ? v.extents[src[k]] - 1 - o[k] : o[k];
                out.at(o0, o1, o2) = v.at(in_idx[0], in_idx[1], in_idx[2]);
            }
    return out;
}

// Trilinear resample onto the target spacing. Sample positions sit at voxel
// centers; borders clamp to the edge voxel.
inline Volume resample(const Volume& v, std::array<double, 3> target_spacing) {
    for (double s : target_spacing)
        if (s <= 0) throw ConfigError("resample: target spacing must be positive");
    std::array<std::size_t, 3> out_e{};
    for (std::size_t k = 0; k < 3; ++k) {
        const double n = std::round(static_cast<double>(v.extents[k]) * v.spacing[k] / target_spacing[k]);
        out_e[k] = static_cast<std::size_t>(std::max(1.0, n));
    }
    Volume out = Volume::make(out_e, target_spacing, v.orientation);
    const auto clampi = [](std::int64_t i, std::int64_t hi) { return std::clamp<std::int64_t>(i, 0, hi); };
    std::array<double, 3> scale{};
    for (std::size_t k = 0; k < 3; ++k) scale[k] = target_spacing[k] / v.spacing[k];
    for (std::size_t o0 = 0; o0 < out_e[0]; ++o0) {
        const double x0 = (static_cast<double>(o0) + 0.5) * scale[0] - 0.5;
        const std::int64_t b0 = static_cast<std::int64_t>(std::floor(x0));
        const double f0 = x0 - static_cast<double>(b0);
        const std::size_t lo0 = static_cast<std::size_t>(clampi(b0, static_cast<std::int64_t>(v.extents[0]) - 1));
        const std::size_t hi0 = static_cast<std::size_t>(clampi(b0 + 1, static_cast<std::int64_t>(v.extents[0]) - 1));
        for (std::size_t o1 = 0; o1 < out_e[1]; ++o1) {
            const double x1 = (static_cast<double>(o1) + 0.5) * scale[1] - 0.5;
            const std::int64_t b1 = static_cast<std::int64_t>(std::floor(x1));
            const double f1 = x1 - static_cast<double>(b1);
            const std::size_t lo1 = static_cast<std::size_t>(clampi(b1, static_cast<std::int64_t>(v.extents[1]) - 1));
            const std::size_t hi1 = static_cast<std::size_t>(clampi(b1 + 1, static_cast<std::int64_t>(v.extents[1]) - 1));
            for (std::size_t o2 = 0; o2 < out_e[2]; ++o2) {
                const double x2 = (static_cast<double>(o2) + 0.5) * scale[2] - 0.5;
                const std::int64_t b2 = static_cast<std::int64_t>(std::floor(x2));
                const double f2 = x2 - static_cast<double>(b2);
                const std::size_t lo2 = static_cast<std::size_t>(clampi(b2, static_cast<std::int64_t>(v.extents[2]) - 1));
                const std::size_t hi2 = static_cast<std::size_t>(clampi(b2 + 1, static_cast<std::int64_t>(v.extents[2]) - 1));
                const double c000 = v.at(lo0, lo1, lo2), c001 = v.at(lo0, lo1, hi2);
                const double c010 = v.at(lo0, hi1, lo2), c011 = v.at(lo0, hi1, hi2);
                const double c100 = v.at(hi0, lo1, lo2), c101 = v.at(hi0, lo1, hi2);
                const double c110 = v.at(hi0, hi1, lo2), c111 = v.at(hi0, hi1, hi2);
                const double c00 = c000 * (1 - f2) + c001 * f2;
                const double c01 = c010 * (1 - f2) + c011 * f2;
                const double c10 = c100 * (1 - f2) + c101 * f2;
                const double c11 = c110 * (1 - f2) + c111 * f2;
                const double c0 = c00 * (1 - f1) + c01 * f1;
                const double c1 = c10 * (1 - f1) + c11 * f1;
                out.at(o0, o1, o2) = static_cast<float>(c0 * (1 - f0) + c1 * f0);
            }
        }
    }
    for (std::size_t k = 0; k < 3; ++k) {
        const double c = (static_cast<double>(v.center[k]) + 0.5) / scale[k] - 0.5;
        out.center[k] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(c)), 0,
                                                 static_cast<std::int64_t>(out_e[k]) - 1);
    }
    return out;
}

// Min-max rescale into [0,1]; a constant volume maps to all zeros.
inline Volume normalize01(const Volume& v) {
    Volume out = v;
    if (v.data.empty()) return out;
    float lo = v.data[0], hi = v.data[0];
    for (float x : v.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (hi > lo) {
        const double range = static_cast<double>(hi) - static_cast<double>(lo);
        for (auto& x : out.data) x = static_cast<float>((static_cast<double>(x) - lo) / range);
    } else {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
    }
    return out;
}

// Contrast-limited adaptive histogram equalization over a 3-d tile grid.
// Each tile gets a clipped-histogram CDF mapping; voxels blend the 8 nearest
// tile mappings trilinearly. clip_limit is a multiple of the uniform bin
// height; excess mass is redistributed uniformly in one pass.
inline Volume clahe3d(const Volume& v, std::array<std::size_t, 3> tiles, double clip_limit,
                      std::size_t bins) {
    for (std::size_t t : tiles)
        if (t < 1) throw ConfigError("clahe3d: tiles must be >= 1 per axis");
    if (clip_limit < 1.0) throw ConfigError("clahe3d: clip_limit must be >= 1.0");
    if (bins < 2) throw ConfigError("clahe3d: bins must be >= 2");
    for (float x : v.data)
        if (!(x >= 0.0f && x <= 1.0f))
            throw DataError("clahe3d: intensity " + std::to_string(x) + " outside [0,1]");

    const std::size_t n_tiles = tiles[0] * tiles[1] * tiles[2];
    std::array<double, 3> ts{};
    for (std::size_t k = 0; k < 3; ++k) ts[k] = static_cast<double>(v.extents[k]) / static_cast<double>(tiles[k]);
    const auto tile_of = [&](std::size_t i, std::size_t k) {
        return std::min(tiles[k] - 1, static_cast<std::size_t>(static_cast<double>(i) / ts[k]));
    };
    const auto bin_of = [&](float x) {
        return std::min(bins - 1, static_cast<std::size_t>(static_cast<double>(x) * static_cast<double>(bins)));
    };

    std::vector<double> hist(n_tiles * bins, 0.0);
    std::vector<double> counts(n_tiles, 0.0);
    for (std::size_t i0 = 0; i0 < v.extents[0]; ++i0)
        for (std::size_t i1 = 0; i1 < v.extents[1]; ++i1)
            for (std::size_t i2 = 0; i2 < v.extents[2]; ++i2) {
                const std::size_t t = (tile_of(i0, 0) * tiles[1] + tile_of(i1, 1)) * tiles[2] + tile_of(i2, 2);
                hist[t * bins + bin_of(v.at(i0, i1, i2))] += 1.0;
                counts[t] += 1.0;
            }

    // clip, redistribute, integrate
    std::vector<double> cdf(n_tiles * bins, 0.0);
    for (std::size_t t = 0; t < n_tiles; ++t) {
        double* h = hist.data() + t * bins;
        const double total = counts[t];
        if (total <= 0) {
            for (std::size_t b = 0; b < bins; ++b) cdf[t * bins + b] = 1.0;
            continue;
        }
        const double clip = clip_limit * total / static_cast<double>(bins);
        double excess = 0.0;
        for (std::size_t b = 0; b < bins; ++b)
            if (h[b] > clip) {
                excess += h[b] - clip;
                h[b] = clip;
            }
        const double add = excess / static_cast<double>(bins);
        double run = 0.0;
        for (std::size_t b = 0; b < bins; ++b) {
            run += h[b] + add;
            cdf[t * bins + b] = run / total;
        }
    }

    Volume out = v;
    const auto mapped = [&](std::size_t t, std::size_t b) { return cdf[t * bins + b]; };
    for (std::size_t i0 = 0; i0 < v.extents[0]; ++i0) {
        const double g0 = (static_cast<double>(i0) + 0.5) / ts[0] - 0.5;
        const std::int64_t t0 = static_cast<std::int64_t>(std::floor(g0));
        const double w0 = g0 - static_cast<double>(t0);
        const std::size_t a0 = static_cast<std::size_t>(std::clamp<std::int64_t>(t0, 0, static_cast<std::int64_t>(tiles[0]) - 1));
        const std::size_t b0 = static_cast<std::size_t>(std::clamp<std::int64_t>(t0 + 1, 0, static_cast<std::int64_t>(tiles[0]) - 1));
        for (std::size_t i1 = 0; i1 < v.extents[1]; ++i1) {
            const double g1 = (static_cast<double>(i1) + 0.5) / ts[1] - 0.5;
            const std::int64_t t1 = static_cast<std::int64_t>(std::floor(g1));
            const double w1 = g1 - static_cast<double>(t1);
            const std::size_t a1 = static_cast<std::size_t>(std::clamp<std::int64_t>(t1, 0, static_cast<std::int64_t>(tiles[1]) - 1));
            const std::size_t b1 = static_cast<std::size_t>(std::clamp<std::int64_t>(t1 + 1, 0, static_cast<std::int64_t>(tiles[1]) - 1));
            for (std::size_t i2 = 0; i2 < v.extents[2]; ++i2) {
                const double g2 = (static_cast<double>(i2) + 0.5) / ts[2] - 0.5;
                const std::int64_t t2 = static_cast<std::int64_t>(std::floor(g2));
                const double w2 = g2 - static_cast<double>(t2);
                const std::size_t a2 = static_cast<std::size_t>(std::clamp<std::int64_t>(t2, 0, static_cast<std::int64_t>(tiles[2]) - 1));
                const std::size_t b2 = static_cast<std::size_t>(std::clamp<std::int64_t>(t2 + 1, 0, static_cast<std::int64_t>(tiles[2]) - 1));
                const std::size_t bin = bin_of(v.at(i0, i1, i2));
                const auto tix = [&](std::size_t x, std::size_t y, std::size_t z) {
                    return (x * tiles[1] + y) * tiles[2] + z;
                };
                const double m00 = mapped(tix(a0, a1, a2), bin) * (1 - w2) + mapped(tix(a0, a1, b2), bin) * w2;
                const double m01 = mapped(tix(a0, b1, a2), bin) * (1 - w2) + mapped(tix(a0, b1, b2), bin) * w2;
                const double m10 = mapped(tix(b0, a1, a2), bin) * (1 - w2) + mapped(tix(b0, a1, b2), bin) * w2;
                const double m11 = mapped(tix(b0, b1, a2), bin) * (1 - w2) + mapped(tix(b0, b1, b2), bin) * w2;
                const double m0 = m00 * (1 - w1) + m01 * w1;
                const double m1 = m10 * (1 - w1) + m11 * w1;
                out.at(i0, i1, i2) = static_cast<float>(m0 * (1 - w0) + m1 * w0);
            }
        }
    }
    return out;
}

// Exact target extents; the source window is centered on the reference voxel
// and anything outside the source fills with zero.
inline Volume crop_or_pad(const Volume& v, std::array<std::size_t, 3> target,
                          std::array<std::int64_t, 3> center) {
    for (std::size_t k = 0; k < 3; ++k)
        if (center[k] < 0 || center[k] >= static_cast<std::int64_t>(v.extents[k]))
            throw ConfigError("crop_or_pad: center voxel " + std::to_string(center[k]) +
                              " outside axis " + std::to_string(k) + " extent " +
                              std::to_string(v.extents[k]));
    Volume out = Volume::make(target, v.spacing, v.orientation);
    std::array<std::int64_t, 3> start{};
    for (std::size_t k = 0; k < 3; ++k)
        start[k] = center[k] - static_cast<std::int64_t>(target[k]) / 2;
    for (std::size_t o0 = 0; o0 < target[0]; ++o0) {
        const std::int64_t s0 = start[0] + static_cast<std::int64_t>(o0);
        if (s0 < 0 || s0 >= static_cast<std::int64_t>(v.extents[0])) continue;
        for (std::size_t o1 = 0; o1 < target[1]; ++o1) {
            const std::int64_t s1 = start[1] + static_cast<std::int64_t>(o1);
            if (s1 < 0 || s1 >= static_cast<std::int64_t>(v.extents[1])) continue;
            for (std::size_t o2 = 0; o2 < target[2]; ++o2) {
                const std::int64_t s2 = start[2] + static_cast<std::int64_t>(o2);
                if (s2 < 0 || s2 >= static_cast<std::int64_t>(v.extents[2])) continue;
                out.at(o0, o1, o2) = v.at(static_cast<std::size_t>(s0), static_cast<std::size_t>(s1),
                                          static_cast<std::size_t>(s2));
            }
        }
    }
    for (std::size_t k = 0; k < 3; ++k) out.center[k] = static_cast<std::int64_t>(target[k]) / 2;
    return out;
}

struct PrepConfig {
    std::array<double, 3> target_spacing{1.0, 1.0, 3.0};
    std::array<std::size_t, 3> clahe_tiles{2, 4, 4};
    double clahe_clip = 2.0;
    std::size_t clahe_bins = 256;
    std::array<std::size_t, 3> crop_target{16, 32, 32};
};

// Full standardization chain: reorient -> resample -> normalize -> CLAHE ->
// center crop/pad. The crop centers on the volume's reference voxel, which
// the earlier steps keep in sync with the data.
inline Volume prep_volume(const Volume& v, const PrepConfig& cfg) {
    Volume out = reorient_ras(v);
    out = resample(out, cfg.target_spacing);
    out = normalize01(out);
    out = clahe3d(out, cfg.clahe_tiles, cfg.clahe_clip, cfg.clahe_bins);
    out = crop_or_pad(out, cfg.crop_target, out.center);
    return out;
}

}  // namespace haicomm
