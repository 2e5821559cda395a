#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "haicomm/common.hpp"
#include "haicomm/rng.hpp"

namespace haicomm {

namespace detail_metrics {

inline void check_binary(const std::vector<int>& labels, const char* op) {
    bool has0 = false, has1 = false;
    for (int y : labels) {
        if (y == 1) has1 = true;
        else if (y == 0) has0 = true;
        else throw DataError(std::string(op) + ": labels must be 0/1");
    }
    if (!has0 || !has1)
        throw DataError(std::string(op) + ": undefined metric, both classes must be present");
}

}  // namespace detail_metrics

// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
// correctly, ties counting one half. Computed through average ranks.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DataError("auroc: length mismatch");
    if (scores.empty()) throw DataError("auroc: empty input");
    detail_metrics::check_binary(labels, "auroc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) {
                pos_rank_sum += avg_rank;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = n - n_pos;
    const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw DataError("accuracy: length mismatch");
    if (preds.empty()) throw DataError("accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

inline std::vector<int> threshold_preds(const std::vector<double>& scores, double threshold = 0.5) {
    std::vector<int> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > threshold ? 1 : 0;
    return out;
}

// One point per distinct threshold in descending score order, starting at
// (0,0). Trapezoidal area over the points equals auroc().
inline std::vector<std::array<double, 2>> roc_curve(const std::vector<double>& scores,
                                                    const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DataError("roc_curve: length mismatch");
    if (scores.empty()) throw DataError("roc_curve: empty input");
    detail_metrics::check_binary(labels, "roc_curve");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t n_pos = 0;
    for (int y : labels) n_pos += static_cast<std::size_t>(y);
    const std::size_t n_neg = n - n_pos;
    std::vector<std::array<double, 2>> pts;
    pts.push_back({0.0, 0.0});
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) ++tp;
            else ++fp;
        }
        pts.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                       static_cast<double>(tp) / static_cast<double>(n_pos)});
        i = j;
    }
    if (pts.back()[0] != 1.0 || pts.back()[1] != 1.0) pts.push_back({1.0, 1.0});
    return pts;
}

inline double trapezoid_area(const std::vector<std::array<double, 2>>& pts) {
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        area += (pts[i][0] - pts[i - 1][0]) * 0.5 * (pts[i][1] + pts[i - 1][1]);
    return area;
}

using MetricFn = std::function<double(const std::vector<double>&, const std::vector<int>&)>;

inline MetricFn metric_accuracy(double threshold = 0.5) {
    return [threshold](const std::vector<double>& s, const std::vector<int>& y) {
        return accuracy(threshold_preds(s, threshold), y);
    };
}

inline MetricFn metric_auroc() {
    return [](const std::vector<double>& s, const std::vector<int>& y) { return auroc(s, y); };
}

// Sample standard deviation of the metric over B resamples with replacement.
// Resamples collapsing to one class are redrawn (at most 100 retries each);
// per-resample streams keyed by (seed, index) keep the result worker-count
// independent.
inline double bootstrap_std(const std::vector<double>& scores, const std::vector<int>& labels,
                            const MetricFn& metric, std::size_t n_resamples, std::uint64_t seed,
                            int threads = 1) {
    if (n_resamples < 2) throw ConfigError("bootstrap: need at least 2 resamples");
    if (scores.size() != labels.size() || scores.empty())
        throw DataError("bootstrap: bad input lengths");
    const std::size_t n = scores.size();
    const Rng base(seed);
    std::vector<double> stats(n_resamples);
    parallel_for(n_resamples, threads, [&](std::size_t b) {
        Rng rng = base.derive(stream::kBootstrap, b);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 100)
                throw DataError("bootstrap: resample " + std::to_string(b) +
                                " stayed single-class after 100 retries");
            bool has0 = false, has1 = false;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t pick = static_cast<std::size_t>(rng.below(n));
                s[i] = scores[pick];
                y[i] = labels[pick];
                (y[i] == 1 ? has1 : has0) = true;
            }
            if (has0 && has1) break;
        }
        stats[b] = metric(s, y);
    });
    double mean = 0.0;
    for (double v : stats) mean += v;
    mean /= static_cast<double>(n_resamples);
    double ss = 0.0;
    for (double v : stats) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(n_resamples - 1));
}

struct MetricsReport {
    double accuracy = 0.0;
    double accuracy_std = 0.0;
    double auroc = 0.0;
    double auroc_std = 0.0;
    std::vector<std::array<double, 2>> roc_points;
    std::size_t n_bootstrap = 0;
    std::uint64_t seed = 0;
};

inline MetricsReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                                     std::size_t n_bootstrap, std::uint64_t seed, int threads = 1,
                                     double threshold = 0.5) {
    MetricsReport rep;
    rep.accuracy = accuracy(threshold_preds(scores, threshold), labels);
    rep.auroc = auroc(scores, labels);
    rep.accuracy_std = bootstrap_std(scores, labels, metric_accuracy(threshold), n_bootstrap,
                                     seed, threads);
    rep.auroc_std = bootstrap_std(scores, labels, metric_auroc(), n_bootstrap, seed, threads);
    rep.roc_points = roc_curve(scores, labels);
    rep.n_bootstrap = n_bootstrap;
    rep.seed = seed;
    return rep;
}

}  // namespace haicomm
