#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "haicomm/metrics.hpp"
#include "haicomm/rng.hpp"
#include "oracles.hpp"

using namespace haicomm;

namespace {

void random_scored_set(Rng& rng, std::size_t n, std::vector<double>& scores,
                       std::vector<int>& labels, bool with_ties) {
    scores.resize(n);
    labels.resize(n);
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(rng.below(2));
        double s = rng.uniform();
        if (with_ties && rng.bernoulli(0.4)) s = std::floor(s * 5.0) / 5.0;  // force tie groups
        scores[i] = s;
        (labels[i] == 1 ? has1 : has0) = true;
    }
    if (!has0) labels[0] = 0;
    if (!has1) labels[n - 1] = 1;
}

}  // namespace

TEST_CASE("auroc hand values") {
    CHECK(auroc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
    CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
    CHECK(auroc({0.1, 0.2, 0.3, 0.4}, {0, 1, 0, 1}) == Catch::Approx(0.75).margin(1e-15));
    CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), DataError);
    CHECK_THROWS_AS(auroc({0.1}, {1, 0}), DataError);
}

TEST_CASE("auroc equals brute-force pair counting on random sets") {
    Rng rng(31);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + rng.below(49);
        std::vector<double> scores;
        std::vector<int> labels;
        random_scored_set(rng, n, scores, labels, true);
        const double got = auroc(scores, labels);
        const double want = oracles::auroc_bruteforce(scores, labels);
        CHECK(std::fabs(got - want) <= 1e-12);
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(32);
    std::vector<double> scores;
    std::vector<int> labels;
    random_scored_set(rng, 60, scores, labels, true);
    const double base = auroc(scores, labels);
    std::vector<double> expd(scores.size()), affine(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        expd[i] = std::exp(scores[i]);
        affine[i] = 3.0 * scores[i] + 11.0;
    }
    CHECK(auroc(expd, labels) == base);
    CHECK(auroc(affine, labels) == base);
}

TEST_CASE("auroc of negated scores complements to one without ties") {
    Rng rng(33);
    std::vector<double> scores;
    std::vector<int> labels;
    random_scored_set(rng, 50, scores, labels, false);
    std::vector<double> neg(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) neg[i] = -scores[i];
    CHECK(auroc(scores, labels) + auroc(neg, labels) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("accuracy basics") {
    CHECK(accuracy({1, 0, 1}, {1, 0, 1}) == 1.0);
    CHECK(accuracy({0, 1, 0}, {1, 0, 1}) == 0.0);
    CHECK(accuracy({1, 1, 0, 0}, {1, 1, 1, 0}) == 0.75);
    CHECK_THROWS_AS(accuracy({1}, {1, 0}), DataError);
    CHECK(threshold_preds({0.2, 0.7, 0.5}) == std::vector<int>{0, 1, 0});
}

TEST_CASE("roc curve: perfect separation passes through (0,1)") {
    const auto pts = roc_curve({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    bool hits = false;
    for (const auto& p : pts) hits = hits || (p[0] == 0.0 && p[1] == 1.0);
    CHECK(hits);
    CHECK(pts.front() == std::array<double, 2>{0.0, 0.0});
    CHECK(pts.back() == std::array<double, 2>{1.0, 1.0});
}

TEST_CASE("roc curve: hand-enumerated five point sweep") {
    const auto pts = roc_curve({0.1, 0.2, 0.3, 0.4}, {0, 1, 0, 1});
    const std::vector<std::array<double, 2>> want{
        {0.0, 0.0}, {0.0, 0.5}, {0.5, 0.5}, {0.5, 1.0}, {1.0, 1.0}};
    CHECK(pts == want);
}

TEST_CASE("roc curve rejects single-class labels") {
    CHECK_THROWS_AS(roc_curve({0.1, 0.9}, {1, 1}), DataError);
}

TEST_CASE("roc curve area equals auroc and coordinates are monotone") {
    Rng rng(34);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + rng.below(40);
        std::vector<double> scores;
        std::vector<int> labels;
        random_scored_set(rng, n, scores, labels, true);
        const auto pts = roc_curve(scores, labels);
        CHECK(pts.front() == std::array<double, 2>{0.0, 0.0});
        CHECK(pts.back() == std::array<double, 2>{1.0, 1.0});
        for (std::size_t i = 1; i < pts.size(); ++i) {
            CHECK(pts[i][0] >= pts[i - 1][0]);
            CHECK(pts[i][1] >= pts[i - 1][1]);
        }
        CHECK(std::fabs(trapezoid_area(pts) - auroc(scores, labels)) <= 1e-9);
    }
}

TEST_CASE("bootstrap: constant statistic has zero deviation") {
    const std::vector<double> scores{0.9, 0.8, 0.9, 0.1, 0.2, 0.15};
    const std::vector<int> labels{1, 1, 1, 0, 0, 0};
    CHECK(bootstrap_std(scores, labels, metric_accuracy(), 200, 5) == 0.0);
}

TEST_CASE("bootstrap: fixed seed reproduces the deviation bitwise") {
    Rng rng(35);
    std::vector<double> scores;
    std::vector<int> labels;
    random_scored_set(rng, 30, scores, labels, false);
    const double a = bootstrap_std(scores, labels, metric_auroc(), 500, 99, 1);
    const double b = bootstrap_std(scores, labels, metric_auroc(), 500, 99, 2);
    std::uint64_t ab, bb;
    std::memcpy(&ab, &a, 8);
    std::memcpy(&bb, &b, 8);
    CHECK(ab == bb);
    const double c = bootstrap_std(scores, labels, metric_auroc(), 500, 100, 1);
    CHECK(a != c);
}

TEST_CASE("bootstrap accuracy deviation tracks the binomial closed form") {
    Rng rng(36);
    const std::size_t n = 30;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(rng.below(2));
        const bool correct = rng.bernoulli(0.8);
        scores[i] = correct == (labels[i] == 1) ? rng.uniform(0.6, 0.95) : rng.uniform(0.05, 0.4);
    }
    const double point = accuracy(threshold_preds(scores), labels);
    const double closed_form = std::sqrt(point * (1.0 - point) / static_cast<double>(n));
    const double got = bootstrap_std(scores, labels, metric_accuracy(), 1000, 7);
    CHECK(got >= 0.5 * closed_form);
    CHECK(got <= 2.0 * closed_form);
}

TEST_CASE("bootstrap reports degenerate data after retry exhaustion") {
    const std::vector<double> scores{0.4, 0.6, 0.7};
    const std::vector<int> labels{1, 1, 1};
    CHECK_THROWS_AS(bootstrap_std(scores, labels, metric_auroc(), 10, 1), DataError);
    CHECK_THROWS_AS(bootstrap_std(scores, labels, metric_auroc(), 1, 1), ConfigError);
}

TEST_CASE("evaluate_scores assembles a full report") {
    Rng rng(37);
    std::vector<double> scores;
    std::vector<int> labels;
    random_scored_set(rng, 40, scores, labels, false);
    const MetricsReport rep = evaluate_scores(scores, labels, 300, 11, 2);
    CHECK(rep.accuracy >= 0.0);
    CHECK(rep.accuracy <= 1.0);
    CHECK(rep.auroc == auroc(scores, labels));
    CHECK(rep.accuracy_std >= 0.0);
    CHECK(rep.auroc_std >= 0.0);
    CHECK(rep.n_bootstrap == 300);
    CHECK(rep.seed == 11);
    CHECK(rep.roc_points.front() == std::array<double, 2>{0.0, 0.0});
    CHECK(rep.roc_points.back() == std::array<double, 2>{1.0, 1.0});
}
