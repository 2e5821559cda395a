#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "haicomm/rng.hpp"
#include "haicomm/tensor.hpp"
#include "oracles.hpp"

using namespace haicomm;

namespace {

Tensor<double> rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(v), grad);
}

// One gradient-check trial; returns the worst relative error.
using Trial = std::function<double(Rng&)>;

void check_gradients(const char* op, const Trial& trial, int trials = 100, double tol = 1e-5) {
    Rng rng(0xfeedULL, fnv1a64(op));
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) worst = std::max(worst, trial(rng));
    INFO(op << ": worst rel err " << worst);
    CHECK(worst <= tol);
}

}  // namespace

TEST_CASE("matmul forward identities") {
    const auto I = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    const auto A = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
    const auto IA = matmul(I, A);
    CHECK(IA.data() == std::vector<float>{1, 2, 3, 4});

    const auto P = Tensor<float>::from({2, 2}, {1, 0, 0, 0});
    const auto B = Tensor<float>::from({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(P, B).data() == std::vector<float>{5, 6, 0, 0});
}

TEST_CASE("matmul shape errors name both shapes") {
    const auto A = Tensor<float>::zeros({2, 3});
    const auto B = Tensor<float>::zeros({4, 5});
    try {
        matmul(A, B);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs finite differences") {
    // d/dA sum(A*B) equals row sums of B, checked numerically
    check_gradients(
        "matmul_sum",
        [](Rng& rng) {
            ParamSet<double> ps;
            auto a = ps.add("a", rnd({3, 4}, rng));
            auto b = ps.add("b", rnd({4, 2}, rng));
            return oracles::max_rel_grad_err(ps, [&] { return sum(matmul(a, b)); });
        },
        100, 1e-6);
}

TEST_CASE("softmax values and stability") {
    const auto s = softmax(Tensor<double>::from({2}, {0.0, 0.0}));
    CHECK(s.data()[0] == Catch::Approx(0.5).margin(1e-12));

    const auto big = softmax(Tensor<double>::from({2}, {1000.0, 0.0}));
    CHECK(all_finite(big));
    CHECK(big.data()[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(big.data()[1] == Catch::Approx(0.0).margin(1e-12));

    const auto ln = softmax(Tensor<double>::from({2}, {std::log(1.0), std::log(3.0)}));
    CHECK(ln.data()[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(ln.data()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax rows sum to one and are permutation equivariant") {
    Rng rng(7);
    for (int t = 0; t < 50; ++t) {
        auto x = rnd({4, 6}, rng, -30.0, 30.0, false);
        const auto y = softmax(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 6; ++c) s += y.at(r, c);
            CHECK(s == Catch::Approx(1.0).margin(1e-9));
        }
        const auto perm = rng.permutation(6);
        std::vector<double> px(x.numel());
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 6; ++c) px[r * 6 + c] = x.at(r, perm[c]);
        const auto py = softmax(Tensor<double>::from({4, 6}, std::move(px)));
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 6; ++c)
                CHECK(py.at(r, c) == Catch::Approx(y.at(r, perm[c])).margin(1e-12));
    }
}

TEST_CASE("bce_loss analytic values") {
    const auto half = bce_loss(Tensor<double>::from({1}, {0.5}), {1});
    CHECK(half.item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    const double eps = 1e-7;
    const auto tiny = bce_loss(Tensor<double>::from({1}, {1.0 - eps}), {1});
    CHECK(tiny.item() == Catch::Approx(eps).margin(1e-9));

    const auto two = bce_loss(Tensor<double>::from({2}, {0.9, 0.2}), {1, 0});
    CHECK(two.item() == Catch::Approx((-std::log(0.9) - std::log(0.8)) / 2.0).epsilon(1e-12));

    CHECK_THROWS_AS(bce_loss(Tensor<double>::from({2}, {0.5, 0.5}), {1}), ShapeError);
}

TEST_CASE("concat then split recovers both inputs exactly") {
    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        const auto a = rnd({3, 4}, rng, -5, 5, false);
        const auto b = rnd({3, 2}, rng, -5, 5, false);
        const auto cat = concat_cols<double>({a, b});
        CHECK(slice_cols(cat, 0, 4).data() == a.data());
        CHECK(slice_cols(cat, 4, 2).data() == b.data());

        const auto r = concat_rows<double>({a, rnd({2, 4}, rng, -5, 5, false)});
        CHECK(slice_rows(r, 0, 3).data() == a.data());
    }
}

TEST_CASE("gather scatter repeat round trips") {
    const auto x = Tensor<double>::from({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    const std::vector<std::size_t> idx{2, 0};
    const auto g = gather_rows(x, idx);
    CHECK(g.data() == std::vector<double>{4, 5, 0, 1});
    const auto sc = scatter_rows(g, idx, 4);
    CHECK(sc.data() == std::vector<double>{0, 1, 0, 0, 4, 5, 0, 0});
    const auto rep = repeat_rows(Tensor<double>::from({1, 2}, {9, 8}), 3);
    CHECK(rep.data() == std::vector<double>{9, 8, 9, 8, 9, 8});
    CHECK_THROWS_AS(gather_rows(x, {4}), ShapeError);
}

TEST_CASE("transpose and reshape") {
    const auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(transpose(x).data() == std::vector<double>{1, 4, 2, 5, 3, 6});
    CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
}

TEST_CASE("forward ops stay finite on finite inputs") {
    Rng rng(13);
    for (int t = 0; t < 50; ++t) {
        const auto a = rnd({3, 5}, rng, -50, 50, false);
        const auto b = rnd({3, 5}, rng, -50, 50, false);
        const auto g = rnd({5}, rng, 0.5, 2.0, false);
        const auto beta = rnd({5}, rng, -1, 1, false);
        CHECK(all_finite(add(a, b)));
        CHECK(all_finite(mul(a, b)));
        CHECK(all_finite(gelu(a)));
        CHECK(all_finite(softmax(a)));
        CHECK(all_finite(layer_norm(a, g, beta)));
        CHECK(all_finite(mse_loss(a, b)));
    }
}

TEST_CASE("primitive gradients match finite differences") {
    check_gradients("add_mul_scale", [](Rng& rng) {
        ParamSet<double> ps;
        auto a = ps.add("a", rnd({3, 4}, rng));
        auto b = ps.add("b", rnd({3, 4}, rng));
        const auto c = rnd({3, 4}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(
            ps, [&] { return sum(mul(scale(add(a, b), 0.7), c)); });
    });

    check_gradients("softmax", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({2, 5}, rng, -2, 2));
        const auto c = rnd({2, 5}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(ps, [&] { return sum(mul(softmax(x), c)); });
    });

    check_gradients("gelu", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({4, 3}, rng, -3, 3));
        const auto c = rnd({4, 3}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(ps, [&] { return sum(mul(gelu(x), c)); });
    });

    check_gradients("layer_norm", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({3, 6}, rng, -2, 2));
        auto g = ps.add("g", rnd({6}, rng, 0.5, 1.5));
        auto b = ps.add("b", rnd({6}, rng, -0.5, 0.5));
        const auto c = rnd({3, 6}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(ps, [&] { return sum(mul(layer_norm(x, g, b), c)); });
    });

    check_gradients("linear_rowvec", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({3, 4}, rng));
        auto w = ps.add("w", rnd({4, 2}, rng));
        auto b = ps.add("b", rnd({2}, rng));
        const auto c = rnd({3, 2}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(ps, [&] { return sum(mul(linear(x, w, b), c)); });
    });

    check_gradients("transpose_reshape", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({3, 4}, rng));
        const auto c = rnd({2, 6}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(
            ps, [&] { return sum(mul(reshape(transpose(x), {2, 6}), c)); });
    });

    check_gradients("concat_slice", [](Rng& rng) {
        ParamSet<double> ps;
        auto a = ps.add("a", rnd({3, 2}, rng));
        auto b = ps.add("b", rnd({3, 3}, rng));
        const auto c = rnd({3, 4}, rng, -1, 1, false);
        return oracles::max_rel_grad_err(ps, [&] {
            return sum(mul(slice_cols(concat_cols<double>({a, b}), 1, 4), c));
        });
    });

    check_gradients("gather_scatter_repeat", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({4, 3}, rng));
        auto m = ps.add("m", rnd({1, 3}, rng));
        const auto c = rnd({5, 3}, rng, -1, 1, false);
        const std::vector<std::size_t> gi{3, 1, 1};
        const std::vector<std::size_t> si{0, 2, 4};
        return oracles::max_rel_grad_err(ps, [&] {
            const auto picked = gather_rows(x, gi);
            const auto placed = add(scatter_rows(picked, si, 5),
                                    scatter_rows(repeat_rows(m, 2), {1, 3}, 5));
            return sum(mul(placed, c));
        });
    });

    check_gradients("mse", [](Rng& rng) {
        ParamSet<double> ps;
        auto a = ps.add("a", rnd({3, 4}, rng));
        auto b = ps.add("b", rnd({3, 4}, rng));
        return oracles::max_rel_grad_err(ps, [&] { return mse_loss(a, b); });
    });

    check_gradients("bce", [](Rng& rng) {
        ParamSet<double> ps;
        auto p = ps.add("p", rnd({4}, rng, 0.05, 0.95));
        const std::vector<int> y{1, 0, 1, 0};
        return oracles::max_rel_grad_err(ps, [&] { return bce_loss(p, y); });
    });

    check_gradients("mean_sum", [](Rng& rng) {
        ParamSet<double> ps;
        auto x = ps.add("x", rnd({4, 4}, rng));
        return oracles::max_rel_grad_err(ps, [&] { return mean(mul(x, x)); });
    });
}

TEST_CASE("backward accumulates through shared nodes") {
    ParamSet<double> ps;
    auto x = ps.add("x", Tensor<double>::from({1}, {3.0}, true));
    const auto y = mul(x, x);  // x^2, dy/dx = 2x = 6
    y.backward();
    CHECK(x.grad()[0] == Catch::Approx(6.0));
}

TEST_CASE("leaves without requires_grad stay grad-free") {
    const auto a = Tensor<double>::from({2}, {1.0, 2.0}, true);
    const auto b = Tensor<double>::from({2}, {3.0, 4.0}, false);
    const auto loss = sum(mul(a, b));
    loss.backward();
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());
}

TEST_CASE("tensors carry their producing operation") {
    const auto a = Tensor<double>::from({2}, {1.0, 2.0}, true);
    CHECK(std::string(a.op_name()) == "leaf");
    const auto b = softmax(a);
    CHECK(std::string(b.op_name()) == "softmax");
    CHECK(b.graph_id() != a.graph_id());
    const auto c = b;  // handles share the node
    CHECK(c.graph_id() == b.graph_id());
}

TEST_CASE("identical rng seeds give identical streams") {
    Rng a(123, 45), b(123, 45);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(123, 46);
    bool differs = false;
    Rng a2(123, 45);
    for (int i = 0; i < 10; ++i) differs = differs || a2.next_u64() != c.next_u64();
    CHECK(differs);
}

TEST_CASE("rng permutation covers all indices") {
    Rng rng(5);
    const auto p = rng.permutation(64);
    std::vector<bool> seen(64, false);
    for (auto i : p) seen[i] = true;
    for (bool s : seen) CHECK(s);
}
