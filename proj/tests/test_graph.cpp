#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>

#include "test_util.hpp"

using namespace cmc;
using cmc::testutil::fd_max_rel_error;
using cmc::testutil::rel_err;

namespace {

// literal six-loop cross-correlation with zero padding, the conv oracle
Tensor conv_oracle(const Tensor& x, const Tensor& w, int stride) {
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    Tensor out({N, Cout, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = oy * stride + ky - ph;
                                const int64_t ix = ox * stride + kx - pw;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x.at4(n, ci, iy, ix) * w.at4(co, ci, ky, kx);
                            }
                    out.at4(n, co, oy, ox) = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv2d 1x1 identity kernel") {
    Rng rng(7);
    Tensor x = Tensor::randn({1, 1, 5, 4}, rng);
    Tensor w({1, 1, 1, 1}, {1.0});
    Graph g;
    NodeId out = op_conv2d(g, g.constant(x), g.constant(w), -1, 1);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.value(out)[i] == x[i]);
}

TEST_CASE("conv2d zero input gives zero output") {
    Rng rng(8);
    Tensor x = Tensor::zeros({2, 3, 8, 8});
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
    Graph g;
    NodeId out = op_conv2d(g, g.constant(x), g.constant(w), -1, 2);
    for (double v : g.value(out).data) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(9);
    for (int stride : {1, 2, 4}) {
        Tensor x = Tensor::randn({1, 1, 8, 8}, rng);
        Tensor w = Tensor::randn({2, 1, 3, 3}, rng);
        Graph g;
        NodeId out = op_conv2d(g, g.constant(x), g.constant(w), -1, stride);
        Tensor want = conv_oracle(x, w, stride);
        REQUIRE(g.value(out).shape == want.shape);
        for (int64_t i = 0; i < want.numel(); ++i)
            CHECK(rel_err(g.value(out)[i], want[i]) < 1e-12);
    }
    // larger case with channels and even extents not divisible by stride
    Tensor x = Tensor::randn({2, 3, 9, 7}, rng);
    Tensor w = Tensor::randn({4, 3, 5, 3}, rng);
    Graph g;
    NodeId out = op_conv2d(g, g.constant(x), g.constant(w), -1, 2);
    Tensor want = conv_oracle(x, w, 2);
    REQUIRE(g.value(out).shape == want.shape);
    for (int64_t i = 0; i < want.numel(); ++i) CHECK(rel_err(g.value(out)[i], want[i]) < 1e-12);

    // kernel wider than the input (latent-resolution decode layers hit this)
    for (int stride : {1, 2}) {
        Tensor xs = Tensor::randn({1, 2, 4, 2}, rng);
        Tensor ws = Tensor::randn({3, 2, 5, 5}, rng);
        Graph gs;
        NodeId o = op_conv2d(gs, gs.constant(xs), gs.constant(ws), -1, stride);
        Tensor ww = conv_oracle(xs, ws, stride);
        REQUIRE(gs.value(o).shape == ww.shape);
        for (int64_t i = 0; i < ww.numel(); ++i) CHECK(rel_err(gs.value(o)[i], ww[i]) < 1e-12);
    }
}

TEST_CASE("conv2d rejects even kernels and bad strides") {
    Graph g;
    NodeId x = g.constant(Tensor::zeros({1, 1, 4, 4}));
    CHECK_THROWS(op_conv2d(g, x, g.constant(Tensor::zeros({1, 1, 2, 2})), -1, 1));
    CHECK_THROWS(op_conv2d(g, x, g.constant(Tensor::zeros({1, 1, 3, 3})), -1, 3));
    CHECK_THROWS(op_conv2d(g, x, g.constant(Tensor::zeros({1, 2, 3, 3})), -1, 1));
}

TEST_CASE("upsample nearest examples") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Graph g;
    NodeId out = op_upsample_nearest(g, g.constant(x), 2);
    const Tensor want({1, 1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    REQUIRE(g.value(out).shape == want.shape);
    for (int64_t i = 0; i < want.numel(); ++i) CHECK(g.value(out)[i] == want[i]);

    CHECK_THROWS(op_upsample_nearest(g, g.constant(x), 1));
    CHECK_THROWS(op_upsample_nearest(g, g.constant(x), 3));
}

TEST_CASE("upsample gradient of sum is factor squared") {
    for (int f : {2, 4}) {
        Rng rng(11);
        Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
        Graph g;
        NodeId xl = g.leaf(x, true);
        NodeId loss = op_sum(g, op_upsample_nearest(g, xl, f));
        g.backward(loss);
        for (double v : g.grad(xl).data) CHECK(v == double(f) * double(f));
    }
}

TEST_CASE("prelu slope extremes") {
    Rng rng(12);
    Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
    {
        Graph g;
        NodeId out = op_prelu(g, g.constant(x), g.constant(Tensor::zeros({2})));
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(g.value(out)[i] == (x[i] >= 0.0 ? x[i] : 0.0));
    }
    {
        Graph g;
        NodeId out = op_prelu(g, g.constant(x), g.constant(Tensor::full({2}, 1.0)));
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.value(out)[i] == x[i]);
    }
}

TEST_CASE("batch norm normalizes per channel in train mode") {
    Rng rng(13);
    // variance large enough that the epsilon floor is invisible at 1e-6
    Tensor x = Tensor::randn({4, 3, 5, 5}, rng, 40.0);
    Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
    Graph g;
    NodeId out = op_batch_norm(g, g.constant(x), g.constant(Tensor::full({3}, 1.0)),
                               g.constant(Tensor::zeros({3})), rm, rv, true);
    const Tensor& y = g.value(out);
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        int64_t m = 0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 25; ++i) {
                mean += y.data[size_t((n * 3 + c) * 25 + i)];
                ++m;
            }
        mean /= double(m);
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 25; ++i) {
                const double d = y.data[size_t((n * 3 + c) * 25 + i)] - mean;
                var += d * d;
            }
        var /= double(m);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batch norm constant channel maps to beta") {
    Tensor x = Tensor::full({2, 1, 3, 3}, 7.5);
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Graph g;
    NodeId out = op_batch_norm(g, g.constant(x), g.constant(Tensor::full({1}, 1.0)),
                               g.constant(Tensor::full({1}, 0.25)), rm, rv, true);
    for (double v : g.value(out).data) CHECK(std::abs(v - 0.25) < 1e-9);
}

TEST_CASE("batch norm rejects batch of one in train mode") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    Graph g;
    CHECK_THROWS(op_batch_norm(g, g.constant(x), g.constant(Tensor::full({2}, 1.0)),
                               g.constant(Tensor::zeros({2})), rm, rv, true));
}

TEST_CASE("backward basics: sum and squared norm") {
    Rng rng(14);
    Tensor x = Tensor::randn({2, 1, 3, 3}, rng);
    {
        Graph g;
        NodeId xl = g.leaf(x, true);
        g.backward(op_sum(g, xl));
        for (double v : g.grad(xl).data) CHECK(v == 1.0);
    }
    {
        Graph g;
        NodeId xl = g.leaf(x, true);
        g.backward(op_sum_squares(g, xl));
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.grad(xl)[i] == 2.0 * x[i]);
    }
    {
        Graph g;
        NodeId xl = g.leaf(x, true);
        NodeId y = op_scale(g, xl, 3.0);
        CHECK_THROWS(g.backward(y)); // non-scalar loss
    }
}

TEST_CASE("finite differences: conv2d (both kinds), bias included") {
    Rng rng(15);
    for (bool transposed : {false, true}) {
        for (int stride : {1, 2}) {
            ParamStore store;
            store.add("x", Tensor::randn({2, 2, 4, 4}, rng, 0.7));
            store.add("w", transposed ? Tensor::randn({2, 3, 3, 3}, rng, 0.4)
                                      : Tensor::randn({3, 2, 3, 3}, rng, 0.4));
            store.add("b", Tensor::randn({3}, rng, 0.2));
            auto build = [&](Graph& g, const Leafs& l) {
                NodeId y = transposed
                               ? op_conv2d_transposed(g, l[0], l[1], l[2], stride)
                               : op_conv2d(g, l[0], l[1], l[2], stride);
                return op_sum_squares(g, y);
            };
            Rng pick(100 + stride);
            CHECK(fd_max_rel_error(store, build, 6, 1e-5, pick) < 1e-7);
        }
    }
}

TEST_CASE("finite differences: upsample, prelu, batch norm (train and eval)") {
    Rng rng(16);
    {
        ParamStore store;
        store.add("x", Tensor::randn({1, 2, 3, 3}, rng));
        auto build = [&](Graph& g, const Leafs& l) {
            return op_sum_squares(g, op_upsample_nearest(g, l[0], 2));
        };
        Rng pick(1);
        CHECK(fd_max_rel_error(store, build, 6, 1e-5, pick) < 1e-7);
    }
    {
        ParamStore store;
        store.add("x", Tensor::randn({2, 3, 4, 4}, rng));
        store.add("a", Tensor::full({3}, 0.25));
        auto build = [&](Graph& g, const Leafs& l) {
            return op_sum_squares(g, op_prelu(g, l[0], l[1]));
        };
        Rng pick(2);
        CHECK(fd_max_rel_error(store, build, 8, 1e-6, pick) < 1e-6);
    }
    for (bool train : {true, false}) {
        ParamStore store;
        store.add("x", Tensor::randn({2, 3, 4, 4}, rng));
        store.add("gamma", Tensor::full({3}, 1.1));
        store.add("beta", Tensor::full({3}, -0.2));
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.3);
        auto build = [&, train](Graph& g, const Leafs& l) {
            Tensor rm_local = rm, rv_local = rv; // keep stats fixed across evals
            NodeId y = op_batch_norm(g, l[0], l[1], l[2], rm_local, rv_local, train);
            return op_sum_squares(g, y);
        };
        Rng pick(3);
        CHECK(fd_max_rel_error(store, build, 8, 1e-5, pick) < 1e-5);
    }
}

TEST_CASE("conv stride then upsample restores spatial shape") {
    Rng rng(17);
    for (int s : {2, 4}) {
        Tensor x = Tensor::randn({1, 1, 8 * s, 4 * s}, rng);
        Tensor w = Tensor::randn({1, 1, 3, 3}, rng);
        Graph g;
        NodeId y = op_conv2d(g, g.constant(x), g.constant(w), -1, s);
        NodeId z = op_upsample_nearest(g, y, s);
        CHECK(g.value(z).shape == x.shape);
    }
}

TEST_CASE("forward pass is bitwise deterministic") {
    auto run = [] {
        Rng rng(21);
        Tensor x = Tensor::randn({2, 2, 8, 8}, rng);
        Tensor w = Tensor::randn({3, 2, 5, 5}, rng);
        Graph g;
        NodeId y = op_conv2d(g, g.constant(x), g.constant(w), -1, 2);
        NodeId z = op_prelu(g, y, g.constant(Tensor::full({3}, 0.1)));
        return g.value(op_sum(g, z))[0];
    };
    const double a = run(), b = run();
    CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}
