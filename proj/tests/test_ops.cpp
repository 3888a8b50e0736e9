#include "doctest.h"

#include <cmath>

#include "boxmask/error.hpp"
#include "boxmask/ops.hpp"
#include "boxmask/params.hpp"
#include "oracles.hpp"

using namespace boxmask;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

// Scalar probe sum(out * r) with fixed random r.
Var probe(Graph& g, Var out, std::uint64_t seed) {
    Rng rng(seed, "probe");
    return ops::dot_constant(g, out, random_tensor(out->value.shape(), rng));
}

void require_gradients(const std::vector<oracle::GradCheck>& checks, double tol = 1e-4) {
    for (const auto& c : checks) {
        INFO(c.name << " rel err " << c.rel_error);
        CHECK(c.rel_error <= tol);
    }
}

} // namespace

TEST_SUITE("ops") {

TEST_CASE("conv2d matches a direct loop") {
    Rng rng(1);
    Graph g(false);
    const Tensor x = random_tensor({2, 3, 7, 6}, rng);
    const Tensor w = random_tensor({4, 3, 3, 3}, rng);
    const Tensor b = random_tensor({4}, rng);
    const Tensor out = ops::conv2d(g, g.constant(x), g.constant(w), g.constant(b), 2, 1)->value;
    REQUIRE(out.shape() == std::vector<int>{2, 4, 4, 3});
    for (int n = 0; n < 2; ++n) {
        for (int o = 0; o < 4; ++o) {
            for (int i = 0; i < 4; ++i) {
                for (int j = 0; j < 3; ++j) {
                    double acc = b[o];
                    for (int c = 0; c < 3; ++c) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int y = i * 2 - 1 + ky;
                                const int xx = j * 2 - 1 + kx;
                                if (y >= 0 && y < 7 && xx >= 0 && xx < 6) {
                                    acc += w[((o * 3 + c) * 3 + ky) * 3 + kx] * x[((n * 3 + c) * 7 + y) * 6 + xx];
                                }
                            }
                        }
                    }
                    CHECK(out[((n * 4 + o) * 4 + i) * 3 + j] == doctest::Approx(acc).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("transposed convolution doubles resolution and matches a direct loop") {
    Rng rng(2);
    Graph g(false);
    const Tensor x = random_tensor({1, 2, 3, 3}, rng);
    const Tensor w = random_tensor({2, 3, 2, 2}, rng);
    const Tensor b = random_tensor({3}, rng);
    const Tensor out = ops::conv_transpose2x2(g, g.constant(x), g.constant(w), g.constant(b))->value;
    REQUIRE(out.shape() == std::vector<int>{1, 3, 6, 6});
    for (int o = 0; o < 3; ++o) {
        for (int y = 0; y < 6; ++y) {
            for (int xx = 0; xx < 6; ++xx) {
                double acc = b[o];
                for (int c = 0; c < 2; ++c) {
                    acc += x[(c * 3 + y / 2) * 3 + xx / 2] * w[((c * 3 + o) * 2 + y % 2) * 2 + xx % 2];
                }
                CHECK(out[(o * 6 + y) * 6 + xx] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("layer gradients match finite differences") {
    Rng rng(3);
    ParameterStore s;
    Parameter& x = s.add("x", random_tensor({2, 3, 6, 6}, rng));
    Parameter& w = s.add("w", random_tensor({4, 3, 3, 3}, rng));
    Parameter& b = s.add("b", random_tensor({4}, rng));
    Parameter& dw = s.add("dw", random_tensor({4, 2, 2, 2}, rng));
    Parameter& db = s.add("db", random_tensor({2}, rng));
    Parameter& lw = s.add("lw", random_tensor({5, 18}, rng));
    Parameter& lb = s.add("lb", random_tensor({5}, rng));
    auto loss = [&](Graph& g) {
        Var h = ops::conv2d(g, g.parameter(x), g.parameter(w), g.parameter(b), 2, 1);
        Var d = ops::conv_transpose2x2(g, h, g.parameter(dw), g.parameter(db));
        Var p = ops::adaptive_avg_pool(g, d, 3);
        Var l = ops::linear(g, p, g.parameter(lw), g.parameter(lb));
        return probe(g, l, 1);
    };
    require_gradients(oracle::gradient_check(s.all(), loss, 1e-3, 40));
}

TEST_CASE("relu, add, select and weighted_sum gradients") {
    Rng rng(4);
    ParameterStore s;
    Tensor a0 = random_tensor({3, 4}, rng);
    for (double& v : a0.values()) {
        v += v > 0 ? 0.2 : -0.2;
    }
    Parameter& a = s.add("a", a0);
    Parameter& b = s.add("b", random_tensor({3, 4}, rng));
    auto loss = [&](Graph& g) {
        Var r = ops::add(g, ops::relu(g, g.parameter(a)), g.parameter(b));
        Var s0 = probe(g, ops::select(g, r, 1), 2);
        Var s1 = probe(g, r, 3);
        return ops::weighted_sum(g, {{s0, 0.7}, {s1, -1.3}});
    };
    require_gradients(oracle::gradient_check(s.all(), loss));
}

TEST_CASE("weighted_sum leaves zero-weighted terms without gradient") {
    ParameterStore s;
    Parameter& a = s.add("a", Tensor({1}, 2.0));
    Parameter& b = s.add("b", Tensor({1}, 3.0));
    Graph g;
    Var t = ops::weighted_sum(g, {{g.parameter(a), 1.0}, {g.parameter(b), 0.0}});
    s.zero_grad();
    g.backward(t);
    CHECK(t->value[0] == 2.0);
    CHECK(a.grad[0] == 1.0);
    CHECK(b.grad[0] == 0.0);
}

TEST_CASE("loss gradients match finite differences") {
    Rng rng(5);
    ParameterStore s;
    Parameter& logits = s.add("logits", random_tensor({3, 4, 2, 2}, rng, -2, 2));
    Parameter& pred = s.add("pred", random_tensor({5, 4}, rng, -2, 2));
    Parameter& obj = s.add("obj", random_tensor({6}, rng, -3, 3));
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
        labels.push_back(static_cast<int>(rng.below(4)));
    }
    const std::vector<double> sample_w{1.0, 0.0, 2.0};
    Tensor target = random_tensor({5, 4}, rng, -2, 2);
    const std::vector<double> rows{1, 0, 1, 1, 0};
    const std::vector<double> bce_t{1, 0, 1, 0, 0, 1};
    const std::vector<double> bce_w{1, 1, 0, 1, 1, 1};
    auto loss = [&](Graph& g) {
        Var ce = ops::softmax_cross_entropy(g, g.parameter(logits), labels, sample_w);
        Var sl = ops::smooth_l1(g, g.parameter(pred), target, rows, 1.0 / 9.0, 5.0);
        Var bc = ops::bce_with_logits(g, g.parameter(obj), bce_t, bce_w, 5.0);
        return ops::weighted_sum(g, {{ce, 1.0}, {sl, 1.0}, {bc, 1.0}});
    };
    require_gradients(oracle::gradient_check(s.all(), loss));
}

TEST_CASE("softmax cross-entropy of uniform logits is ln of the class count") {
    Graph g(false);
    const std::vector<int> labels{0, 3, 1};
    Var v = ops::softmax_cross_entropy(g, g.constant(Tensor({3, 4}, 0.7)), labels);
    CHECK(v->value[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("roi_align is exact on a constant field") {
    Graph g(false);
    const Tensor fmap({2, 8, 8}, 3.0);
    const std::vector<Box> rois{{0, 0, 64, 64}, {5.5, 7.25, 30.0, 41.0}, {-4, -4, 20, 20}};
    const Tensor out = ops::roi_align(g, g.constant(fmap), rois, 7, 8)->value;
    REQUIRE(out.shape() == std::vector<int>{3, 2, 7, 7});
    for (double v : out.values()) {
        CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
    }
}

TEST_CASE("roi_align reproduces a bilinear field at bin centers") {
    Graph g(false);
    const int h = 12;
    const int w = 12;
    Tensor fmap({1, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            fmap[y * w + x] = 0.5 + 0.25 * x - 0.125 * y + 0.01 * x * y;
        }
    }
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const double x1 = rng.uniform(8.0, 40.0);
        const double y1 = rng.uniform(8.0, 40.0);
        const Box roi{x1, y1, x1 + rng.uniform(4.0, 40.0), y1 + rng.uniform(4.0, 40.0)};
        const int p = 7;
        const Tensor out = ops::roi_align(g, g.constant(fmap), std::vector<Box>{roi}, p, 8)->value;
        for (int r = 0; r < p; ++r) {
            for (int c = 0; c < p; ++c) {
                const double fx = roi.x1 / 8 - 0.5 + (c + 0.5) * roi.width() / 8 / p;
                const double fy = roi.y1 / 8 - 0.5 + (r + 0.5) * roi.height() / 8 / p;
                if (fx > w - 1 || fy > h - 1) {
                    continue;
                }
                // Mean of the bilinear term over the 2x2 samples.
                const double sx = roi.width() / 8 / p / 4;
                const double sy = roi.height() / 8 / p / 4;
                const double xy = ((fx - sx) * (fy - sy) + (fx + sx) * (fy - sy) + (fx - sx) * (fy + sy) +
                                   (fx + sx) * (fy + sy)) / 4;
                const double expect = 0.5 + 0.25 * fx - 0.125 * fy + 0.01 * xy;
                if ((fx + sx) <= w - 1 && (fy + sy) <= h - 1 && fx - sx >= 0 && fy - sy >= 0) {
                    CHECK(std::abs(out[r * p + c] - expect) <= 1e-5);
                }
            }
        }
    }
}

TEST_CASE("roi_align matches the dense sampling oracle on smooth fields") {
    Rng rng(7);
    const int h = 16;
    const int w = 16;
    for (int trial = 0; trial < 100; ++trial) {
        const std::vector<double> field = oracle::smooth_field(h, w, rng);
        Tensor fmap({1, h, w}, field);
        const double x1 = rng.uniform(0.0, 100.0);
        const double y1 = rng.uniform(0.0, 100.0);
        const Box roi{x1, y1, x1 + rng.uniform(8.0, 28.0), y1 + rng.uniform(8.0, 28.0)};
        Graph g(false);
        const Tensor out = ops::roi_align(g, g.constant(fmap), std::vector<Box>{roi}, 7, 8)->value;
        const std::vector<double> dense = oracle::dense_roi_pool(field, h, w, roi, 7, 8, 10);
        double worst = 0.0;
        for (std::size_t i = 0; i < dense.size(); ++i) {
            worst = std::max(worst, std::abs(out[i] - dense[i]));
        }
        CHECK(worst <= 2e-2);
    }
}

TEST_CASE("roi_align rejects RoIs outside the frame") {
    Graph g(false);
    const Tensor fmap({1, 8, 8}, 1.0);
    CHECK_THROWS_AS(ops::roi_align(g, g.constant(fmap), std::vector<Box>{{70, 70, 90, 90}}, 7, 8), InvalidArgument);
}

TEST_CASE("roi_align and upsampling gradients match finite differences") {
    Rng rng(8);
    ParameterStore s;
    Parameter& f = s.add("fmap", random_tensor({2, 8, 8}, rng));
    const std::vector<Box> rois{{3.3, 4.1, 40.2, 33.7}, {20.5, 10.0, 60.0, 62.0}};
    auto loss = [&](Graph& g) {
        Var r = ops::roi_align(g, g.parameter(f), rois, 7, 8);
        return probe(g, ops::upsample_bilinear(g, r, 14), 9);
    };
    require_gradients(oracle::gradient_check(s.all(), loss, 1e-3, 128));
}

TEST_CASE("upsampling reproduces linear fields exactly") {
    Graph g(false);
    const int p = 7;
    const int q = 14;
    Tensor x({1, 1, p, p});
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < p; ++j) {
            x[i * p + j] = 1.0 + 0.5 * j - 0.25 * i;
        }
    }
    const Tensor out = ops::upsample_bilinear(g, g.constant(x), q)->value;
    for (int i = 0; i < q; ++i) {
        for (int j = 0; j < q; ++j) {
            // Output cell centers in input-cell units.
            const double u = (j + 0.5) * p / q - 0.5;
            const double v = (i + 0.5) * p / q - 0.5;
            CHECK(out[i * q + j] == doctest::Approx(1.0 + 0.5 * u - 0.25 * v).epsilon(1e-12));
        }
    }
}

TEST_CASE("upsampling to the same size is the identity") {
    Rng rng(10);
    Graph g(false);
    const Tensor x = random_tensor({2, 3, 5, 5}, rng);
    const Tensor out = ops::upsample_bilinear(g, g.constant(x), 5)->value;
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }
}

TEST_CASE("temporal attention and gather gradients match finite differences") {
    Rng rng(11);
    ParameterStore s;
    const int c = 4;
    Parameter& target = s.add("target", random_tensor({2, c, 2, 2}, rng));
    Parameter& support = s.add("support", random_tensor({c, 3, 3}, rng));
    Parameter& wq = s.add("wq", random_tensor({c, c}, rng));
    Parameter& bq = s.add("bq", random_tensor({c}, rng));
    Parameter& wk = s.add("wk", random_tensor({c, c}, rng));
    Parameter& bk = s.add("bk", random_tensor({c}, rng));
    Parameter& wv = s.add("wv", random_tensor({c, c}, rng));
    Parameter& bv = s.add("bv", random_tensor({c}, rng));
    Parameter& wo = s.add("wo", random_tensor({c, c}, rng));
    Parameter& bo = s.add("bo", random_tensor({c}, rng));
    std::vector<int> positions;
    for (int i = 0; i < 8; ++i) {
        positions.push_back(static_cast<int>(rng.below(9)));
    }
    auto loss = [&](Graph& g) {
        Var gathered = ops::gather_positions(g, g.parameter(support), positions, 2);
        const ops::AttentionWeights w{g.parameter(wq), g.parameter(bq), g.parameter(wk), g.parameter(bk),
                                      g.parameter(wv), g.parameter(bv), g.parameter(wo), g.parameter(bo)};
        return probe(g, ops::temporal_attention(g, g.parameter(target), {gathered}, w, 2), 12);
    };
    require_gradients(oracle::gradient_check(s.all(), loss));
}

}
