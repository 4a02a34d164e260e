#include <doctest.h>

#include <cmath>

#include "t2i/ops.hpp"
#include "t2i/rng.hpp"

using namespace t2i;

namespace {

// sum(y * w) for a fixed random w; gives every op under test a non-degenerate
// scalar head for gradient checking.
Scalar weighted_sum(Tape& tape, const Tensor& y, const Tensor& w) {
    return sum(&tape, mul(&tape, y, w));
}

Tensor rand_t(std::vector<int> shape, Rng& rng, float stddev = 1.0f) {
    return Tensor::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("softmax_rows matches hand values") {
    Tensor a({1, 2}, {0.0f, 0.0f});
    Tensor ya = softmax_rows(nullptr, a);
    CHECK(ya[0] == doctest::Approx(0.5));
    CHECK(ya[1] == doctest::Approx(0.5));

    Tensor b({1, 2}, {1000.0f, 1000.0f});
    Tensor yb = softmax_rows(nullptr, b);
    CHECK(yb.all_finite());
    CHECK(yb[0] == doctest::Approx(0.5));
    CHECK(yb[1] == doctest::Approx(0.5));

    Tensor c({1, 3}, {1.0f, 2.0f, 3.0f});
    Tensor yc = softmax_rows(nullptr, c);
    CHECK(yc[0] == doctest::Approx(0.0900).epsilon(0.02));
    CHECK(std::abs(yc[0] - 0.0900f) < 1e-3f);
    CHECK(std::abs(yc[1] - 0.2447f) < 1e-3f);
    CHECK(std::abs(yc[2] - 0.6652f) < 1e-3f);
}

TEST_CASE("softmax_rows rejects non-rank-2 input") {
    Tensor x({2, 2, 2});
    CHECK_THROWS_AS(softmax_rows(nullptr, x), std::invalid_argument);
}

TEST_CASE("softmax_rows row sums and monotonicity over random matrices") {
    Rng rng(11);
    for (int it = 0; it < 120; ++it) {
        const int n = 1 + static_cast<int>(rng.below(5));
        const int m = 2 + static_cast<int>(rng.below(6));
        Tensor x = rand_t({n, m}, rng, 3.0f);
        Tensor y = softmax_rows(nullptr, x);
        for (int i = 0; i < n; ++i) {
            float s = 0.0f;
            for (int j = 0; j < m; ++j) s += y[static_cast<int64_t>(i) * m + j];
            CHECK(std::abs(s - 1.0f) < 1e-5f);
        }
        // bump one logit; its probability must not decrease
        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
        const int j = static_cast<int>(rng.below(static_cast<uint64_t>(m)));
        Tensor x2 = x.clone();
        x2[static_cast<int64_t>(i) * m + j] += 0.5f;
        Tensor y2 = softmax_rows(nullptr, x2);
        CHECK(y2[static_cast<int64_t>(i) * m + j] >= y[static_cast<int64_t>(i) * m + j]);
    }
}

TEST_CASE("rmsnorm matches hand values") {
    Tensor g1 = Tensor::full({4}, 1.0f);
    Tensor x1({4}, {1.0f, 1.0f, 1.0f, 1.0f});
    Tensor y1 = rmsnorm(nullptr, x1, g1, 0.0f);
    for (int i = 0; i < 4; ++i) CHECK(y1[i] == doctest::Approx(1.0f));

    Tensor g2 = Tensor::full({2}, 1.0f);
    Tensor x2({2}, {0.0f, 0.0f});
    Tensor y2 = rmsnorm(nullptr, x2, g2, 1e-6f);
    CHECK(y2[0] == 0.0f);
    CHECK(y2[1] == 0.0f);

    Tensor x3({2}, {3.0f, 4.0f});
    Tensor y3 = rmsnorm(nullptr, x3, g2, 0.0f);
    CHECK(std::abs(y3[0] - 0.8485f) < 1e-4f);
    CHECK(std::abs(y3[1] - 1.1314f) < 1e-4f);

    Tensor bad_gain({3});
    CHECK_THROWS_AS(rmsnorm(nullptr, x3, bad_gain, 1e-6f), std::invalid_argument);
}

TEST_CASE("gradcheck on quadratic and linear functions") {
    ScalarFn quad = [](Tape& tape, Tensor& x) {
        Scalar s = sum(&tape, mul(&tape, x, x));
        return s;
    };
    Tensor x({1}, {3.0f});
    {
        Tensor xg = x.clone();
        xg.set_requires_grad(true);
        Tape tape;
        Scalar y = quad(tape, xg);
        backward(tape, y);
        CHECK(xg.grad()[0] == doctest::Approx(6.0f));
    }
    CHECK(gradcheck(quad, x) < 1e-3f);

    ScalarFn lin = [](Tape& tape, Tensor& x) { return sum(&tape, x); };
    Rng rng(3);
    Tensor xr = rand_t({5}, rng);
    CHECK(gradcheck(lin, xr) < 1e-4f);
}

TEST_CASE("gradcheck rejects non-scalar results") {
    TensorFn bad = [](Tape& tape, Tensor& x) { return add(&tape, x, x); };
    Tensor x({3});
    CHECK_THROWS_AS(gradcheck_tensor_fn(bad, x), std::invalid_argument);
}

TEST_CASE("elementwise and broadcast ops pass gradcheck") {
    Rng rng(17);
    Tensor w = rand_t({3, 4}, rng);

    SUBCASE("add") {
        Tensor b = rand_t({3, 4}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) { return weighted_sum(t, add(&t, x, b, 0.7f), w); };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("scale and add_const") {
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, add_const(&t, scale(&t, x, -1.3f), 0.4f), w);
        };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("mul") {
        Tensor b = rand_t({3, 4}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) { return weighted_sum(t, mul(&t, x, b), w); };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("silu") {
        ScalarFn f = [&](Tape& t, Tensor& x) { return weighted_sum(t, silu(&t, x), w); };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("clamp interior") {
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, clamp(&t, x, -10.0f, 10.0f), w);
        };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("add_bias wrt both") {
        Tensor bias = rand_t({4}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) { return weighted_sum(t, add_bias(&t, x, bias), w); };
        CHECK(gradcheck(fx, rand_t({3, 4}, rng)) < 1e-2f);
        Tensor xf = rand_t({3, 4}, rng);
        ScalarFn fb = [&](Tape& t, Tensor& b) { return weighted_sum(t, add_bias(&t, xf, b), w); };
        CHECK(gradcheck(fb, rand_t({4}, rng)) < 1e-2f);
    }
    SUBCASE("rowwise_affine wrt all three") {
        Tensor s = rand_t({4}, rng), b = rand_t({4}, rng), xf = rand_t({3, 4}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, rowwise_affine(&t, x, s, b), w);
        };
        CHECK(gradcheck(fx, rand_t({3, 4}, rng)) < 1e-2f);
        ScalarFn fs = [&](Tape& t, Tensor& sv) {
            return weighted_sum(t, rowwise_affine(&t, xf, sv, b), w);
        };
        CHECK(gradcheck(fs, rand_t({4}, rng)) < 1e-2f);
        ScalarFn fb = [&](Tape& t, Tensor& bv) {
            return weighted_sum(t, rowwise_affine(&t, xf, s, bv), w);
        };
        CHECK(gradcheck(fb, rand_t({4}, rng)) < 1e-2f);
    }
}

TEST_CASE("matrix products pass gradcheck") {
    Rng rng(23);
    SUBCASE("matmul wrt a and b") {
        Tensor b = rand_t({4, 5}, rng);
        Tensor w = rand_t({3, 5}, rng);
        ScalarFn fa = [&](Tape& t, Tensor& a) { return weighted_sum(t, matmul(&t, a, b), w); };
        CHECK(gradcheck(fa, rand_t({3, 4}, rng)) < 1e-2f);
        Tensor a = rand_t({3, 4}, rng);
        ScalarFn fb = [&](Tape& t, Tensor& bv) { return weighted_sum(t, matmul(&t, a, bv), w); };
        CHECK(gradcheck(fb, rand_t({4, 5}, rng)) < 1e-2f);
    }
    SUBCASE("matmul_nt wrt a and b") {
        Tensor b = rand_t({5, 4}, rng);
        Tensor w = rand_t({3, 5}, rng);
        ScalarFn fa = [&](Tape& t, Tensor& a) { return weighted_sum(t, matmul_nt(&t, a, b), w); };
        CHECK(gradcheck(fa, rand_t({3, 4}, rng)) < 1e-2f);
        Tensor a = rand_t({3, 4}, rng);
        ScalarFn fb = [&](Tape& t, Tensor& bv) { return weighted_sum(t, matmul_nt(&t, a, bv), w); };
        CHECK(gradcheck(fb, rand_t({5, 4}, rng)) < 1e-2f);
    }
    SUBCASE("matmul_nt agrees with matmul against explicit transpose") {
        Tensor a = rand_t({3, 4}, rng), b = rand_t({5, 4}, rng);
        Tensor y = matmul_nt(nullptr, a, b);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                float acc = 0.0f;
                for (int k = 0; k < 4; ++k)
                    acc += a[static_cast<int64_t>(i) * 4 + k] * b[static_cast<int64_t>(j) * 4 + k];
                CHECK(y[static_cast<int64_t>(i) * 5 + j] == doctest::Approx(acc).epsilon(1e-4));
            }
    }
}

TEST_CASE("norms and softmaxes pass gradcheck") {
    Rng rng(29);
    Tensor w = rand_t({3, 6}, rng);
    SUBCASE("rmsnorm wrt x and gain") {
        Tensor g = rand_t({6}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, rmsnorm(&t, x, g, 1e-5f), w);
        };
        CHECK(gradcheck(fx, rand_t({3, 6}, rng)) < 1e-2f);
        Tensor x = rand_t({3, 6}, rng);
        ScalarFn fg = [&](Tape& t, Tensor& gv) {
            return weighted_sum(t, rmsnorm(&t, x, gv, 1e-5f), w);
        };
        CHECK(gradcheck(fg, rand_t({6}, rng)) < 1e-2f);
    }
    SUBCASE("softmax_rows") {
        ScalarFn f = [&](Tape& t, Tensor& x) { return weighted_sum(t, softmax_rows(&t, x), w); };
        CHECK(gradcheck(f, rand_t({3, 6}, rng)) < 1e-2f);
    }
    SUBCASE("causal_softmax") {
        Tensor wsq = rand_t({5, 5}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, causal_softmax(&t, x), wsq);
        };
        CHECK(gradcheck(f, rand_t({5, 5}, rng)) < 1e-2f);
    }
}

TEST_CASE("indexing and layout ops pass gradcheck") {
    Rng rng(31);
    SUBCASE("gather_rows") {
        std::vector<int> ids{2, 0, 2, 1};
        Tensor w = rand_t({4, 3}, rng);
        ScalarFn f = [&](Tape& t, Tensor& tab) {
            return weighted_sum(t, gather_rows(&t, tab, ids), w);
        };
        CHECK(gradcheck(f, rand_t({3, 3}, rng)) < 1e-2f);
    }
    SUBCASE("slice and concat") {
        Tensor w = rand_t({3, 8}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            Tensor left = slice_cols(&t, x, 0, 2);
            Tensor right = slice_cols(&t, x, 2, 5);
            Tensor top = slice_rows(&t, x, 0, 1);
            Tensor joined = concat_cols(&t, left, right);     // [3 x 5]
            Tensor stacked = concat_rows(&t, joined, joined); // [6 x 5]
            Tensor back = reshape(&t, stacked, {3, 10});
            Tensor trimmed = slice_cols(&t, back, 1, 9);
            (void)top;
            return weighted_sum(t, trimmed, w);
        };
        CHECK(gradcheck(f, rand_t({3, 5}, rng)) < 1e-2f);
    }
}

TEST_CASE("image ops pass gradcheck") {
    Rng rng(37);
    SUBCASE("conv2d wrt x, w, bias") {
        Tensor w = rand_t({3, 2, 3, 3}, rng, 0.5f);
        Tensor b = rand_t({3}, rng);
        Tensor head = rand_t({3, 4, 4}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, conv2d(&t, x, w, b, 1, 1), head);
        };
        CHECK(gradcheck(fx, rand_t({2, 4, 4}, rng)) < 1e-2f);
        Tensor x = rand_t({2, 4, 4}, rng);
        ScalarFn fw = [&](Tape& t, Tensor& wv) {
            return weighted_sum(t, conv2d(&t, x, wv, b, 1, 1), head);
        };
        CHECK(gradcheck(fw, rand_t({3, 2, 3, 3}, rng, 0.5f)) < 1e-2f);
        ScalarFn fb = [&](Tape& t, Tensor& bv) {
            return weighted_sum(t, conv2d(&t, x, w, bv, 1, 1), head);
        };
        CHECK(gradcheck(fb, rand_t({3}, rng)) < 1e-2f);
    }
    SUBCASE("conv2d stride 2") {
        Tensor w = rand_t({2, 2, 3, 3}, rng, 0.5f);
        Tensor b = rand_t({2}, rng);
        Tensor head = rand_t({2, 2, 2}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, conv2d(&t, x, w, b, 2, 1), head);
        };
        CHECK(gradcheck(fx, rand_t({2, 4, 4}, rng)) < 1e-2f);
    }
    SUBCASE("group_norm wrt x, gain, bias") {
        Tensor g = rand_t({4}, rng), b = rand_t({4}, rng);
        Tensor head = rand_t({4, 3, 3}, rng);
        ScalarFn fx = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, group_norm(&t, x, g, b, 2, 1e-5f), head);
        };
        CHECK(gradcheck(fx, rand_t({4, 3, 3}, rng)) < 1e-2f);
        Tensor x = rand_t({4, 3, 3}, rng);
        ScalarFn fg = [&](Tape& t, Tensor& gv) {
            return weighted_sum(t, group_norm(&t, x, gv, b, 2, 1e-5f), head);
        };
        CHECK(gradcheck(fg, rand_t({4}, rng)) < 1e-2f);
        ScalarFn fb = [&](Tape& t, Tensor& bv) {
            return weighted_sum(t, group_norm(&t, x, g, bv, 2, 1e-5f), head);
        };
        CHECK(gradcheck(fb, rand_t({4}, rng)) < 1e-2f);
    }
    SUBCASE("upsample_nearest2") {
        Tensor head = rand_t({2, 4, 4}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, upsample_nearest2(&t, x), head);
        };
        CHECK(gradcheck(f, rand_t({2, 2, 2}, rng)) < 1e-2f);
    }
    SUBCASE("pool2x2_grid") {
        Tensor head = rand_t({4, 3}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, pool2x2_grid(&t, x, 4, 4), head);
        };
        CHECK(gradcheck(f, rand_t({16, 3}, rng)) < 1e-2f);
    }
    SUBCASE("patchify/unpatchify relayout") {
        Tensor head = rand_t({4, 8}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, patchify_relayout(&t, x, 2), head);
        };
        CHECK(gradcheck(f, rand_t({2, 4, 4}, rng)) < 1e-2f);
        Tensor head2 = rand_t({2, 4, 4}, rng);
        ScalarFn f2 = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, unpatchify_relayout(&t, x, 2, 2, 2, 2), head2);
        };
        CHECK(gradcheck(f2, rand_t({4, 8}, rng)) < 1e-2f);
    }
    SUBCASE("rope") {
        std::vector<float> rows{0.0f, 1.0f, 2.0f}, cols{1.0f, 0.0f, 3.0f};
        Tensor head = rand_t({3, 8}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            return weighted_sum(t, rope_apply_ids(&t, x, rows, cols, 2), head);
        };
        CHECK(gradcheck(f, rand_t({3, 8}, rng)) < 1e-2f);
    }
}

TEST_CASE("reductions pass gradcheck") {
    Rng rng(41);
    SUBCASE("mean") {
        ScalarFn f = [](Tape& t, Tensor& x) { return mean(&t, x); };
        CHECK(gradcheck(f, rand_t({7}, rng)) < 1e-2f);
    }
    SUBCASE("mse wrt both sides") {
        Tensor b = rand_t({3, 3}, rng);
        ScalarFn fa = [&](Tape& t, Tensor& a) { return mse(&t, a, b); };
        CHECK(gradcheck(fa, rand_t({3, 3}, rng)) < 1e-2f);
        Tensor a = rand_t({3, 3}, rng);
        ScalarFn fb = [&](Tape& t, Tensor& bv) { return mse(&t, a, bv); };
        CHECK(gradcheck(fb, rand_t({3, 3}, rng)) < 1e-2f);
    }
    SUBCASE("cross_entropy_rows") {
        std::vector<int> targets{2, 0, 1};
        ScalarFn f = [&](Tape& t, Tensor& x) { return cross_entropy_rows(&t, x, targets); };
        CHECK(gradcheck(f, rand_t({3, 4}, rng)) < 1e-2f);
    }
    SUBCASE("scalar_add and scalar_scale") {
        Tensor b = rand_t({4}, rng);
        ScalarFn f = [&](Tape& t, Tensor& x) {
            Scalar s1 = sum(&t, mul(&t, x, x));
            Scalar s2 = mse(&t, x, b);
            return scalar_scale(&t, scalar_add(&t, s1, s2, 0.5, 2.0), 1.5);
        };
        CHECK(gradcheck(f, rand_t({4}, rng)) < 1e-2f);
    }
}

TEST_CASE("ops are deterministic") {
    Rng rng(53);
    Tensor a = rand_t({6, 6}, rng), b = rand_t({6, 6}, rng);
    Tensor y1 = matmul(nullptr, a, b);
    Tensor y2 = matmul(nullptr, a, b);
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
    Tensor s1 = softmax_rows(nullptr, a);
    Tensor s2 = softmax_rows(nullptr, a);
    for (int64_t i = 0; i < s1.numel(); ++i) CHECK(s1[i] == s2[i]);
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0f, 2.0f}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
    Rng rng(59);
    Tensor big = rand_t({4, 4}, rng, 10.0f);
    CHECK(silu(nullptr, big).all_finite());
    CHECK(softmax_rows(nullptr, big).all_finite());
    Tensor g = Tensor::full({4}, 1.0f);
    CHECK(rmsnorm(nullptr, big, g, 1e-6f).all_finite());
}
