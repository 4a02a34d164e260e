#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace t2i {

namespace {

// c[m x n] (+)= a[m x k] . b[k x n]; axpy form so the inner loop vectorizes
// without float reassociation.
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
    for (int i = 0; i < m; ++i) {
        float* ci = c + static_cast<size_t>(i) * n;
        if (!accum) std::fill(ci, ci + n, 0.0f);
        const float* ai = a + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const float av = ai[l];
            const float* bl = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// c[k x n] (+)= a[m x k]^T . b[m x n]
void mm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
    if (!accum) std::fill(c, c + static_cast<size_t>(k) * n, 0.0f);
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<size_t>(i) * k;
        const float* bi = b + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const float av = ai[l];
            float* cl = c + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) cl[j] += av * bi[j];
        }
    }
}

void transpose(const float* a, float* at, int m, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) at[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
}

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

// ----------------------------------------------------------------------------
// Elementwise

Tensor add(Tape* tape, const Tensor& a, const Tensor& b, float alpha) {
    check(a.same_shape(b), "add: shape mismatch");
    const int64_t n = a.numel();
    Tensor y(a.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] + alpha * b[i];
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, alpha, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            if (ac.requires_grad()) ac.accumulate_grad(gy.data(), n);
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += alpha * gy[static_cast<size_t>(i)];
            }
        });
    }
    return y;
}

Tensor scale(Tape* tape, const Tensor& x, float s) {
    const int64_t n = x.numel();
    Tensor y(x.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = s * x[i];
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, s, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += s * gy[static_cast<size_t>(i)];
        });
    }
    return y;
}

Tensor add_const(Tape* tape, const Tensor& x, float c) {
    const int64_t n = x.numel();
    Tensor y(x.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] + c;
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            xc.accumulate_grad(yc.grad().data(), n);
        });
    }
    return y;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "mul: shape mismatch");
    const int64_t n = a.numel();
    Tensor y(a.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * bc[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * ac[i];
            }
        });
    }
    return y;
}

Tensor silu(Tape* tape, const Tensor& x) {
    const int64_t n = x.numel();
    Tensor y(x.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoidf(x[i]);
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i) {
                const float s = sigmoidf(xc[i]);
                gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * s * (1.0f + xc[i] * (1.0f - s));
            }
        });
    }
    return y;
}

Tensor exp(Tape* tape, const Tensor& x) {
    const int64_t n = x.numel();
    Tensor y(x.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * yc[i];
        });
    }
    return y;
}

Tensor clamp(Tape* tape, const Tensor& x, float lo, float hi) {
    check(lo < hi, "clamp: lo must be < hi");
    const int64_t n = x.numel();
    Tensor y(x.shape());
    for (int64_t i = 0; i < n; ++i) y[i] = std::min(hi, std::max(lo, x[i]));
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, lo, hi, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i)
                if (xc[i] > lo && xc[i] < hi) gx[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
        });
    }
    return y;
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
    check(x.rank() == 2 && bias.rank() == 1 && x.dim(1) == bias.dim(0),
          "add_bias: expected [n x d] plus [d]");
    const int n = x.dim(0), d = x.dim(1);
    Tensor y(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            y[static_cast<int64_t>(i) * d + j] = x[static_cast<int64_t>(i) * d + j] + bias[j];
    if (grad_needed(tape, x, bias)) {
        y.set_requires_grad(true);
        Tensor xc = x, bc = bias, yc = y;
        tape->record([xc, bc, yc, n, d]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            if (xc.requires_grad()) xc.accumulate_grad(gy.data(), static_cast<int64_t>(n) * d);
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gy[static_cast<size_t>(i) * d + j];
            }
        });
    }
    return y;
}

Tensor rowwise_affine(Tape* tape, const Tensor& x, const Tensor& s, const Tensor& b) {
    check(x.rank() == 2 && s.rank() == 1 && b.rank() == 1, "rowwise_affine: bad ranks");
    check(x.dim(1) == s.dim(0) && x.dim(1) == b.dim(0), "rowwise_affine: width mismatch");
    const int n = x.dim(0), d = x.dim(1);
    Tensor y(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            y[static_cast<int64_t>(i) * d + j] = x[static_cast<int64_t>(i) * d + j] * s[j] + b[j];
    if (tape && (x.requires_grad() || s.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        Tensor xc = x, sc = s, bc = b, yc = y;
        tape->record([xc, sc, bc, yc, n, d]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        gx[static_cast<size_t>(i) * d + j] += gy[static_cast<size_t>(i) * d + j] * sc[j];
            }
            if (sc.requires_grad()) {
                auto& gs = sc.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        gs[static_cast<size_t>(j)] += gy[static_cast<size_t>(i) * d + j] * xc[static_cast<int64_t>(i) * d + j];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gy[static_cast<size_t>(i) * d + j];
            }
        });
    }
    return y;
}

// ----------------------------------------------------------------------------
// Matrix products

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 inputs");
    check(a.dim(1) == b.dim(0), "matmul: inner dimension mismatch");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y({m, n});
    mm_nn(a.data(), b.data(), y.data(), m, k, n, false);
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, m, k, n]() mutable {
            if (!yc.has_grad()) return;
            const float* gy = yc.grad().data();
            if (ac.requires_grad()) {
                std::vector<float> bt(static_cast<size_t>(k) * n);
                transpose(bc.data(), bt.data(), k, n);
                mm_nn(gy, bt.data(), ac.grad().data(), m, n, k, true);
            }
            if (bc.requires_grad()) mm_tn(ac.data(), gy, bc.grad().data(), m, k, n, true);
        });
    }
    return y;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul_nt: expected rank-2 inputs");
    check(a.dim(1) == b.dim(1), "matmul_nt: inner dimension mismatch");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor y({m, n});
    std::vector<float> bt(static_cast<size_t>(k) * n);
    transpose(b.data(), bt.data(), n, k);
    mm_nn(a.data(), bt.data(), y.data(), m, k, n, false);
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, m, k, n]() mutable {
            if (!yc.has_grad()) return;
            const float* gy = yc.grad().data();
            // da [m x k] += gy [m x n] . b [n x k]
            if (ac.requires_grad()) mm_nn(gy, bc.data(), ac.grad().data(), m, n, k, true);
            // db [n x k] += gy^T [n x m] . a [m x k]
            if (bc.requires_grad()) mm_tn(gy, ac.data(), bc.grad().data(), m, n, k, true);
        });
    }
    return y;
}

// ----------------------------------------------------------------------------
// Normalization / softmax

Tensor rmsnorm(Tape* tape, const Tensor& x, const Tensor& gain, float eps) {
    check(x.rank() >= 1, "rmsnorm: rank-0 input");
    check(gain.rank() == 1, "rmsnorm: gain must be rank-1");
    const int d = x.dim(x.rank() - 1);
    check(gain.dim(0) == d, "rmsnorm: gain length must match last dim");
    check(d >= 1 && eps >= 0.0f, "rmsnorm: invalid d or eps");
    const int64_t rows = x.numel() / d;
    Tensor y(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x.data() + r * d;
        float* yr = y.data() + r * d;
        float ms = 0.0f;
        for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
        const float inv = 1.0f / std::sqrt(ms / static_cast<float>(d) + eps);
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain[j];
    }
    if (grad_needed(tape, x, gain)) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gain, yc = y;
        tape->record([xc, gc, yc, d, eps, rows]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const float* xr = xc.data() + r * d;
                const float* gyr = gy.data() + static_cast<size_t>(r) * d;
                float ms = 0.0f;
                for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
                const float inv = 1.0f / std::sqrt(ms / static_cast<float>(d) + eps);
                if (xc.requires_grad()) {
                    float dot = 0.0f;
                    for (int j = 0; j < d; ++j) dot += gyr[j] * gc[j] * xr[j];
                    const float coef = inv * inv * inv * dot / static_cast<float>(d);
                    auto& gx = xc.grad();
                    float* gxr = gx.data() + static_cast<size_t>(r) * d;
                    for (int j = 0; j < d; ++j) gxr[j] += inv * gyr[j] * gc[j] - coef * xr[j];
                }
                if (gc.requires_grad()) {
                    auto& gg = gc.grad();
                    for (int j = 0; j < d; ++j) gg[static_cast<size_t>(j)] += gyr[j] * xr[j] * inv;
                }
            }
        });
    }
    return y;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
    check(x.rank() == 2, "softmax_rows: expected rank-2 input");
    const int n = x.dim(0), m = x.dim(1);
    Tensor y(x.shape());
    for (int i = 0; i < n; ++i) {
        const float* xr = x.data() + static_cast<size_t>(i) * m;
        float* yr = y.data() + static_cast<size_t>(i) * m;
        float mx = xr[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
        float z = 0.0f;
        for (int j = 0; j < m; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        const float invz = 1.0f / z;
        for (int j = 0; j < m; ++j) yr[j] *= invz;
    }
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, n, m]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int i = 0; i < n; ++i) {
                const float* yr = yc.data() + static_cast<size_t>(i) * m;
                const float* gyr = gy.data() + static_cast<size_t>(i) * m;
                float s = 0.0f;
                for (int j = 0; j < m; ++j) s += gyr[j] * yr[j];
                float* gxr = gx.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j) gxr[j] += yr[j] * (gyr[j] - s);
            }
        });
    }
    return y;
}

Tensor causal_softmax(Tape* tape, const Tensor& scores) {
    check(scores.rank() == 2 && scores.dim(0) == scores.dim(1),
          "causal_softmax: expected square score matrix");
    const int T = scores.dim(0);
    Tensor y(scores.shape());
    for (int i = 0; i < T; ++i) {
        const float* xr = scores.data() + static_cast<size_t>(i) * T;
        float* yr = y.data() + static_cast<size_t>(i) * T;
        float mx = xr[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, xr[j]);
        float z = 0.0f;
        for (int j = 0; j <= i; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        const float invz = 1.0f / z;
        for (int j = 0; j <= i; ++j) yr[j] *= invz;
        for (int j = i + 1; j < T; ++j) yr[j] = 0.0f;
    }
    if (grad_needed(tape, scores)) {
        y.set_requires_grad(true);
        Tensor xc = scores, yc = y;
        tape->record([xc, yc, T]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int i = 0; i < T; ++i) {
                const float* yr = yc.data() + static_cast<size_t>(i) * T;
                const float* gyr = gy.data() + static_cast<size_t>(i) * T;
                float s = 0.0f;
                for (int j = 0; j <= i; ++j) s += gyr[j] * yr[j];
                float* gxr = gx.data() + static_cast<size_t>(i) * T;
                for (int j = 0; j <= i; ++j) gxr[j] += yr[j] * (gyr[j] - s);
            }
        });
    }
    return y;
}

// ----------------------------------------------------------------------------
// Indexing / layout

Tensor gather_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    check(table.rank() == 2, "gather_rows: table must be rank-2");
    const int V = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    for (int id : ids) check(id >= 0 && id < V, "gather_rows: id out of range");
    Tensor y({n, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(y.data() + static_cast<size_t>(i) * d,
                    table.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    if (grad_needed(tape, table)) {
        y.set_requires_grad(true);
        Tensor tc = table, yc = y;
        tape->record([tc, yc, ids, d, n]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gt = tc.grad();
            for (int i = 0; i < n; ++i) {
                float* dst = gt.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
                const float* src = gy.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1) {
    check(x.rank() == 2, "slice_cols: expected rank-2 input");
    check(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_cols: bad range");
    const int n = x.dim(0), d = x.dim(1), w = c1 - c0;
    Tensor y({n, w});
    for (int i = 0; i < n; ++i)
        std::memcpy(y.data() + static_cast<size_t>(i) * w,
                    x.data() + static_cast<size_t>(i) * d + c0, sizeof(float) * static_cast<size_t>(w));
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, n, d, w, c0]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int i = 0; i < n; ++i) {
                float* dst = gx.data() + static_cast<size_t>(i) * d + c0;
                const float* src = gy.data() + static_cast<size_t>(i) * w;
                for (int j = 0; j < w; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor slice_rows(Tape* tape, const Tensor& x, int r0, int r1) {
    check(x.rank() == 2, "slice_rows: expected rank-2 input");
    check(0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: bad range");
    const int d = x.dim(1), h = r1 - r0;
    Tensor y({h, d});
    std::memcpy(y.data(), x.data() + static_cast<size_t>(r0) * d,
                sizeof(float) * static_cast<size_t>(h) * d);
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, r0, h, d]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            float* dst = gx.data() + static_cast<size_t>(r0) * d;
            for (int64_t i = 0; i < static_cast<int64_t>(h) * d; ++i) dst[i] += gy[static_cast<size_t>(i)];
        });
    }
    return y;
}

Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), "concat_cols: row mismatch");
    const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
    Tensor y({n, da + db});
    for (int i = 0; i < n; ++i) {
        std::memcpy(y.data() + static_cast<size_t>(i) * (da + db),
                    a.data() + static_cast<size_t>(i) * da, sizeof(float) * static_cast<size_t>(da));
        std::memcpy(y.data() + static_cast<size_t>(i) * (da + db) + da,
                    b.data() + static_cast<size_t>(i) * db, sizeof(float) * static_cast<size_t>(db));
    }
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, n, da, db]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            for (int i = 0; i < n; ++i) {
                const float* row = gy.data() + static_cast<size_t>(i) * (da + db);
                if (ac.requires_grad()) {
                    float* dst = ac.grad().data() + static_cast<size_t>(i) * da;
                    for (int j = 0; j < da; ++j) dst[j] += row[j];
                }
                if (bc.requires_grad()) {
                    float* dst = bc.grad().data() + static_cast<size_t>(i) * db;
                    for (int j = 0; j < db; ++j) dst[j] += row[da + j];
                }
            }
        });
    }
    return y;
}

Tensor concat_rows(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "concat_rows: col mismatch");
    const int na = a.dim(0), nb = b.dim(0), d = a.dim(1);
    Tensor y({na + nb, d});
    std::memcpy(y.data(), a.data(), sizeof(float) * static_cast<size_t>(na) * d);
    std::memcpy(y.data() + static_cast<size_t>(na) * d, b.data(),
                sizeof(float) * static_cast<size_t>(nb) * d);
    if (grad_needed(tape, a, b)) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape->record([ac, bc, yc, na, nb, d]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            if (ac.requires_grad()) ac.accumulate_grad(gy.data(), static_cast<int64_t>(na) * d);
            if (bc.requires_grad())
                bc.accumulate_grad(gy.data() + static_cast<size_t>(na) * d, static_cast<int64_t>(nb) * d);
        });
    }
    return y;
}

Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape) {
    check(Tensor::numel_of(shape) == x.numel(), "reshape: numel mismatch");
    Tensor y(std::move(shape));
    std::memcpy(y.data(), x.data(), sizeof(float) * static_cast<size_t>(x.numel()));
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        const int64_t n = x.numel();
        tape->record([xc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            xc.accumulate_grad(yc.grad().data(), n);
        });
    }
    return y;
}

// ----------------------------------------------------------------------------
// Reductions

Scalar sum(Tape* tape, const Tensor& x) {
    const int64_t n = x.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    Scalar s;
    s.value = acc;
    s.node = Tensor({1}, {static_cast<float>(acc)});
    if (grad_needed(tape, x)) {
        s.node.set_requires_grad(true);
        Tensor xc = x, nodec = s.node;
        tape->record([xc, nodec, n]() mutable {
            if (!nodec.has_grad()) return;
            const float g = nodec.grad()[0];
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
        });
    }
    return s;
}

Scalar mean(Tape* tape, const Tensor& x) {
    const int64_t n = x.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    acc /= static_cast<double>(n);
    Scalar s;
    s.value = acc;
    s.node = Tensor({1}, {static_cast<float>(acc)});
    if (grad_needed(tape, x)) {
        s.node.set_requires_grad(true);
        Tensor xc = x, nodec = s.node;
        tape->record([xc, nodec, n]() mutable {
            if (!nodec.has_grad()) return;
            const float g = nodec.grad()[0] / static_cast<float>(n);
            auto& gx = xc.grad();
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
        });
    }
    return s;
}

Scalar mse(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "mse: shape mismatch");
    const int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    acc /= static_cast<double>(n);
    Scalar s;
    s.value = acc;
    s.node = Tensor({1}, {static_cast<float>(acc)});
    if (grad_needed(tape, a, b)) {
        s.node.set_requires_grad(true);
        Tensor ac = a, bc = b, nodec = s.node;
        tape->record([ac, bc, nodec, n]() mutable {
            if (!nodec.has_grad()) return;
            const float g = nodec.grad()[0] * 2.0f / static_cast<float>(n);
            for (int64_t i = 0; i < n; ++i) {
                const float d = ac[i] - bc[i];
                if (ac.requires_grad()) ac.grad()[static_cast<size_t>(i)] += g * d;
                if (bc.requires_grad()) bc.grad()[static_cast<size_t>(i)] -= g * d;
            }
        });
    }
    return s;
}

Scalar cross_entropy_rows(Tape* tape, const Tensor& logits, const std::vector<int>& targets) {
    check(logits.rank() == 2, "cross_entropy_rows: logits must be rank-2");
    const int T = logits.dim(0), V = logits.dim(1);
    check(static_cast<int>(targets.size()) == T, "cross_entropy_rows: target count mismatch");
    for (int t : targets) check(t >= 0 && t < V, "cross_entropy_rows: target out of range");
    double acc = 0.0;
    for (int i = 0; i < T; ++i) {
        const float* xr = logits.data() + static_cast<size_t>(i) * V;
        float mx = xr[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (int j = 0; j < V; ++j) z += std::exp(static_cast<double>(xr[j] - mx));
        acc += std::log(z) + mx - xr[targets[static_cast<size_t>(i)]];
    }
    acc /= static_cast<double>(T);
    Scalar s;
    s.value = acc;
    s.node = Tensor({1}, {static_cast<float>(acc)});
    if (grad_needed(tape, logits)) {
        s.node.set_requires_grad(true);
        Tensor lc = logits, nodec = s.node;
        tape->record([lc, nodec, targets, T, V]() mutable {
            if (!nodec.has_grad()) return;
            const float g = nodec.grad()[0] / static_cast<float>(T);
            auto& gl = lc.grad();
            for (int i = 0; i < T; ++i) {
                const float* xr = lc.data() + static_cast<size_t>(i) * V;
                float mx = xr[0];
                for (int j = 1; j < V; ++j) mx = std::max(mx, xr[j]);
                float z = 0.0f;
                for (int j = 0; j < V; ++j) z += std::exp(xr[j] - mx);
                const float invz = 1.0f / z;
                float* gr = gl.data() + static_cast<size_t>(i) * V;
                for (int j = 0; j < V; ++j) gr[j] += g * std::exp(xr[j] - mx) * invz;
                gr[targets[static_cast<size_t>(i)]] -= g;
            }
        });
    }
    return s;
}

Scalar scalar_add(Tape* tape, const Scalar& a, const Scalar& b, double ca, double cb) {
    Scalar s;
    s.value = ca * a.value + cb * b.value;
    s.node = Tensor({1}, {static_cast<float>(s.value)});
    if (grad_needed(tape, a.node, b.node)) {
        s.node.set_requires_grad(true);
        Tensor ac = a.node, bc = b.node, nodec = s.node;
        const float fa = static_cast<float>(ca), fb = static_cast<float>(cb);
        tape->record([ac, bc, nodec, fa, fb]() mutable {
            if (!nodec.has_grad()) return;
            const float g = nodec.grad()[0];
            if (ac.requires_grad()) ac.grad()[0] += fa * g;
            if (bc.requires_grad()) bc.grad()[0] += fb * g;
        });
    }
    return s;
}

Scalar scalar_scale(Tape* tape, const Scalar& a, double c) {
    Scalar s;
    s.value = c * a.value;
    s.node = Tensor({1}, {static_cast<float>(s.value)});
    if (grad_needed(tape, a.node)) {
        s.node.set_requires_grad(true);
        Tensor ac = a.node, nodec = s.node;
        const float fc = static_cast<float>(c);
        tape->record([ac, nodec, fc]() mutable {
            if (!nodec.has_grad()) return;
            ac.grad()[0] += fc * nodec.grad()[0];
        });
    }
    return s;
}

void backward(Tape& tape, Scalar& loss) {
    loss.node.grad()[0] += 1.0f;
    tape.backward();
}

// ----------------------------------------------------------------------------
// Gradient checking

float gradcheck(const ScalarFn& f, const Tensor& x, float eps) {
    check(eps > 0.0f, "gradcheck: eps must be positive");
    Tensor xg = x.clone();
    xg.set_requires_grad(true);
    {
        Tape tape;
        Scalar y = f(tape, xg);
        backward(tape, y);
    }
    const int64_t n = x.numel();
    std::vector<float> analytic(static_cast<size_t>(n), 0.0f);
    if (xg.has_grad()) analytic = xg.grad();

    Tensor xp = x.clone();
    float max_rel = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
        const float orig = xp[i];
        double fp, fm;
        {
            Tape t;
            xp[i] = orig + eps;
            fp = f(t, xp).value;
        }
        {
            Tape t;
            xp[i] = orig - eps;
            fm = f(t, xp).value;
        }
        xp[i] = orig;
        const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double rel =
            std::abs(static_cast<double>(analytic[static_cast<size_t>(i)]) - fd) / (std::abs(fd) + 1e-8);
        max_rel = std::max(max_rel, static_cast<float>(rel));
    }
    return max_rel;
}

float gradcheck_tensor_fn(const TensorFn& f, const Tensor& x, float eps) {
    ScalarFn wrapped = [&f](Tape& tape, Tensor& xin) -> Scalar {
        Tensor y = f(tape, xin);
        if (y.numel() != 1)
            throw std::invalid_argument("gradcheck: function must return a scalar (1-element) tensor");
        Scalar s;
        s.node = y;
        s.value = static_cast<double>(y[0]);
        return s;
    };
    return gradcheck(wrapped, x, eps);
}

}  // namespace t2i
