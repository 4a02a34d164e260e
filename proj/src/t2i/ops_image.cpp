#include <algorithm>
#include <cmath>
#include <cstring>

#include "ops.hpp"

namespace t2i {

namespace {

// col [OHW x Ci*kh*kw] from x [Ci x H x W]
void im2col(const float* x, float* col, int ci, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow) {
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            float* row = col + (static_cast<size_t>(oy) * ow + ox) * (static_cast<size_t>(ci) * kh * kw);
            int idx = 0;
            for (int c = 0; c < ci; ++c) {
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - pad;
                        row[idx++] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? x[(static_cast<size_t>(c) * h + iy) * w + ix]
                                         : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_acc(const float* col, float* dx, int ci, int h, int w, int kh, int kw, int stride,
                int pad, int oh, int ow) {
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const float* row =
                col + (static_cast<size_t>(oy) * ow + ox) * (static_cast<size_t>(ci) * kh * kw);
            int idx = 0;
            for (int c = 0; c < ci; ++c) {
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                            dx[(static_cast<size_t>(c) * h + iy) * w + ix] += row[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

// c[m x n] (+)= a[m x k] . b[k x n]
void mm_nn_local(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
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
void mm_tn_local(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
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

void transpose_local(const float* a, float* at, int m, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            at[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad) {
    check(x.rank() == 3, "conv2d: input must be [C x H x W]");
    check(w.rank() == 4, "conv2d: weight must be [Co x Ci x kh x kw]");
    check(bias.rank() == 1 && bias.dim(0) == w.dim(0), "conv2d: bias must be [Co]");
    check(x.dim(0) == w.dim(1), "conv2d: channel mismatch");
    check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    check(oh >= 1 && ow >= 1, "conv2d: output would be empty");
    const int K = ci * kh * kw;
    const int O = oh * ow;

    std::vector<float> col(static_cast<size_t>(O) * K);
    im2col(x.data(), col.data(), ci, h, wd, kh, kw, stride, pad, oh, ow);

    // yt [O x Co] = col [O x K] . w^T [K x Co]
    std::vector<float> wt(static_cast<size_t>(K) * co);
    transpose_local(w.data(), wt.data(), co, K);
    std::vector<float> yt(static_cast<size_t>(O) * co);
    mm_nn_local(col.data(), wt.data(), yt.data(), O, K, co, false);

    Tensor y({co, oh, ow});
    for (int o = 0; o < O; ++o)
        for (int c = 0; c < co; ++c)
            y[static_cast<int64_t>(c) * O + o] = yt[static_cast<size_t>(o) * co + c] + bias[c];

    if (tape && (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = bias, yc = y;
        tape->record([xc, wc, bc, yc, ci, h, wd, co, kh, kw, stride, pad, oh, ow, K, O]() mutable {
            if (!yc.has_grad()) return;
            const float* gy = yc.grad().data();  // [Co x O] row-major
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (int c = 0; c < co; ++c) {
                    float acc = 0.0f;
                    const float* row = gy + static_cast<size_t>(c) * O;
                    for (int o = 0; o < O; ++o) acc += row[o];
                    gb[static_cast<size_t>(c)] += acc;
                }
            }
            if (wc.requires_grad() || xc.requires_grad()) {
                std::vector<float> col(static_cast<size_t>(O) * K);
                im2col(xc.data(), col.data(), ci, h, wd, kh, kw, stride, pad, oh, ow);
                if (wc.requires_grad()) {
                    // dW [Co x K] += gy [Co x O] . col [O x K]
                    mm_nn_local(gy, col.data(), wc.grad().data(), co, O, K, true);
                }
                if (xc.requires_grad()) {
                    // dcol [O x K] = gy^T [O x Co] . w [Co x K]
                    std::vector<float> dcol(static_cast<size_t>(O) * K);
                    mm_tn_local(gy, wc.data(), dcol.data(), co, O, K, false);
                    col2im_acc(dcol.data(), xc.grad().data(), ci, h, wd, kh, kw, stride, pad, oh, ow);
                }
            }
        });
    }
    return y;
}

Tensor group_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  int groups, float eps) {
    check(x.rank() == 3, "group_norm: input must be [C x H x W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    check(gain.rank() == 1 && gain.dim(0) == C, "group_norm: gain must be [C]");
    check(bias.rank() == 1 && bias.dim(0) == C, "group_norm: bias must be [C]");
    check(groups >= 1 && C % groups == 0, "group_norm: groups must divide C");
    const int gs = C / groups;
    const int64_t n_per = static_cast<int64_t>(gs) * H * W;

    Tensor y(x.shape());
    std::vector<float> mu(static_cast<size_t>(groups)), ivar(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const float* xs = x.data() + static_cast<size_t>(g) * n_per;
        double m = 0.0;
        for (int64_t i = 0; i < n_per; ++i) m += xs[i];
        m /= static_cast<double>(n_per);
        double v = 0.0;
        for (int64_t i = 0; i < n_per; ++i) {
            const double d = xs[i] - m;
            v += d * d;
        }
        v /= static_cast<double>(n_per);
        mu[static_cast<size_t>(g)] = static_cast<float>(m);
        ivar[static_cast<size_t>(g)] = static_cast<float>(1.0 / std::sqrt(v + eps));
    }
    for (int c = 0; c < C; ++c) {
        const int g = c / gs;
        const float* xs = x.data() + static_cast<size_t>(c) * H * W;
        float* ys = y.data() + static_cast<size_t>(c) * H * W;
        const float m = mu[static_cast<size_t>(g)], iv = ivar[static_cast<size_t>(g)];
        const float gn = gain[c], bn = bias[c];
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) ys[i] = (xs[i] - m) * iv * gn + bn;
    }

    if (tape && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gain, bc = bias, yc = y;
        tape->record([xc, gc, bc, yc, C, H, W, groups, gs, n_per, mu, ivar]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            const int64_t hw = static_cast<int64_t>(H) * W;
            if (gc.requires_grad() || bc.requires_grad()) {
                for (int c = 0; c < C; ++c) {
                    const int g = c / gs;
                    const float m = mu[static_cast<size_t>(g)], iv = ivar[static_cast<size_t>(g)];
                    const float* xs = xc.data() + static_cast<size_t>(c) * hw;
                    const float* gys = gy.data() + static_cast<size_t>(c) * hw;
                    float dg = 0.0f, db = 0.0f;
                    for (int64_t i = 0; i < hw; ++i) {
                        dg += gys[i] * (xs[i] - m) * iv;
                        db += gys[i];
                    }
                    if (gc.requires_grad()) gc.grad()[static_cast<size_t>(c)] += dg;
                    if (bc.requires_grad()) bc.grad()[static_cast<size_t>(c)] += db;
                }
            }
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                for (int g = 0; g < groups; ++g) {
                    const float m = mu[static_cast<size_t>(g)], iv = ivar[static_cast<size_t>(g)];
                    // t1 = sum(dxhat), t2 = sum(dxhat * xhat) over the group
                    double t1 = 0.0, t2 = 0.0;
                    for (int c = g * gs; c < (g + 1) * gs; ++c) {
                        const float* xs = xc.data() + static_cast<size_t>(c) * hw;
                        const float* gys = gy.data() + static_cast<size_t>(c) * hw;
                        const float gn = gc[c];
                        for (int64_t i = 0; i < hw; ++i) {
                            const float dxh = gys[i] * gn;
                            t1 += dxh;
                            t2 += static_cast<double>(dxh) * ((xs[i] - m) * iv);
                        }
                    }
                    const float f1 = static_cast<float>(t1 / static_cast<double>(n_per));
                    const float f2 = static_cast<float>(t2 / static_cast<double>(n_per));
                    for (int c = g * gs; c < (g + 1) * gs; ++c) {
                        const float* xs = xc.data() + static_cast<size_t>(c) * hw;
                        const float* gys = gy.data() + static_cast<size_t>(c) * hw;
                        float* gxs = gx.data() + static_cast<size_t>(c) * hw;
                        const float gn = gc[c];
                        for (int64_t i = 0; i < hw; ++i) {
                            const float xhat = (xs[i] - m) * iv;
                            gxs[i] += iv * (gys[i] * gn - f1 - xhat * f2);
                        }
                    }
                }
            }
        });
    }
    return y;
}

Tensor upsample_nearest2(Tape* tape, const Tensor& x) {
    check(x.rank() == 3, "upsample_nearest2: input must be [C x H x W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor y({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const float v = x[(static_cast<int64_t>(c) * H + i) * W + j];
                float* base = y.data() + (static_cast<size_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                base[0] = v;
                base[1] = v;
                base[2 * W] = v;
                base[2 * W + 1] = v;
            }
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, C, H, W]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const float* base =
                            gy.data() + (static_cast<size_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                        gx[(static_cast<size_t>(c) * H + i) * W + j] +=
                            base[0] + base[1] + base[2 * W] + base[2 * W + 1];
                    }
        });
    }
    return y;
}

Tensor pool2x2_grid(Tape* tape, const Tensor& x, int gh, int gw) {
    check(x.rank() == 2, "pool2x2_grid: expected [N x d] tokens");
    check(gh * gw == x.dim(0), "pool2x2_grid: grid does not match token count");
    check(gh % 2 == 0 && gw % 2 == 0, "pool2x2_grid: grid dims must be even");
    const int d = x.dim(1), oh = gh / 2, ow = gw / 2;
    Tensor y({oh * ow, d});
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            float* out = y.data() + (static_cast<size_t>(r) * ow + c) * d;
            const float* i00 = x.data() + (static_cast<size_t>(2 * r) * gw + 2 * c) * d;
            const float* i01 = i00 + d;
            const float* i10 = x.data() + (static_cast<size_t>(2 * r + 1) * gw + 2 * c) * d;
            const float* i11 = i10 + d;
            for (int j = 0; j < d; ++j) out[j] = 0.25f * (i00[j] + i01[j] + i10[j] + i11[j]);
        }
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, gh, gw, d, oh, ow]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int r = 0; r < oh; ++r)
                for (int c = 0; c < ow; ++c) {
                    const float* g = gy.data() + (static_cast<size_t>(r) * ow + c) * d;
                    float* o00 = gx.data() + (static_cast<size_t>(2 * r) * gw + 2 * c) * d;
                    float* o01 = o00 + d;
                    float* o10 = gx.data() + (static_cast<size_t>(2 * r + 1) * gw + 2 * c) * d;
                    float* o11 = o10 + d;
                    for (int j = 0; j < d; ++j) {
                        const float q = 0.25f * g[j];
                        o00[j] += q;
                        o01[j] += q;
                        o10[j] += q;
                        o11[j] += q;
                    }
                }
        });
    }
    return y;
}

Tensor patchify_relayout(Tape* tape, const Tensor& x, int p) {
    check(x.rank() == 3, "patchify_relayout: input must be [C x H x W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    check(p >= 1 && H % p == 0 && W % p == 0, "patchify_relayout: dims must divide by patch size");
    const int gh = H / p, gw = W / p, K = C * p * p;
    Tensor y({gh * gw, K});
    for (int gr = 0; gr < gh; ++gr)
        for (int gc = 0; gc < gw; ++gc) {
            float* row = y.data() + (static_cast<size_t>(gr) * gw + gc) * K;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        row[(c * p + py) * p + px] =
                            x[(static_cast<size_t>(c) * H + gr * p + py) * W + gc * p + px];
        }
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, C, H, W, p, gh, gw, K]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int gr = 0; gr < gh; ++gr)
                for (int gc = 0; gc < gw; ++gc) {
                    const float* row = gy.data() + (static_cast<size_t>(gr) * gw + gc) * K;
                    for (int c = 0; c < C; ++c)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                gx[(static_cast<size_t>(c) * H + gr * p + py) * W + gc * p + px] +=
                                    row[(c * p + py) * p + px];
                }
        });
    }
    return y;
}

Tensor unpatchify_relayout(Tape* tape, const Tensor& x, int channels, int grid_h, int grid_w,
                           int p) {
    check(x.rank() == 2, "unpatchify_relayout: input must be [N x C*p*p]");
    check(x.dim(0) == grid_h * grid_w, "unpatchify_relayout: token count mismatch");
    check(x.dim(1) == channels * p * p, "unpatchify_relayout: feature width mismatch");
    const int C = channels, H = grid_h * p, W = grid_w * p, K = C * p * p;
    Tensor y({C, H, W});
    for (int gr = 0; gr < grid_h; ++gr)
        for (int gc = 0; gc < grid_w; ++gc) {
            const float* row = x.data() + (static_cast<size_t>(gr) * grid_w + gc) * K;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        y[(static_cast<size_t>(c) * H + gr * p + py) * W + gc * p + px] =
                            row[(c * p + py) * p + px];
        }
    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, C, H, W, p, grid_h, grid_w, K]() mutable {
            if (!yc.has_grad()) return;
            const auto& gy = yc.grad();
            auto& gx = xc.grad();
            for (int gr = 0; gr < grid_h; ++gr)
                for (int gc = 0; gc < grid_w; ++gc) {
                    float* row = gx.data() + (static_cast<size_t>(gr) * grid_w + gc) * K;
                    for (int c = 0; c < C; ++c)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                row[(c * p + py) * p + px] +=
                                    gy[(static_cast<size_t>(c) * H + gr * p + py) * W + gc * p + px];
                }
        });
    }
    return y;
}

Tensor rope_apply_ids(Tape* tape, const Tensor& x, const std::vector<float>& row_ids,
                      const std::vector<float>& col_ids, int n_heads, float base) {
    check(x.rank() == 2, "rope: expected [T x d] input");
    const int T = x.dim(0), d = x.dim(1);
    check(static_cast<int>(row_ids.size()) == T && static_cast<int>(col_ids.size()) == T,
          "rope: position id count must match rows");
    check(n_heads >= 1 && d % n_heads == 0, "rope: heads must divide width");
    const int hd = d / n_heads;
    check(hd % 4 == 0, "rope: head dim must be divisible by 4");
    const int half = hd / 2;      // dims rotated per axis
    const int npairs = half / 2;  // rotation pairs per axis

    // Per-token rotation angles are shared across heads.
    std::vector<float> cs(static_cast<size_t>(T) * half), sn(static_cast<size_t>(T) * half);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < npairs; ++i) {
            const float freq = std::pow(base, -2.0f * static_cast<float>(i) / static_cast<float>(half));
            const float ar = row_ids[static_cast<size_t>(t)] * freq;
            const float ac = col_ids[static_cast<size_t>(t)] * freq;
            cs[static_cast<size_t>(t) * half + 2 * i] = std::cos(ar);
            sn[static_cast<size_t>(t) * half + 2 * i] = std::sin(ar);
            cs[static_cast<size_t>(t) * half + 2 * i + 1] = std::cos(ac);
            sn[static_cast<size_t>(t) * half + 2 * i + 1] = std::sin(ac);
        }
    }

    // Captured by value: the tape closure below outlives this stack frame.
    auto rotate = [cs, sn, T, n_heads, d, hd, half, npairs](const float* src, float* dst,
                                                            bool inverse) {
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < n_heads; ++h) {
                const float* s = src + static_cast<size_t>(t) * d + static_cast<size_t>(h) * hd;
                float* o = dst + static_cast<size_t>(t) * d + static_cast<size_t>(h) * hd;
                for (int axis = 0; axis < 2; ++axis) {
                    const int off = axis * half;
                    for (int i = 0; i < npairs; ++i) {
                        const float c = cs[static_cast<size_t>(t) * half + 2 * i + axis];
                        float sv = sn[static_cast<size_t>(t) * half + 2 * i + axis];
                        if (inverse) sv = -sv;
                        const float e = s[off + 2 * i], od = s[off + 2 * i + 1];
                        o[off + 2 * i] = e * c - od * sv;
                        o[off + 2 * i + 1] = e * sv + od * c;
                    }
                }
            }
        }
    };

    Tensor y(x.shape());
    rotate(x.data(), y.data(), false);

    if (grad_needed(tape, x)) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, rotate]() mutable {
            if (!yc.has_grad()) return;
            // Rotation is orthogonal; the adjoint is the inverse rotation.
            std::vector<float> gx_local(yc.grad().size());
            rotate(yc.grad().data(), gx_local.data(), true);
            xc.accumulate_grad(gx_local.data(), static_cast<int64_t>(gx_local.size()));
        });
    }
    return y;
}

}  // namespace t2i
