#include "metrics.hpp"

#include <cmath>
#include <limits>

namespace t2i::metrics {

float psnr(const Tensor& a, const Tensor& b, float max_val) {
    check(a.same_shape(b), "psnr: shape mismatch");
    check(max_val > 0.0f, "psnr: max_val must be positive");
    const int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<float>::infinity();
    return static_cast<float>(10.0 * std::log10(static_cast<double>(max_val) * max_val / mse));
}

float ssim(const Tensor& a, const Tensor& b, int window, float k1, float k2, float max_val) {
    check(a.same_shape(b), "ssim: shape mismatch");
    check(a.rank() == 3, "ssim: expected [C x H x W] images");
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    check(H >= window && W >= window, "ssim: image smaller than window");
    const double c1 = static_cast<double>(k1 * max_val) * (k1 * max_val);
    const double c2 = static_cast<double>(k2 * max_val) * (k2 * max_val);
    const int wy = H / window, wx = W / window;
    const double n = static_cast<double>(window) * window;

    double total = 0.0;
    int count = 0;
    for (int c = 0; c < C; ++c) {
        const float* pa = a.data() + static_cast<size_t>(c) * H * W;
        const float* pb = b.data() + static_cast<size_t>(c) * H * W;
        for (int by = 0; by < wy; ++by) {
            for (int bx = 0; bx < wx; ++bx) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = 0; y < window; ++y) {
                    const float* ra = pa + static_cast<size_t>(by * window + y) * W + bx * window;
                    const float* rb = pb + static_cast<size_t>(by * window + y) * W + bx * window;
                    for (int x = 0; x < window; ++x) {
                        sa += ra[x];
                        sb += rb[x];
                        saa += static_cast<double>(ra[x]) * ra[x];
                        sbb += static_cast<double>(rb[x]) * rb[x];
                        sab += static_cast<double>(ra[x]) * rb[x];
                    }
                }
                const double mua = sa / n, mub = sb / n;
                const double va = saa / n - mua * mua;
                const double vb = sbb / n - mub * mub;
                const double cov = sab / n - mua * mub;
                const double s = ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) /
                                 ((mua * mua + mub * mub + c1) * (va + vb + c2));
                total += s;
                ++count;
            }
        }
    }
    return static_cast<float>(total / static_cast<double>(count));
}

}  // namespace t2i::metrics
