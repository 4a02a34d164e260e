#pragma once

#include "tensor.hpp"

namespace t2i::metrics {

// 10*log10(max_val^2 / MSE); returns +inf when the images are identical.
float psnr(const Tensor& a, const Tensor& b, float max_val);

// Mean local SSIM over non-overlapping windows, standard
// luminance/contrast/structure product. Throws if the spatial dims are
// smaller than the window.
float ssim(const Tensor& a, const Tensor& b, int window = 8, float k1 = 0.01f,
           float k2 = 0.03f, float max_val = 1.0f);

}  // namespace t2i::metrics
