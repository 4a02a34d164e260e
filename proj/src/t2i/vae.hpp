#pragma once

#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace t2i::vae {

struct VaeConfig {
    int latent_channels = 16;  // 4 or 16
    int spatial_down = 8;
    int base_width = 32;
    float kl_weight = 1e-3f;
    std::vector<int> resolutions = {32, 64};

    void validate() const;
};

struct Conv {
    Tensor w, b;
};

struct ResBlock {
    Tensor n1_gain, n1_bias;
    Conv c1;
    Tensor n2_gain, n2_bias;
    Conv c2;
};

// KL autoencoder with three stride-2 stages each way (spatial factor 8).
struct VaeWeights {
    VaeConfig cfg;
    // encoder
    Conv stem;          // 3 -> w
    Conv down1;         // w -> w, /2
    ResBlock enc_res1;  // w
    Conv down2;         // w -> 2w, /2
    ResBlock enc_res2;  // 2w
    Conv down3;         // 2w -> 2w, /2
    ResBlock enc_res3;  // 2w
    Tensor enc_norm_gain, enc_norm_bias;
    Conv to_moments;  // 2w -> 2C
    // decoder
    Conv from_latent;   // C -> 2w
    ResBlock dec_res1;  // 2w
    Conv up1;           // 2w -> 2w, x2
    ResBlock dec_res2;  // 2w
    Conv up2;           // 2w -> w, x2
    ResBlock dec_res3;  // w
    Conv up3;           // w -> w, x2
    Tensor dec_norm_gain, dec_norm_bias;
    Conv to_rgb;  // w -> 3

    static VaeWeights init(const VaeConfig& cfg, Rng& rng);
    std::vector<std::pair<std::string, Tensor>> named_params();
    void set_requires_grad(bool b);
    void zero_grads();
    uint64_t checksum() const;
};

// Deterministic conv encoder producing diagonal-Gaussian parameters;
// logvar clamped to [-30, 20]. Image dims must divide by spatial_down.
std::pair<Tensor, Tensor> encode(Tape* tape, const Tensor& image, const VaeWeights& w);

Tensor decode(Tape* tape, const Tensor& latent, const VaeWeights& w);

struct VaeLoss {
    Scalar total;
    double recon = 0.0;
    double kl = 0.0;
};

// Reconstruction MSE plus kl_weight * KL(N(mean, exp(logvar)) || N(0, I)),
// with reparameterized sampling. KL is averaged per latent element.
VaeLoss vae_loss(Tape* tape, const Tensor& image, Rng& rng, const VaeWeights& w);

// Mean per-element KL of a diagonal Gaussian against the standard normal.
Scalar kl_divergence(Tape* tape, const Tensor& mu, const Tensor& logvar);

}  // namespace t2i::vae
