#include <doctest.h>

#include <cmath>

#include "t2i/vae.hpp"

using namespace t2i;
using namespace t2i::vae;

namespace {

VaeConfig tiny_cfg(int channels = 16) {
    VaeConfig c;
    c.latent_channels = channels;
    c.base_width = 8;
    c.resolutions = {16, 32};
    return c;
}

}  // namespace

TEST_CASE("encode: shapes, determinism, logvar clamp") {
    VaeConfig cfg = tiny_cfg(16);
    Rng rng(1);
    VaeWeights w = VaeWeights::init(cfg, rng);
    Rng irng(2);
    Tensor img = Tensor::randn({3, 32, 32}, irng, 0.5f);

    auto [mean, logvar] = encode(nullptr, img, w);
    CHECK(mean.shape() == std::vector<int>{16, 4, 4});
    CHECK(logvar.shape() == std::vector<int>{16, 4, 4});

    auto [m2, lv2] = encode(nullptr, img, w);
    for (int64_t i = 0; i < mean.numel(); ++i) {
        CHECK(mean[i] == m2[i]);
        CHECK(logvar[i] == lv2[i]);
    }
    for (int64_t i = 0; i < logvar.numel(); ++i) {
        CHECK(logvar[i] >= -30.0f);
        CHECK(logvar[i] <= 20.0f);
    }

    Tensor bad = Tensor::randn({3, 30, 32}, irng);
    CHECK_THROWS_AS(encode(nullptr, bad, w), std::invalid_argument);
}

TEST_CASE("decode: shape contract for every configured resolution, zero latent finite") {
    VaeConfig cfg = tiny_cfg(4);
    Rng rng(3);
    VaeWeights w = VaeWeights::init(cfg, rng);
    for (int res : cfg.resolutions) {
        Tensor latent = Tensor::zeros({4, res / 8, res / 8});
        Tensor img = decode(nullptr, latent, w);
        CHECK(img.shape() == std::vector<int>{3, res, res});
        CHECK(img.all_finite());
    }
    Tensor wrong = Tensor::zeros({16, 4, 4});
    CHECK_THROWS_AS(decode(nullptr, wrong, w), std::invalid_argument);
}

TEST_CASE("kl divergence: standard normal gives zero, hand value, non-negativity") {
    Tensor zero_mu({1}, {0.0f});
    Tensor zero_lv({1}, {0.0f});
    CHECK(std::abs(kl_divergence(nullptr, zero_mu, zero_lv).value) < 1e-7);

    Tensor one_mu({1}, {1.0f});
    CHECK(kl_divergence(nullptr, one_mu, zero_lv).value == doctest::Approx(0.5).epsilon(1e-6));

    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        Tensor mu = Tensor::randn({5}, rng);
        Tensor lv = Tensor::randn({5}, rng);
        const double kl = kl_divergence(nullptr, mu, lv).value;
        CHECK(kl >= 0.0);
        bool standard = true;
        for (int64_t j = 0; j < 5; ++j)
            if (std::abs(mu[j]) > 1e-7f || std::abs(lv[j]) > 1e-7f) standard = false;
        if (!standard) CHECK(kl > 1e-7);
    }
}

TEST_CASE("vae_loss composes recon and weighted kl") {
    VaeConfig cfg = tiny_cfg(4);
    cfg.kl_weight = 0.25f;
    Rng rng(5);
    VaeWeights w = VaeWeights::init(cfg, rng);
    Rng irng(6);
    Tensor img = Tensor::randn({3, 16, 16}, irng, 0.5f);
    Rng noise(7);
    VaeLoss l = vae_loss(nullptr, img, noise, w);
    CHECK(l.total.value ==
          doctest::Approx(l.recon + 0.25 * l.kl).epsilon(1e-6));
    CHECK(l.recon >= 0.0);
    CHECK(l.kl >= 0.0);
}

TEST_CASE("vae_loss is differentiable end to end") {
    VaeConfig cfg = tiny_cfg(4);
    Rng rng(8);
    VaeWeights w = VaeWeights::init(cfg, rng);
    Rng irng(9);
    Tensor img = Tensor::randn({3, 8, 8}, irng, 0.5f);
    // check the gradient w.r.t. the decoder head bias (few coordinates)
    ScalarFn f = [&](Tape& tape, Tensor& b) {
        VaeWeights local = w;
        local.to_rgb.b = b;
        Rng noise(42);  // identical draw on every evaluation
        return vae_loss(&tape, img, noise, local).total;
    };
    CHECK(gradcheck(f, w.to_rgb.b.clone()) < 1e-2f);
}

TEST_CASE("config validation") {
    VaeConfig bad = tiny_cfg();
    bad.latent_channels = 8;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_cfg();
    bad.resolutions = {32, 16};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_cfg();
    bad.resolutions = {20};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
