#include "vae.hpp"

#include <cmath>

namespace t2i::vae {

namespace {
constexpr float kGnEps = 1e-5f;

int norm_groups(int channels) { return channels >= 8 ? 8 : channels; }
}  // namespace

void VaeConfig::validate() const {
    check(latent_channels == 4 || latent_channels == 16,
          "vae config: latent_channels must be 4 or 16");
    check(spatial_down == 8, "vae config: spatial_down of 8 is the supported factor");
    check(base_width >= 8 && base_width % 8 == 0, "vae config: base_width must be a multiple of 8");
    check(!resolutions.empty(), "vae config: resolutions must be non-empty");
    for (size_t i = 0; i + 1 < resolutions.size(); ++i)
        check(resolutions[i] < resolutions[i + 1], "vae config: resolutions must strictly increase");
    for (int r : resolutions)
        check(r % spatial_down == 0, "vae config: every resolution must divide by spatial_down");
}

namespace {

Conv make_conv(int cin, int cout, Rng& rng) {
    Conv c;
    c.w = Tensor::randn({cout, cin, 3, 3}, rng, 1.0f / std::sqrt(9.0f * static_cast<float>(cin)));
    c.b = Tensor::zeros({cout});
    return c;
}

ResBlock make_res(int ch, Rng& rng) {
    ResBlock r;
    r.n1_gain = Tensor::full({ch}, 1.0f);
    r.n1_bias = Tensor::zeros({ch});
    r.c1 = make_conv(ch, ch, rng);
    r.n2_gain = Tensor::full({ch}, 1.0f);
    r.n2_bias = Tensor::zeros({ch});
    r.c2 = make_conv(ch, ch, rng);
    // zero-init the closing conv so the block starts as identity
    for (int64_t i = 0; i < r.c2.w.numel(); ++i) r.c2.w[i] = 0.0f;
    return r;
}

Tensor res_forward(Tape* tape, const Tensor& x, const ResBlock& r) {
    Tensor h = silu(tape, group_norm(tape, x, r.n1_gain, r.n1_bias, norm_groups(x.dim(0)), kGnEps));
    h = conv2d(tape, h, r.c1.w, r.c1.b, 1, 1);
    h = silu(tape, group_norm(tape, h, r.n2_gain, r.n2_bias, norm_groups(h.dim(0)), kGnEps));
    h = conv2d(tape, h, r.c2.w, r.c2.b, 1, 1);
    return add(tape, x, h);
}

void collect_conv(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
                  Conv& c) {
    out.emplace_back(name + ".w", c.w);
    out.emplace_back(name + ".b", c.b);
}

void collect_res(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
                 ResBlock& r) {
    out.emplace_back(name + ".n1_gain", r.n1_gain);
    out.emplace_back(name + ".n1_bias", r.n1_bias);
    collect_conv(out, name + ".c1", r.c1);
    out.emplace_back(name + ".n2_gain", r.n2_gain);
    out.emplace_back(name + ".n2_bias", r.n2_bias);
    collect_conv(out, name + ".c2", r.c2);
}

}  // namespace

VaeWeights VaeWeights::init(const VaeConfig& cfg, Rng& rng) {
    cfg.validate();
    VaeWeights v;
    v.cfg = cfg;
    const int w = cfg.base_width, w2 = 2 * cfg.base_width, c = cfg.latent_channels;
    v.stem = make_conv(3, w, rng);
    v.down1 = make_conv(w, w, rng);
    v.enc_res1 = make_res(w, rng);
    v.down2 = make_conv(w, w2, rng);
    v.enc_res2 = make_res(w2, rng);
    v.down3 = make_conv(w2, w2, rng);
    v.enc_res3 = make_res(w2, rng);
    v.enc_norm_gain = Tensor::full({w2}, 1.0f);
    v.enc_norm_bias = Tensor::zeros({w2});
    v.to_moments = make_conv(w2, 2 * c, rng);
    v.from_latent = make_conv(c, w2, rng);
    v.dec_res1 = make_res(w2, rng);
    v.up1 = make_conv(w2, w2, rng);
    v.dec_res2 = make_res(w2, rng);
    v.up2 = make_conv(w2, w, rng);
    v.dec_res3 = make_res(w, rng);
    v.up3 = make_conv(w, w, rng);
    v.dec_norm_gain = Tensor::full({w}, 1.0f);
    v.dec_norm_bias = Tensor::zeros({w});
    v.to_rgb = make_conv(w, 3, rng);
    return v;
}

std::vector<std::pair<std::string, Tensor>> VaeWeights::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    collect_conv(out, "vae.stem", stem);
    collect_conv(out, "vae.down1", down1);
    collect_res(out, "vae.enc_res1", enc_res1);
    collect_conv(out, "vae.down2", down2);
    collect_res(out, "vae.enc_res2", enc_res2);
    collect_conv(out, "vae.down3", down3);
    collect_res(out, "vae.enc_res3", enc_res3);
    out.emplace_back("vae.enc_norm_gain", enc_norm_gain);
    out.emplace_back("vae.enc_norm_bias", enc_norm_bias);
    collect_conv(out, "vae.to_moments", to_moments);
    collect_conv(out, "vae.from_latent", from_latent);
    collect_res(out, "vae.dec_res1", dec_res1);
    collect_conv(out, "vae.up1", up1);
    collect_res(out, "vae.dec_res2", dec_res2);
    collect_conv(out, "vae.up2", up2);
    collect_res(out, "vae.dec_res3", dec_res3);
    collect_conv(out, "vae.up3", up3);
    out.emplace_back("vae.dec_norm_gain", dec_norm_gain);
    out.emplace_back("vae.dec_norm_bias", dec_norm_bias);
    collect_conv(out, "vae.to_rgb", to_rgb);
    return out;
}

void VaeWeights::set_requires_grad(bool b) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(b);
}

void VaeWeights::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

uint64_t VaeWeights::checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& [name, t] : const_cast<VaeWeights*>(this)->named_params()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.data(), sizeof(float) * static_cast<size_t>(t.numel()), h);
    }
    return h;
}

std::pair<Tensor, Tensor> encode(Tape* tape, const Tensor& image, const VaeWeights& w) {
    check(image.rank() == 3 && image.dim(0) == 3, "encode: expected [3 x H x W]");
    check(image.dim(1) % w.cfg.spatial_down == 0 && image.dim(2) % w.cfg.spatial_down == 0,
          "encode: image dims must divide by spatial_down");
    Tensor h = conv2d(tape, image, w.stem.w, w.stem.b, 1, 1);
    h = conv2d(tape, h, w.down1.w, w.down1.b, 2, 1);
    h = res_forward(tape, h, w.enc_res1);
    h = conv2d(tape, h, w.down2.w, w.down2.b, 2, 1);
    h = res_forward(tape, h, w.enc_res2);
    h = conv2d(tape, h, w.down3.w, w.down3.b, 2, 1);
    h = res_forward(tape, h, w.enc_res3);
    h = silu(tape, group_norm(tape, h, w.enc_norm_gain, w.enc_norm_bias, norm_groups(h.dim(0)),
                              kGnEps));
    Tensor moments = conv2d(tape, h, w.to_moments.w, w.to_moments.b, 1, 1);
    const int c = w.cfg.latent_channels, lh = moments.dim(1), lw = moments.dim(2);
    Tensor flat = reshape(tape, moments, {2 * c, lh * lw});
    Tensor mean = reshape(tape, slice_rows(tape, flat, 0, c), {c, lh, lw});
    Tensor logvar =
        clamp(tape, reshape(tape, slice_rows(tape, flat, c, 2 * c), {c, lh, lw}), -30.0f, 20.0f);
    return {mean, logvar};
}

Tensor decode(Tape* tape, const Tensor& latent, const VaeWeights& w) {
    check(latent.rank() == 3, "decode: expected [C x h x w]");
    check(latent.dim(0) == w.cfg.latent_channels, "decode: latent channel mismatch");
    Tensor h = conv2d(tape, latent, w.from_latent.w, w.from_latent.b, 1, 1);
    h = res_forward(tape, h, w.dec_res1);
    h = conv2d(tape, upsample_nearest2(tape, h), w.up1.w, w.up1.b, 1, 1);
    h = res_forward(tape, h, w.dec_res2);
    h = conv2d(tape, upsample_nearest2(tape, h), w.up2.w, w.up2.b, 1, 1);
    h = res_forward(tape, h, w.dec_res3);
    h = conv2d(tape, upsample_nearest2(tape, h), w.up3.w, w.up3.b, 1, 1);
    h = silu(tape, group_norm(tape, h, w.dec_norm_gain, w.dec_norm_bias, norm_groups(h.dim(0)),
                              kGnEps));
    return conv2d(tape, h, w.to_rgb.w, w.to_rgb.b, 1, 1);
}

Scalar kl_divergence(Tape* tape, const Tensor& mu, const Tensor& logvar) {
    check(mu.same_shape(logvar), "kl: shape mismatch");
    // 0.5 * mean(mu^2 + exp(lv) - lv - 1)
    Tensor mu2 = mul(tape, mu, mu);
    Tensor var = exp(tape, logvar);
    Tensor inner = add_const(tape, add(tape, add(tape, mu2, var), logvar, -1.0f), -1.0f);
    return scalar_scale(tape, mean(tape, inner), 0.5);
}

VaeLoss vae_loss(Tape* tape, const Tensor& image, Rng& rng, const VaeWeights& w) {
    auto [mean, logvar] = encode(tape, image, w);
    // z = mean + exp(logvar / 2) * eps
    Tensor eps = Tensor::randn(mean.shape(), rng);
    Tensor std_dev = exp(tape, scale(tape, logvar, 0.5f));
    Tensor z = add(tape, mean, mul(tape, std_dev, eps));
    Tensor recon = decode(tape, z, w);
    Scalar rec = mse(tape, recon, image);
    Scalar kl = kl_divergence(tape, mean, logvar);
    VaeLoss out;
    out.recon = rec.value;
    out.kl = kl.value;
    out.total = scalar_add(tape, rec, kl, 1.0, static_cast<double>(w.cfg.kl_weight));
    return out;
}

}  // namespace t2i::vae
