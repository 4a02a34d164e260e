#include "edm.hpp"

#include <cmath>
#include <stdexcept>

namespace t2i::edm {

Sampler sampler_from_string(const std::string& s) {
    if (s == "euler") return Sampler::euler;
    if (s == "heun") return Sampler::heun;
    throw std::invalid_argument("sampler must be 'euler' or 'heun', got: " + s);
}

const char* sampler_name(Sampler s) { return s == Sampler::euler ? "euler" : "heun"; }

void EdmConfig::validate() const {
    check(sigma_data > 0.0f, "edm config: sigma_data must be positive");
    check(p_std > 0.0f, "edm config: p_std must be positive");
    check(0.0f < sigma_min && sigma_min < sigma_max, "edm config: need 0 < sigma_min < sigma_max");
    check(rho > 0.0f, "edm config: rho must be positive");
    check(n_steps >= 1, "edm config: n_steps must be >= 1");
}

Precond preconditioners(float sigma, float sigma_data) {
    if (sigma <= 0.0f) throw std::domain_error("preconditioners: sigma must be positive");
    const float s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    Precond p;
    p.c_skip = d2 / (s2 + d2);
    p.c_out = sigma * sigma_data / std::sqrt(s2 + d2);
    p.c_in = 1.0f / std::sqrt(s2 + d2);
    p.c_noise = 0.25f * std::log(sigma);
    return p;
}

float loss_weight(float sigma, float sigma_data) {
    const float s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    return (s2 + d2) / (s2 * d2);
}

float sample_sigma(Rng& rng, float p_mean, float p_std) {
    check(p_std > 0.0f, "sample_sigma: p_std must be positive");
    return std::exp(p_mean + p_std * rng.normal());
}

void SigmaSchedule::validate() const {
    check(sigmas.size() >= 2, "schedule: need at least [sigma_max, 0]");
    check(sigmas.back() == 0.0f, "schedule: must end at exactly 0");
    for (size_t i = 0; i + 1 < sigmas.size(); ++i) {
        check(sigmas[i] > 0.0f, "schedule: interior sigmas must be positive");
        check(sigmas[i] > sigmas[i + 1], "schedule: must be strictly decreasing");
    }
}

SigmaSchedule karras_schedule(const EdmConfig& cfg) {
    cfg.validate();
    SigmaSchedule sched;
    const int n = cfg.n_steps;
    if (n == 1) {
        sched.sigmas = {cfg.sigma_max, 0.0f};
        sched.validate();
        return sched;
    }
    const double inv_rho = 1.0 / static_cast<double>(cfg.rho);
    const double max_r = std::pow(static_cast<double>(cfg.sigma_max), inv_rho);
    const double min_r = std::pow(static_cast<double>(cfg.sigma_min), inv_rho);
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n - 1);
        sched.sigmas.push_back(
            static_cast<float>(std::pow(max_r + t * (min_r - max_r), static_cast<double>(cfg.rho))));
    }
    sched.sigmas.push_back(0.0f);
    sched.validate();
    return sched;
}

Tensor denoise(Tape* tape, const Tensor& x, float sigma, float sigma_data, const FthetaFn& f) {
    const Precond p = preconditioners(sigma, sigma_data);
    Tensor fx = f(tape, scale(tape, x, p.c_in), sigma);
    check(fx.same_shape(x), "denoise: network output shape must match input");
    return add(tape, scale(tape, x, p.c_skip), fx, p.c_out);
}

LossInfo training_loss(Tape* tape, const Tensor& clean_latent, Rng& rng, const EdmConfig& cfg,
                       const FthetaFn& f) {
    check(clean_latent.all_finite(), "training_loss: clean latent must be finite");
    LossInfo info;
    info.sigma = sample_sigma(rng, cfg.p_mean, cfg.p_std);
    Tensor noised = clean_latent.clone();
    for (int64_t i = 0; i < noised.numel(); ++i) noised[i] += info.sigma * rng.normal();
    Tensor denoised = denoise(tape, noised, info.sigma, cfg.sigma_data, f);
    Scalar err = mse(tape, denoised, clean_latent);
    info.loss = scalar_scale(tape, err, loss_weight(info.sigma, cfg.sigma_data));
    return info;
}

Tensor initial_latent(Rng& rng, std::vector<int> shape, float sigma_max) {
    Tensor x = Tensor::randn(std::move(shape), rng);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] *= sigma_max;
    return x;
}

Tensor ode_sample(const DenoiseFn& model, const Tensor& x_init, const SigmaSchedule& schedule,
                  Sampler sampler) {
    schedule.validate();
    Tensor x = x_init.clone();
    const int64_t n = x.numel();
    for (size_t i = 0; i + 1 < schedule.sigmas.size(); ++i) {
        const float s = schedule.sigmas[i];
        const float sn = schedule.sigmas[i + 1];
        const float dt = sn - s;
        Tensor d0 = model(x, s);
        check(d0.same_shape(x), "ode_sample: denoiser output shape mismatch");
        if (sampler == Sampler::euler || sn == 0.0f) {
            for (int64_t j = 0; j < n; ++j) x[j] += dt * (x[j] - d0[j]) / s;
        } else {
            Tensor x2 = x.clone();
            for (int64_t j = 0; j < n; ++j) x2[j] += dt * (x[j] - d0[j]) / s;
            Tensor d1 = model(x2, sn);
            for (int64_t j = 0; j < n; ++j) {
                const float slope0 = (x[j] - d0[j]) / s;
                const float slope1 = (x2[j] - d1[j]) / sn;
                x[j] += dt * 0.5f * (slope0 + slope1);
            }
        }
    }
    return x;
}

}  // namespace t2i::edm
