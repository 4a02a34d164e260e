#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace t2i::edm {

enum class Sampler { euler, heun };

Sampler sampler_from_string(const std::string& s);
const char* sampler_name(Sampler s);

struct EdmConfig {
    float sigma_data = 0.5f;
    float p_mean = -1.2f;
    float p_std = 1.2f;
    float sigma_min = 0.002f;
    float sigma_max = 80.0f;
    float rho = 7.0f;
    int n_steps = 32;
    Sampler sampler = Sampler::heun;

    void validate() const;
};

struct Precond {
    float c_skip, c_in, c_out, c_noise;
};

// c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
// c_in = 1/sqrt(s^2+sd^2), c_noise = ln(s)/4
Precond preconditioners(float sigma, float sigma_data);

// lambda(sigma) = (s^2 + sd^2) / (s * sd)^2; equals 1/c_out^2
float loss_weight(float sigma, float sigma_data);

// sigma = exp(p_mean + p_std * z), z standard normal
float sample_sigma(Rng& rng, float p_mean, float p_std);

// Descending noise levels ending in exactly 0.
struct SigmaSchedule {
    std::vector<float> sigmas;
    void validate() const;
};

SigmaSchedule karras_schedule(const EdmConfig& cfg);

// Raw network F_theta(x_in; sigma): receives the c_in-scaled latent and sigma.
using FthetaFn = std::function<Tensor(Tape*, const Tensor&, float)>;
// Preconditioned denoiser D(x; sigma).
using DenoiseFn = std::function<Tensor(const Tensor&, float)>;

// D(x; sigma) = c_skip * x + c_out * F_theta(c_in * x; sigma)
Tensor denoise(Tape* tape, const Tensor& x, float sigma, float sigma_data, const FthetaFn& f);

struct LossInfo {
    Scalar loss;
    float sigma = 0.0f;
};

// Draw sigma, noise the clean latent, and weight the reconstruction error:
// loss = lambda(sigma) * mean((D(x0 + n; sigma) - x0)^2)
LossInfo training_loss(Tape* tape, const Tensor& clean_latent, Rng& rng, const EdmConfig& cfg,
                       const FthetaFn& f);

// x_init = sigma_max * eps
Tensor initial_latent(Rng& rng, std::vector<int> shape, float sigma_max);

// Integrates dx/dsigma = (x - D(x; sigma)) / sigma over the schedule with
// Euler or Heun (no second-order correction on the final step to 0).
Tensor ode_sample(const DenoiseFn& model, const Tensor& x_init, const SigmaSchedule& schedule,
                  Sampler sampler);

}  // namespace t2i::edm
