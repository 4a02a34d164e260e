#pragma once

#include <string>

#include "config.hpp"
#include "dit.hpp"
#include "edm.hpp"
#include "llm.hpp"
#include "vae.hpp"

namespace t2i::pipeline {

// The assembled frozen stack used for sampling and evaluation.
struct Stack {
    llm::LlmWeights llm;
    dit::DitWeights dit;
    vae::VaeWeights vae;
    edm::EdmConfig edm;
};

// Preconditioned denoiser D(x; sigma) for one prompt context.
edm::DenoiseFn make_denoiser(const Stack& stack, const llm::TextContext& ctx);

// Noise -> latent over a Karras schedule. grid_h/grid_w are latent-grid dims.
Tensor sample_latent(const Stack& stack, const llm::TextContext& ctx, int grid_h, int grid_w,
                     int steps, edm::Sampler sampler, Rng& noise_rng);

// Full prompt -> image path: tokenize, collect contexts, integrate the ODE,
// undo the latent scaling, decode.
Tensor sample_image(const Stack& stack, const std::string& prompt, int grid_h, int grid_w,
                    int steps, edm::Sampler sampler, Rng& noise_rng);

}  // namespace t2i::pipeline
