#include "pipeline.hpp"

namespace t2i::pipeline {

edm::DenoiseFn make_denoiser(const Stack& stack, const llm::TextContext& ctx) {
    return [&stack, ctx](const Tensor& x, float sigma) {
        edm::FthetaFn f = [&stack, &ctx](Tape* tape, const Tensor& x_in, float s) {
            return dit::denoiser_forward(tape, x_in, s, ctx, stack.dit);
        };
        return edm::denoise(nullptr, x, sigma, stack.edm.sigma_data, f);
    };
}

Tensor sample_latent(const Stack& stack, const llm::TextContext& ctx, int grid_h, int grid_w,
                     int steps, edm::Sampler sampler, Rng& noise_rng) {
    check(grid_h % stack.dit.cfg.patch_size == 0 && grid_w % stack.dit.cfg.patch_size == 0,
          "sample: latent grid must divide by patch_size");
    edm::EdmConfig ec = stack.edm;
    ec.n_steps = steps;
    edm::SigmaSchedule sched = edm::karras_schedule(ec);
    Tensor x_init = edm::initial_latent(
        noise_rng, {stack.dit.cfg.latent_channels, grid_h, grid_w}, ec.sigma_max);
    Tensor x = edm::ode_sample(make_denoiser(stack, ctx), x_init, sched, sampler);
    // back to VAE latent units
    const float scale = stack.dit.latent_scale[0];
    check(scale > 0.0f, "sample: checkpoint carries no latent scale");
    for (int64_t i = 0; i < x.numel(); ++i) x[i] /= scale;
    return x;
}

Tensor sample_image(const Stack& stack, const std::string& prompt, int grid_h, int grid_w,
                    int steps, edm::Sampler sampler, Rng& noise_rng) {
    llm::TokenizeResult toks = llm::tokenize(prompt, stack.llm.cfg.max_seq_len);
    llm::TextContext ctx = llm::forward_collect(toks.ids, stack.llm);
    ctx.digest = llm::prompt_digest(prompt);
    Tensor latent = sample_latent(stack, ctx, grid_h, grid_w, steps, sampler, noise_rng);
    return vae::decode(nullptr, latent, stack.vae);
}

}  // namespace t2i::pipeline
