#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "llm.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace t2i::dit {

enum class PeMode { expand, interpolating };

PeMode pe_mode_from_string(const std::string& s);
const char* pe_mode_name(PeMode m);

// Mirrors the text model's block geometry; one image block per LLM layer.
struct DitConfig {
    int n_layers = 8;
    int hidden_dim = 128;
    int n_heads = 4;
    float ffn_mult = 8.0f / 3.0f;
    int patch_size = 2;
    int latent_channels = 16;
    // K/V token downsampling is applied to blocks in [downsample_begin, downsample_end)
    int downsample_begin = 2;
    int downsample_end = 6;
    int downsample_factor = 4;
    PeMode pe_mode = PeMode::expand;
    int sigma_embed_dim = 64;  // Fourier feature width fed to the sigma MLP
    int ref_grid = 8;          // interpolating-PE anchor: ids rescale to [0, ref_grid-1]

    int head_dim() const { return hidden_dim / n_heads; }
    int ffn_dim() const { return static_cast<int>(ffn_mult * static_cast<float>(hidden_dim)); }
    std::vector<std::pair<int, int>> skip_pairs() const;  // (encoder i, decoder L-1-i)
    void validate() const;
    void validate_against(const llm::LlmConfig& lcfg) const;
};

// Patch tokens with their integer raster positions.
struct ImageTokenGrid {
    Tensor tokens;  // [grid_h*grid_w x d]
    int grid_h = 0;
    int grid_w = 0;
    std::vector<std::pair<int, int>> positions;  // (row, col) per token

    void validate() const;
};

std::vector<std::pair<int, int>> raster_positions(int grid_h, int grid_w);

struct DitBlockWeights {
    Tensor attn_norm_gain, ffn_norm_gain;
    Tensor wq, wk, wv, wo;
    Tensor txt_norm_gain;   // rms-norms the raw residual-stream slab before projection
    Tensor wk_txt, wv_txt;  // per-block projections of the LLM slab
    Tensor w_gate, w_up, w_down;
    Tensor mod_w, mod_b;    // sigma embedding -> per-norm scale/shift, zero-init
    Tensor skip_w, skip_b;  // decoder blocks only: [2d x d] fusion, identity/zero init
};

struct DitWeights {
    DitConfig cfg;
    Tensor patch_w, patch_b;      // [C*p*p x d], [d]
    Tensor sigma_w1, sigma_b1;    // Fourier features -> d
    Tensor sigma_w2, sigma_b2;    // d -> d
    std::vector<DitBlockWeights> blocks;
    Tensor final_norm_gain;
    Tensor unpatch_w, unpatch_b;  // [d x C*p*p]
    Tensor latent_scale;          // {1}; set by training, consumed at sampling

    static DitWeights init(const DitConfig& cfg, Rng& rng);
    std::vector<std::pair<std::string, Tensor>> named_params();
    void set_requires_grad(bool b);
    void zero_grads();
    uint64_t checksum() const;
};

// Collects attention row distributions for tests.
struct AttnProbe {
    std::vector<Tensor> row_probs;
};

// Position ids for rotary rotation. Expand mode uses raw integer ids;
// interpolating mode rescales each axis to the fixed anchors [0, ref-1].
void position_ids(const std::vector<std::pair<int, int>>& positions, PeMode mode, int grid_h,
                  int grid_w, int ref, std::vector<float>& row_ids, std::vector<float>& col_ids);

// Spec-facing rotary wrapper over the shared rope kernel.
Tensor rope_apply(Tape* tape, const Tensor& vectors,
                  const std::vector<std::pair<int, int>>& positions, PeMode mode, int grid_h,
                  int grid_w, int ref, int n_heads);

ImageTokenGrid patchify(Tape* tape, const Tensor& latent, int patch_size, const Tensor& proj_w,
                        const Tensor& proj_b);
Tensor unpatchify(Tape* tape, const ImageTokenGrid& grid, int patch_size, int channels,
                  const Tensor& proj_w, const Tensor& proj_b);

// Image queries attend over concatenated image+text keys/values. Rotary ids
// apply to image Q and image K only. K/V rows optionally mean-pooled 2x2
// (downsample_factor 4); odd grids fall back to no pooling with a warning.
Tensor joint_attention(Tape* tape, const Tensor& img_tokens,
                       const std::optional<Tensor>& txt_hidden, const DitBlockWeights& w,
                       const DitConfig& cfg, const ImageTokenGrid& grid, bool downsample,
                       AttnProbe* probe = nullptr);

// Fourier features of c_noise through the two-layer MLP; returns [d].
Tensor sigma_embedding(Tape* tape, float sigma, const DitWeights& w);

// Pre-norm block with sigma-modulated norms:
// modnorm -> joint attention -> residual -> modnorm -> gated FFN -> residual.
ImageTokenGrid dit_block_forward(Tape* tape, const ImageTokenGrid& x,
                                 const std::optional<Tensor>& txt_hidden,
                                 const Tensor& sigma_embed, const DitWeights& w, int block_index,
                                 AttnProbe* probe = nullptr);

// Full denoiser F_theta: patchify, add sigma embedding, run all blocks with
// per-layer text conditioning and U-Net skip fusion, final norm, unpatchify.
Tensor denoiser_forward(Tape* tape, const Tensor& noised_latent, float sigma,
                        const llm::TextContext& ctx, const DitWeights& w,
                        AttnProbe* probe = nullptr);

// Text-free variant (pure image DiT).
Tensor denoiser_forward_unconditional(Tape* tape, const Tensor& noised_latent, float sigma,
                                      const DitWeights& w);

}  // namespace t2i::dit
