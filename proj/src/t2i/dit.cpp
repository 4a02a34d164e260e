#include "dit.hpp"

#include <cmath>
#include <cstdio>
#include <set>

namespace t2i::dit {

PeMode pe_mode_from_string(const std::string& s) {
    if (s == "expand") return PeMode::expand;
    if (s == "interpolating") return PeMode::interpolating;
    throw std::invalid_argument("pe_mode must be 'expand' or 'interpolating', got: " + s);
}

const char* pe_mode_name(PeMode m) {
    return m == PeMode::expand ? "expand" : "interpolating";
}

std::vector<std::pair<int, int>> DitConfig::skip_pairs() const {
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n_layers / 2; ++i) pairs.emplace_back(i, n_layers - 1 - i);
    return pairs;
}

void DitConfig::validate() const {
    check(n_layers >= 2 && n_layers % 2 == 0, "dit config: n_layers must be even and >= 2");
    check(hidden_dim % n_heads == 0, "dit config: hidden_dim must divide by n_heads");
    check(head_dim() % 4 == 0, "dit config: head_dim must divide by 4 (2D rotary pairing)");
    check(patch_size >= 1, "dit config: patch_size must be >= 1");
    check(latent_channels >= 1, "dit config: latent_channels must be >= 1");
    check(downsample_factor == 4 || downsample_factor == 1,
          "dit config: downsample_factor must be 4 (2x2 pooling) or 1 (off)");
    check(0 <= downsample_begin && downsample_begin <= downsample_end &&
              downsample_end <= n_layers,
          "dit config: downsample range out of bounds");
    check(sigma_embed_dim >= 2 && sigma_embed_dim % 2 == 0,
          "dit config: sigma_embed_dim must be even");
    check(ref_grid >= 2, "dit config: ref_grid must be >= 2");
}

void DitConfig::validate_against(const llm::LlmConfig& lcfg) const {
    validate();
    check(n_layers == lcfg.n_layers, "config: DiT n_layers must equal LLM n_layers");
    check(hidden_dim == lcfg.hidden_dim, "config: DiT hidden_dim must equal LLM hidden_dim");
    check(n_heads == lcfg.n_heads, "config: DiT n_heads must equal LLM n_heads");
}

std::vector<std::pair<int, int>> raster_positions(int grid_h, int grid_w) {
    std::vector<std::pair<int, int>> pos;
    pos.reserve(static_cast<size_t>(grid_h) * grid_w);
    for (int r = 0; r < grid_h; ++r)
        for (int c = 0; c < grid_w; ++c) pos.emplace_back(r, c);
    return pos;
}

void ImageTokenGrid::validate() const {
    check(tokens.rank() == 2, "token grid: tokens must be [N x d]");
    check(grid_h >= 1 && grid_w >= 1, "token grid: bad dims");
    check(tokens.dim(0) == grid_h * grid_w, "token grid: token count mismatch");
    check(positions.size() == static_cast<size_t>(grid_h) * grid_w,
          "token grid: position count mismatch");
    std::set<std::pair<int, int>> seen(positions.begin(), positions.end());
    check(static_cast<int>(seen.size()) == grid_h * grid_w,
          "token grid: positions must enumerate the grid exactly once");
    for (const auto& [r, c] : positions)
        check(r >= 0 && r < grid_h && c >= 0 && c < grid_w, "token grid: position out of range");
}

DitWeights DitWeights::init(const DitConfig& cfg, Rng& rng) {
    cfg.validate();
    DitWeights w;
    w.cfg = cfg;
    const int d = cfg.hidden_dim, f = cfg.ffn_dim();
    const int pk = cfg.latent_channels * cfg.patch_size * cfg.patch_size;
    const float attn_std = 1.0f / std::sqrt(static_cast<float>(d));
    const float out_std = attn_std / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));

    w.patch_w = Tensor::randn({pk, d}, rng, 1.0f / std::sqrt(static_cast<float>(pk)));
    w.patch_b = Tensor::zeros({d});
    w.sigma_w1 = Tensor::randn({cfg.sigma_embed_dim, d}, rng,
                               1.0f / std::sqrt(static_cast<float>(cfg.sigma_embed_dim)));
    w.sigma_b1 = Tensor::zeros({d});
    w.sigma_w2 = Tensor::randn({d, d}, rng, attn_std);
    w.sigma_b2 = Tensor::zeros({d});

    const int half = cfg.n_layers / 2;
    for (int l = 0; l < cfg.n_layers; ++l) {
        DitBlockWeights b;
        b.attn_norm_gain = Tensor::full({d}, 1.0f);
        b.ffn_norm_gain = Tensor::full({d}, 1.0f);
        b.wq = Tensor::randn({d, d}, rng, attn_std);
        b.wk = Tensor::randn({d, d}, rng, attn_std);
        b.wv = Tensor::randn({d, d}, rng, attn_std);
        b.wo = Tensor::randn({d, d}, rng, out_std);
        b.txt_norm_gain = Tensor::full({d}, 1.0f);
        b.wk_txt = Tensor::randn({d, d}, rng, attn_std);
        b.wv_txt = Tensor::randn({d, d}, rng, attn_std);
        b.w_gate = Tensor::randn({d, f}, rng, attn_std);
        b.w_up = Tensor::randn({d, f}, rng, attn_std);
        b.w_down = Tensor::randn({f, d}, rng, 1.0f / std::sqrt(static_cast<float>(f)) /
                                                  std::sqrt(2.0f * static_cast<float>(cfg.n_layers)));
        b.mod_w = Tensor::zeros({d, 4 * d});
        b.mod_b = Tensor::zeros({4 * d});
        if (l >= half) {
            // fused skip input starts as identity on the trunk half, zero on the skip half
            b.skip_w = Tensor::zeros({2 * d, d});
            for (int i = 0; i < d; ++i) b.skip_w[static_cast<int64_t>(i) * d + i] = 1.0f;
            b.skip_b = Tensor::zeros({d});
        }
        w.blocks.push_back(std::move(b));
    }
    w.final_norm_gain = Tensor::full({d}, 1.0f);
    w.unpatch_w = Tensor::randn({d, pk}, rng, attn_std);
    w.unpatch_b = Tensor::zeros({pk});
    w.latent_scale = Tensor::full({1}, 1.0f);
    return w;
}

std::vector<std::pair<std::string, Tensor>> DitWeights::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("dit.patch_w", patch_w);
    out.emplace_back("dit.patch_b", patch_b);
    out.emplace_back("dit.sigma_w1", sigma_w1);
    out.emplace_back("dit.sigma_b1", sigma_b1);
    out.emplace_back("dit.sigma_w2", sigma_w2);
    out.emplace_back("dit.sigma_b2", sigma_b2);
    for (size_t l = 0; l < blocks.size(); ++l) {
        auto& b = blocks[l];
        const std::string p = "dit.block" + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm_gain", b.attn_norm_gain);
        out.emplace_back(p + "ffn_norm_gain", b.ffn_norm_gain);
        out.emplace_back(p + "wq", b.wq);
        out.emplace_back(p + "wk", b.wk);
        out.emplace_back(p + "wv", b.wv);
        out.emplace_back(p + "wo", b.wo);
        out.emplace_back(p + "txt_norm_gain", b.txt_norm_gain);
        out.emplace_back(p + "wk_txt", b.wk_txt);
        out.emplace_back(p + "wv_txt", b.wv_txt);
        out.emplace_back(p + "w_gate", b.w_gate);
        out.emplace_back(p + "w_up", b.w_up);
        out.emplace_back(p + "w_down", b.w_down);
        out.emplace_back(p + "mod_w", b.mod_w);
        out.emplace_back(p + "mod_b", b.mod_b);
        if (b.skip_w.defined()) {
            out.emplace_back(p + "skip_w", b.skip_w);
            out.emplace_back(p + "skip_b", b.skip_b);
        }
    }
    out.emplace_back("dit.final_norm_gain", final_norm_gain);
    out.emplace_back("dit.unpatch_w", unpatch_w);
    out.emplace_back("dit.unpatch_b", unpatch_b);
    out.emplace_back("dit.latent_scale", latent_scale);
    return out;
}

void DitWeights::set_requires_grad(bool b) {
    for (auto& [name, t] : named_params())
        if (name != "dit.latent_scale") t.set_requires_grad(b);
}

void DitWeights::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

uint64_t DitWeights::checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& [name, t] : const_cast<DitWeights*>(this)->named_params()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.data(), sizeof(float) * static_cast<size_t>(t.numel()), h);
    }
    return h;
}

void position_ids(const std::vector<std::pair<int, int>>& positions, PeMode mode, int grid_h,
                  int grid_w, int ref, std::vector<float>& row_ids, std::vector<float>& col_ids) {
    float sr = 1.0f, sc = 1.0f;
    if (mode == PeMode::interpolating) {
        sr = grid_h > 1 ? static_cast<float>(ref - 1) / static_cast<float>(grid_h - 1) : 0.0f;
        sc = grid_w > 1 ? static_cast<float>(ref - 1) / static_cast<float>(grid_w - 1) : 0.0f;
    }
    row_ids.resize(positions.size());
    col_ids.resize(positions.size());
    for (size_t i = 0; i < positions.size(); ++i) {
        row_ids[i] = sr * static_cast<float>(positions[i].first);
        col_ids[i] = sc * static_cast<float>(positions[i].second);
    }
}

Tensor rope_apply(Tape* tape, const Tensor& vectors,
                  const std::vector<std::pair<int, int>>& positions, PeMode mode, int grid_h,
                  int grid_w, int ref, int n_heads) {
    std::vector<float> row_ids, col_ids;
    position_ids(positions, mode, grid_h, grid_w, ref, row_ids, col_ids);
    return rope_apply_ids(tape, vectors, row_ids, col_ids, n_heads);
}

ImageTokenGrid patchify(Tape* tape, const Tensor& latent, int patch_size, const Tensor& proj_w,
                        const Tensor& proj_b) {
    check(latent.rank() == 3, "patchify: latent must be [C x H x W]");
    check(latent.dim(1) % patch_size == 0 && latent.dim(2) % patch_size == 0,
          "patchify: latent dims must divide by patch size");
    ImageTokenGrid grid;
    grid.grid_h = latent.dim(1) / patch_size;
    grid.grid_w = latent.dim(2) / patch_size;
    Tensor rows = patchify_relayout(tape, latent, patch_size);
    grid.tokens = add_bias(tape, matmul(tape, rows, proj_w), proj_b);
    grid.positions = raster_positions(grid.grid_h, grid.grid_w);
    return grid;
}

Tensor unpatchify(Tape* tape, const ImageTokenGrid& grid, int patch_size, int channels,
                  const Tensor& proj_w, const Tensor& proj_b) {
    grid.validate();
    Tensor rows = add_bias(tape, matmul(tape, grid.tokens, proj_w), proj_b);
    return unpatchify_relayout(tape, rows, channels, grid.grid_h, grid.grid_w, patch_size);
}

Tensor joint_attention(Tape* tape, const Tensor& img_tokens,
                       const std::optional<Tensor>& txt_hidden, const DitBlockWeights& w,
                       const DitConfig& cfg, const ImageTokenGrid& grid, bool downsample,
                       AttnProbe* probe) {
    const int d = cfg.hidden_dim, H = cfg.n_heads, hd = cfg.head_dim();
    check(img_tokens.rank() == 2 && img_tokens.dim(1) == d, "joint_attention: bad image tokens");
    if (txt_hidden)
        check(txt_hidden->rank() == 2 && txt_hidden->dim(1) == d,
              "joint_attention: text hidden width must match model width");

    Tensor q = matmul(tape, img_tokens, w.wq);
    Tensor k_img = matmul(tape, img_tokens, w.wk);
    Tensor v_img = matmul(tape, img_tokens, w.wv);

    // rotary ids for queries (full grid)
    std::vector<float> q_rows, q_cols;
    position_ids(grid.positions, cfg.pe_mode, grid.grid_h, grid.grid_w, cfg.ref_grid, q_rows,
                 q_cols);
    q = rope_apply_ids(tape, q, q_rows, q_cols, H);

    bool pooled = false;
    if (downsample && cfg.downsample_factor == 4) {
        if (grid.grid_h % 2 == 0 && grid.grid_w % 2 == 0) {
            pooled = true;
        } else {
            std::fprintf(stderr,
                         "[t2i] warn: odd token grid %dx%d, skipping K/V downsampling\n",
                         grid.grid_h, grid.grid_w);
        }
    }

    std::vector<float> k_rows, k_cols;
    if (pooled) {
        k_img = pool2x2_grid(tape, k_img, grid.grid_h, grid.grid_w);
        v_img = pool2x2_grid(tape, v_img, grid.grid_h, grid.grid_w);
        // pooled token id = floor of the mean of the four constituent ids
        std::vector<std::pair<int, int>> pooled_pos;
        for (int r = 0; r < grid.grid_h / 2; ++r)
            for (int c = 0; c < grid.grid_w / 2; ++c) pooled_pos.emplace_back(2 * r, 2 * c);
        position_ids(pooled_pos, cfg.pe_mode, grid.grid_h, grid.grid_w, cfg.ref_grid, k_rows,
                     k_cols);
    } else {
        k_rows = q_rows;
        k_cols = q_cols;
    }
    k_img = rope_apply_ids(tape, k_img, k_rows, k_cols, H);

    Tensor K = k_img, V = v_img;
    if (txt_hidden) {
        // the raw residual stream grows with depth; norm it before projecting.
        // text keys stay unrotated: their positions were consumed inside the LLM
        Tensor txt = rmsnorm(tape, *txt_hidden, w.txt_norm_gain, llm::kNormEps);
        Tensor k_txt = matmul(tape, txt, w.wk_txt);
        Tensor v_txt = matmul(tape, txt, w.wv_txt);
        K = concat_rows(tape, k_img, k_txt);
        V = concat_rows(tape, v_img, v_txt);
    }

    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(hd));
    Tensor merged;
    for (int head = 0; head < H; ++head) {
        Tensor qh = slice_cols(tape, q, head * hd, (head + 1) * hd);
        Tensor kh = slice_cols(tape, K, head * hd, (head + 1) * hd);
        Tensor vh = slice_cols(tape, V, head * hd, (head + 1) * hd);
        Tensor probs = softmax_rows(tape, scale(tape, matmul_nt(tape, qh, kh), inv_scale));
        if (probe) probe->row_probs.push_back(probs.clone());
        Tensor oh = matmul(tape, probs, vh);
        merged = head == 0 ? oh : concat_cols(tape, merged, oh);
    }
    return matmul(tape, merged, w.wo);
}

Tensor sigma_embedding(Tape* tape, float sigma, const DitWeights& w) {
    check(sigma > 0.0f, "sigma_embedding: sigma must be positive");
    const int fe = w.cfg.sigma_embed_dim;
    const float c_noise = 0.25f * std::log(sigma);
    Tensor feat({1, fe});
    for (int i = 0; i < fe / 2; ++i) {
        const float freq =
            std::exp(-std::log(10000.0f) * static_cast<float>(i) / static_cast<float>(fe / 2));
        feat[2 * i] = std::cos(c_noise * freq);
        feat[2 * i + 1] = std::sin(c_noise * freq);
    }
    Tensor h = silu(tape, add_bias(tape, matmul(tape, feat, w.sigma_w1), w.sigma_b1));
    Tensor out = add_bias(tape, matmul(tape, h, w.sigma_w2), w.sigma_b2);
    return reshape(tape, out, {w.cfg.hidden_dim});
}

namespace {

// sigma-conditioned pre-norm: rmsnorm(x) * (1 + s) + b with per-block learned
// scale/shift projected from the sigma embedding (zero-init keeps the plain
// norm at initialization).
Tensor modulated_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& sigma_embed,
                      const Tensor& mod_w, const Tensor& mod_b, int which, int d) {
    Tensor se = reshape(tape, sigma_embed, {1, d});
    Tensor mod = add_bias(tape, matmul(tape, se, mod_w), mod_b);  // [1 x 4d]
    Tensor s = reshape(tape, slice_cols(tape, mod, 2 * which * d, (2 * which + 1) * d), {d});
    Tensor b = reshape(tape, slice_cols(tape, mod, (2 * which + 1) * d, (2 * which + 2) * d), {d});
    Tensor normed = rmsnorm(tape, x, gain, llm::kNormEps);
    return rowwise_affine(tape, normed, add_const(tape, s, 1.0f), b);
}

}  // namespace

ImageTokenGrid dit_block_forward(Tape* tape, const ImageTokenGrid& x,
                                 const std::optional<Tensor>& txt_hidden,
                                 const Tensor& sigma_embed, const DitWeights& w, int block_index,
                                 AttnProbe* probe) {
    const auto& cfg = w.cfg;
    check(block_index >= 0 && block_index < cfg.n_layers, "dit_block_forward: bad block index");
    const auto& bw = w.blocks[static_cast<size_t>(block_index)];
    const int d = cfg.hidden_dim;
    const bool downsample =
        block_index >= cfg.downsample_begin && block_index < cfg.downsample_end;

    Tensor h = modulated_norm(tape, x.tokens, bw.attn_norm_gain, sigma_embed, bw.mod_w, bw.mod_b,
                              0, d);
    Tensor attn = joint_attention(tape, h, txt_hidden, bw, cfg, x, downsample, probe);
    Tensor x1 = add(tape, x.tokens, attn);

    Tensor h2 = modulated_norm(tape, x1, bw.ffn_norm_gain, sigma_embed, bw.mod_w, bw.mod_b, 1, d);
    Tensor gate = silu(tape, matmul(tape, h2, bw.w_gate));
    Tensor up = matmul(tape, h2, bw.w_up);
    Tensor ffn = matmul(tape, mul(tape, gate, up), bw.w_down);

    ImageTokenGrid out;
    out.tokens = add(tape, x1, ffn);
    out.grid_h = x.grid_h;
    out.grid_w = x.grid_w;
    out.positions = x.positions;
    return out;
}

namespace {

Tensor denoiser_impl(Tape* tape, const Tensor& noised_latent, float sigma,
                     const std::vector<std::optional<Tensor>>& slabs, const DitWeights& w,
                     AttnProbe* probe) {
    const auto& cfg = w.cfg;
    check(noised_latent.rank() == 3 && noised_latent.dim(0) == cfg.latent_channels,
          "denoiser: latent channel mismatch");
    check(sigma > 0.0f, "denoiser: sigma must be positive");
    check(static_cast<int>(slabs.size()) == cfg.n_layers,
          "denoiser: text context must have exactly one slab per layer");

    Tensor se = sigma_embedding(tape, sigma, w);
    ImageTokenGrid grid = patchify(tape, noised_latent, cfg.patch_size, w.patch_w, w.patch_b);
    grid.tokens = add_bias(tape, grid.tokens, se);

    const int half = cfg.n_layers / 2;
    std::vector<Tensor> saved;  // encoder block outputs, blocks [0, half)
    for (int l = 0; l < cfg.n_layers; ++l) {
        if (l >= half) {
            const auto& bw = w.blocks[static_cast<size_t>(l)];
            const Tensor& skip_src = saved[static_cast<size_t>(cfg.n_layers - 1 - l)];
            Tensor fused = concat_cols(tape, grid.tokens, skip_src);
            grid.tokens = add_bias(tape, matmul(tape, fused, bw.skip_w), bw.skip_b);
        }
        grid = dit_block_forward(tape, grid, slabs[static_cast<size_t>(l)], se, w, l, probe);
        if (l < half) saved.push_back(grid.tokens);
    }
    grid.tokens = rmsnorm(tape, grid.tokens, w.final_norm_gain, llm::kNormEps);
    return unpatchify(tape, grid, cfg.patch_size, cfg.latent_channels, w.unpatch_w, w.unpatch_b);
}

}  // namespace

Tensor denoiser_forward(Tape* tape, const Tensor& noised_latent, float sigma,
                        const llm::TextContext& ctx, const DitWeights& w, AttnProbe* probe) {
    check(static_cast<int>(ctx.hidden.size()) == w.cfg.n_layers,
          "denoiser_forward: context slab count must equal n_layers");
    std::vector<std::optional<Tensor>> slabs;
    slabs.reserve(ctx.hidden.size());
    for (const auto& s : ctx.hidden) {
        check(s.rank() == 2 && s.dim(1) == w.cfg.hidden_dim,
              "denoiser_forward: slab width must equal hidden_dim");
        slabs.emplace_back(s);
    }
    return denoiser_impl(tape, noised_latent, sigma, slabs, w, probe);
}

Tensor denoiser_forward_unconditional(Tape* tape, const Tensor& noised_latent, float sigma,
                                      const DitWeights& w) {
    std::vector<std::optional<Tensor>> slabs(static_cast<size_t>(w.cfg.n_layers), std::nullopt);
    return denoiser_impl(tape, noised_latent, sigma, slabs, w, nullptr);
}

}  // namespace t2i::dit
