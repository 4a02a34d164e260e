#include "llm.hpp"

#include <cmath>

namespace t2i::llm {

void LlmConfig::validate() const {
    check(n_layers >= 2, "llm config: n_layers must be >= 2");
    check(hidden_dim >= 4 && n_heads >= 1, "llm config: bad dims");
    check(hidden_dim % n_heads == 0, "llm config: hidden_dim must divide by n_heads");
    check(head_dim() % 4 == 0, "llm config: head_dim must divide by 4 (2D rotary pairing)");
    check(vocab_size >= 257, "llm config: vocab must cover bytes plus BOS");
    check(max_seq_len >= 2, "llm config: max_seq_len too small");
    check(ffn_mult > 0.0f, "llm config: ffn_mult must be positive");
}

TokenizeResult tokenize(const std::string& prompt, int max_seq_len) {
    size_t begin = 0, end = prompt.size();
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
    while (begin < end && is_space(prompt[begin])) ++begin;
    while (end > begin && is_space(prompt[end - 1])) --end;
    check(begin < end, "tokenize: prompt is empty");

    TokenizeResult res;
    res.ids.push_back(kBosId);
    for (size_t i = begin; i < end; ++i) {
        if (static_cast<int>(res.ids.size()) >= max_seq_len) {
            res.truncated = true;
            break;
        }
        res.ids.push_back(static_cast<int>(static_cast<unsigned char>(prompt[i])));
    }
    return res;
}

uint64_t prompt_digest(const std::string& prompt) { return fnv1a64(prompt); }

LlmWeights LlmWeights::init(const LlmConfig& cfg, Rng& rng) {
    cfg.validate();
    LlmWeights w;
    w.cfg = cfg;
    const int d = cfg.hidden_dim, f = cfg.ffn_dim();
    const float attn_std = 1.0f / std::sqrt(static_cast<float>(d));
    const float out_std = attn_std / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
    w.tok_embed = Tensor::randn({cfg.vocab_size, d}, rng, 0.02f);
    for (int l = 0; l < cfg.n_layers; ++l) {
        BlockWeights b;
        b.attn_norm_gain = Tensor::full({d}, 1.0f);
        b.wq = Tensor::randn({d, d}, rng, attn_std);
        b.wk = Tensor::randn({d, d}, rng, attn_std);
        b.wv = Tensor::randn({d, d}, rng, attn_std);
        b.wo = Tensor::randn({d, d}, rng, out_std);
        b.ffn_norm_gain = Tensor::full({d}, 1.0f);
        b.w_gate = Tensor::randn({d, f}, rng, attn_std);
        b.w_up = Tensor::randn({d, f}, rng, attn_std);
        b.w_down = Tensor::randn({f, d}, rng, 1.0f / std::sqrt(static_cast<float>(f)) /
                                                   std::sqrt(2.0f * static_cast<float>(cfg.n_layers)));
        w.blocks.push_back(std::move(b));
    }
    w.final_norm_gain = Tensor::full({d}, 1.0f);
    w.lm_head = Tensor::randn({d, cfg.vocab_size}, rng, 0.02f);
    return w;
}

std::vector<std::pair<std::string, Tensor>> LlmWeights::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("llm.tok_embed", tok_embed);
    for (size_t l = 0; l < blocks.size(); ++l) {
        auto& b = blocks[l];
        const std::string p = "llm.block" + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm_gain", b.attn_norm_gain);
        out.emplace_back(p + "wq", b.wq);
        out.emplace_back(p + "wk", b.wk);
        out.emplace_back(p + "wv", b.wv);
        out.emplace_back(p + "wo", b.wo);
        out.emplace_back(p + "ffn_norm_gain", b.ffn_norm_gain);
        out.emplace_back(p + "w_gate", b.w_gate);
        out.emplace_back(p + "w_up", b.w_up);
        out.emplace_back(p + "w_down", b.w_down);
    }
    out.emplace_back("llm.final_norm_gain", final_norm_gain);
    out.emplace_back("llm.lm_head", lm_head);
    return out;
}

void LlmWeights::set_requires_grad(bool b) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(b);
}

void LlmWeights::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

uint64_t LlmWeights::checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& [name, t] : const_cast<LlmWeights*>(this)->named_params()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.data(), sizeof(float) * static_cast<size_t>(t.numel()), h);
    }
    return h;
}

namespace {

// One pre-norm block: causal rotary attention then gated feed-forward, both
// with residual adds.
Tensor llm_block(Tape* tape, const Tensor& x, const BlockWeights& b, const LlmConfig& cfg,
                 const std::vector<float>& pos_ids) {
    const int T = x.dim(0), d = cfg.hidden_dim, H = cfg.n_heads, hd = cfg.head_dim();
    const std::vector<float> zero_ids(static_cast<size_t>(T), 0.0f);

    Tensor h = rmsnorm(tape, x, b.attn_norm_gain, kNormEps);
    Tensor q = rope_apply_ids(tape, matmul(tape, h, b.wq), pos_ids, zero_ids, H);
    Tensor k = rope_apply_ids(tape, matmul(tape, h, b.wk), pos_ids, zero_ids, H);
    Tensor v = matmul(tape, h, b.wv);

    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(hd));
    Tensor merged;
    for (int head = 0; head < H; ++head) {
        Tensor qh = slice_cols(tape, q, head * hd, (head + 1) * hd);
        Tensor kh = slice_cols(tape, k, head * hd, (head + 1) * hd);
        Tensor vh = slice_cols(tape, v, head * hd, (head + 1) * hd);
        Tensor scores = scale(tape, matmul_nt(tape, qh, kh), inv_scale);
        Tensor probs = causal_softmax(tape, scores);
        Tensor oh = matmul(tape, probs, vh);
        merged = head == 0 ? oh : concat_cols(tape, merged, oh);
    }
    Tensor attn = matmul(tape, merged, b.wo);
    Tensor x1 = add(tape, x, attn);

    Tensor h2 = rmsnorm(tape, x1, b.ffn_norm_gain, kNormEps);
    Tensor gate = silu(tape, matmul(tape, h2, b.w_gate));
    Tensor up = matmul(tape, h2, b.w_up);
    Tensor ffn = matmul(tape, mul(tape, gate, up), b.w_down);
    (void)d;
    return add(tape, x1, ffn);
}

Tensor run_blocks(Tape* tape, const std::vector<int>& tokens, const LlmWeights& w,
                  std::vector<Tensor>* slabs) {
    const auto& cfg = w.cfg;
    check(!tokens.empty(), "llm: empty token sequence");
    check(static_cast<int>(tokens.size()) <= cfg.max_seq_len, "llm: sequence too long");
    for (int t : tokens)
        check(t >= 0 && t < cfg.vocab_size, "llm: token id out of vocabulary");

    const int T = static_cast<int>(tokens.size());
    std::vector<float> pos_ids(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) pos_ids[static_cast<size_t>(t)] = static_cast<float>(t);

    Tensor x = gather_rows(tape, w.tok_embed, tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        x = llm_block(tape, x, w.blocks[static_cast<size_t>(l)], cfg, pos_ids);
        if (slabs) slabs->push_back(x);
    }
    return x;
}

}  // namespace

TextContext forward_collect(const std::vector<int>& tokens, const LlmWeights& w) {
    TextContext ctx;
    run_blocks(nullptr, tokens, w, &ctx.hidden);
    ctx.token_count = static_cast<int>(tokens.size());
    for (const auto& slab : ctx.hidden)
        check(slab.all_finite(), "forward_collect: non-finite hidden state");
    return ctx;
}

Scalar next_token_loss(Tape* tape, const std::vector<int>& tokens, const LlmWeights& w) {
    check(tokens.size() >= 2, "next_token_loss: need at least 2 tokens");
    Tensor x = run_blocks(tape, tokens, w, nullptr);
    Tensor hn = rmsnorm(tape, x, w.final_norm_gain, kNormEps);
    Tensor logits = matmul(tape, hn, w.lm_head);
    const int T = static_cast<int>(tokens.size());
    Tensor pred = slice_rows(tape, logits, 0, T - 1);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    return cross_entropy_rows(tape, pred, targets);
}

TextContext ContextCache::get_or_compute(const std::string& prompt, const LlmWeights& w) {
    const uint64_t digest = prompt_digest(prompt);
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = entries_.find(digest);
        if (it != entries_.end()) return it->second;
    }
    TokenizeResult toks = tokenize(prompt, w.cfg.max_seq_len);
    TextContext ctx = forward_collect(toks.ids, w);
    ctx.digest = digest;
    {
        std::lock_guard<std::mutex> lock(mu_);
        if (entries_.size() >= max_entries_ && !order_.empty()) {
            entries_.erase(order_.front());
            order_.erase(order_.begin());
        }
        auto [it, inserted] = entries_.emplace(digest, ctx);
        if (inserted) order_.push_back(digest);
        return it->second;
    }
}

size_t ContextCache::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
}

void ContextCache::clear() {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.clear();
    order_.clear();
}

}  // namespace t2i::llm
