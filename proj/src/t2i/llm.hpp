#pragma once

#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace t2i::llm {

inline constexpr int kBosId = 256;
inline constexpr float kNormEps = 1e-5f;

struct LlmConfig {
    int n_layers = 8;
    int hidden_dim = 128;
    int n_heads = 4;
    int vocab_size = 257;
    int max_seq_len = 256;
    float ffn_mult = 8.0f / 3.0f;

    int head_dim() const { return hidden_dim / n_heads; }
    int ffn_dim() const { return static_cast<int>(ffn_mult * static_cast<float>(hidden_dim)); }
    void validate() const;
};

struct TokenizeResult {
    std::vector<int> ids;
    bool truncated = false;
};

// Byte-level tokenization: BOS then one id per UTF-8 byte. Prompts longer
// than max_seq_len are truncated with the flag set; prompts empty after
// whitespace trimming are rejected.
TokenizeResult tokenize(const std::string& prompt, int max_seq_len);

uint64_t prompt_digest(const std::string& prompt);

struct BlockWeights {
    Tensor attn_norm_gain;
    Tensor wq, wk, wv, wo;
    Tensor ffn_norm_gain;
    Tensor w_gate, w_up, w_down;
};

struct LlmWeights {
    LlmConfig cfg;
    Tensor tok_embed;  // [V x d]
    std::vector<BlockWeights> blocks;
    Tensor final_norm_gain;
    Tensor lm_head;  // [d x V]

    static LlmWeights init(const LlmConfig& cfg, Rng& rng);
    std::vector<std::pair<std::string, Tensor>> named_params();
    void set_requires_grad(bool b);
    void zero_grads();
    uint64_t checksum() const;
};

// Per-layer hidden states of one prompt: the post-block residual-stream
// output of every block, all [T x d]. Immutable once built.
struct TextContext {
    std::vector<Tensor> hidden;
    int token_count = 0;
    uint64_t digest = 0;
};

// Runs all blocks once and collects every block's output.
TextContext forward_collect(const std::vector<int>& tokens, const LlmWeights& w);

// Mean cross-entropy of position t predicting token t+1 from the final-layer
// logits. Differentiable through the whole stack when a tape is given.
Scalar next_token_loss(Tape* tape, const std::vector<int>& tokens, const LlmWeights& w);

// Digest-keyed cache so each prompt runs through the LLM once. Thread-safe
// for concurrent get_or_compute calls.
class ContextCache {
public:
    explicit ContextCache(size_t max_entries = 1 << 14) : max_entries_(max_entries) {}

    TextContext get_or_compute(const std::string& prompt, const LlmWeights& w);
    size_t size() const;
    void clear();

private:
    mutable std::mutex mu_;
    size_t max_entries_;
    std::unordered_map<uint64_t, TextContext> entries_;
    std::vector<uint64_t> order_;  // insertion order, for bounded eviction
};

}  // namespace t2i::llm
