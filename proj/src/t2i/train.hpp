#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dit.hpp"
#include "edm.hpp"
#include "llm.hpp"
#include "scene.hpp"
#include "tensor.hpp"
#include "vae.hpp"

namespace t2i::train {

// ---------------------------------------------------------------------------
// Spike guard

struct SpikeGuardConfig {
    float value_threshold = 10.0f;
    int64_t count_threshold = 10;
    int calibration_window = 0;  // > 0 enables two-phase auto calibration

    void validate() const;
};

struct SpikeDecision {
    bool discard = false;
    int64_t exceed_count = 0;
};

// Stateless rule: count gradient elements with |g| > value_threshold (NaN and
// Inf count as exceedances); discard iff count > count_threshold.
SpikeDecision spike_guard(const std::vector<std::pair<std::string, Tensor>>& params,
                          const SpikeGuardConfig& cfg);

// Calibrating wrapper. With calibration_window W: the first W iterations set
// value_threshold to 2x the largest per-iteration 99.9th percentile of |g|;
// the next W set count_threshold to 2x the largest exceed count. All
// calibration iterations apply.
class SpikeGuard {
public:
    explicit SpikeGuard(SpikeGuardConfig cfg);
    SpikeDecision observe(const std::vector<std::pair<std::string, Tensor>>& params);
    const SpikeGuardConfig& config() const { return cfg_; }
    bool calibrating() const;

private:
    SpikeGuardConfig cfg_;
    int seen_ = 0;
    float max_p999_ = 0.0f;
    int64_t max_count_ = 0;
};

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, float lr, float beta1 = 0.9f,
         float beta2 = 0.95f, float eps = 1e-8f);

    void step();  // applies one update from the current grads
    void zero_grad();
    int64_t steps_taken() const { return t_; }
    void set_lr(float lr) { lr_ = lr; }

    // Moments and step counter for checkpointing (names prefixed "opt.").
    std::vector<std::pair<std::string, Tensor>> state_tensors();
    void load_state(const std::unordered_map<std::string, Tensor>& tensors);

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<Tensor> m_, v_;
    float lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

float global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params);
void scale_grads(const std::vector<std::pair<std::string, Tensor>>& params, float s);

// ---------------------------------------------------------------------------
// Aspect-ratio bucketing

// Index of the bucket minimizing |log(h/w) - log(bh/bw)|; ties break toward
// the earlier bucket.
int bucket_for(int h, int w, const std::vector<std::pair<int, int>>& buckets);
std::vector<int> bucketize(const std::vector<std::pair<int, int>>& item_dims,
                           const std::vector<std::pair<int, int>>& buckets);

// Deterministic single-bucket batches: items shuffle within their bucket and
// the batch order shuffles across buckets.
class BucketBatcher {
public:
    BucketBatcher(std::vector<int> bucket_ids, int n_buckets, int batch_size);
    // fresh epoch of batches (each a list of item indices)
    std::vector<std::vector<int>> epoch(Rng& rng) const;

private:
    std::vector<std::vector<int>> by_bucket_;
    int batch_size_;
};

// ---------------------------------------------------------------------------
// Training loops

struct TrainConfig {
    int batch_size = 8;
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float adam_eps = 1e-8f;
    int total_steps = 1000;
    float grad_clip_norm = 0.0f;  // 0 disables clipping
    uint64_t seed = 0;
    std::vector<std::pair<int, int>> buckets = {{64, 64}};
    std::vector<int> resolution_stages = {32, 64};
    // chaos knobs for stability testing: with probability fault_prob a step's
    // gradients are scaled by fault_scale before the guard sees them
    float fault_prob = 0.0f;
    float fault_scale = 1.0f;
    // plateau detection (LLM pretraining)
    int plateau_window = 50;
    int plateau_patience = 200;
    float plateau_rel_tol = 0.005f;

    void validate() const;
};

struct StepRecord {
    int64_t step = 0;
    double loss = 0.0;
    double sigma_mean = 0.0;
    int64_t exceed_count = 0;
    std::string decision;  // "apply" | "discard"
};

void write_trace(const std::string& path, const std::vector<StepRecord>& trace);
std::vector<StepRecord> read_trace(const std::string& path);

struct TrainResult {
    std::vector<StepRecord> trace;
    int64_t steps_run = 0;
    int64_t discarded = 0;
    int64_t injected = 0;
    int64_t injected_discarded = 0;
    std::vector<int64_t> level_counts = std::vector<int64_t>(6, 0);  // caption levels (DiT)
    // optimizer moments and step counter, for checkpointing
    std::vector<std::pair<std::string, Tensor>> opt_state;
};

// Exact 2x2 average downscale (factor must be a power of two).
Tensor downscale_image(const Tensor& image, int factor);

// Next-token pretraining over all captions of the corpus; stops early at a
// loss plateau. The guard runs but with permissive defaults unless provided.
TrainResult train_llm(const std::vector<scene::SceneItem>& items, llm::LlmWeights& weights,
                      const TrainConfig& tc, const SpikeGuardConfig& gc);

// Progressive-resolution VAE training (stage r trains on images downscaled to
// r; weights carry over between stages).
TrainResult train_vae(const std::vector<scene::SceneItem>& items, vae::VaeWeights& weights,
                      const TrainConfig& tc, const SpikeGuardConfig& gc);

// EDM training of the DiT against frozen LLM and VAE. Latents are encode()
// means scaled so their std matches sigma_data; the scale is stored in
// weights.latent_scale.
TrainResult train_dit(const std::vector<scene::SceneItem>& items, dit::DitWeights& weights,
                      const llm::LlmWeights& frozen_llm, const vae::VaeWeights& frozen_vae,
                      const edm::EdmConfig& ec, const TrainConfig& tc, const SpikeGuardConfig& gc);

}  // namespace t2i::train
