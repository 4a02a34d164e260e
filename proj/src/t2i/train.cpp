#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace t2i::train {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Spike guard

void SpikeGuardConfig::validate() const {
    check(value_threshold > 0.0f, "spike guard: value_threshold must be positive");
    check(count_threshold >= 0, "spike guard: count_threshold must be >= 0");
    check(calibration_window >= 0, "spike guard: calibration_window must be >= 0");
}

SpikeDecision spike_guard(const std::vector<std::pair<std::string, Tensor>>& params,
                          const SpikeGuardConfig& cfg) {
    cfg.validate();
    SpikeDecision d;
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        const auto& g = t.grad();
        for (float v : g)
            if (!std::isfinite(v) || std::abs(v) > cfg.value_threshold) ++d.exceed_count;
    }
    d.discard = d.exceed_count > cfg.count_threshold;
    return d;
}

SpikeGuard::SpikeGuard(SpikeGuardConfig cfg) : cfg_(cfg) { cfg_.validate(); }

bool SpikeGuard::calibrating() const { return seen_ < 2 * cfg_.calibration_window; }

SpikeDecision SpikeGuard::observe(const std::vector<std::pair<std::string, Tensor>>& params) {
    const int w = cfg_.calibration_window;
    if (seen_ < w) {
        // phase 1: record the per-iteration 99.9th percentile of |g|
        std::vector<float> mags;
        for (const auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (float v : t.grad())
                mags.push_back(std::isfinite(v) ? std::abs(v)
                                                : std::numeric_limits<float>::infinity());
        }
        if (!mags.empty()) {
            const size_t idx = static_cast<size_t>(0.999 * static_cast<double>(mags.size() - 1));
            std::nth_element(mags.begin(), mags.begin() + static_cast<ptrdiff_t>(idx), mags.end());
            max_p999_ = std::max(max_p999_, mags[idx]);
        }
        ++seen_;
        if (seen_ == w && max_p999_ > 0.0f && std::isfinite(max_p999_))
            cfg_.value_threshold = 2.0f * max_p999_;
        return {false, 0};
    }
    if (seen_ < 2 * w) {
        // phase 2: record the largest exceed count at the calibrated value threshold
        SpikeDecision d = spike_guard(params, cfg_);
        max_count_ = std::max(max_count_, d.exceed_count);
        ++seen_;
        if (seen_ == 2 * w) cfg_.count_threshold = std::max<int64_t>(1, 2 * max_count_);
        return {false, d.exceed_count};
    }
    return spike_guard(params, cfg_);
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, float lr, float beta1, float beta2,
           float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
        m_.push_back(Tensor::zeros(t.shape()));
        v_.push_back(Tensor::zeros(t.shape()));
    }
}

void Adam::step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
        Tensor& t = params_[p].second;
        if (!t.has_grad()) continue;
        const auto& g = t.grad();
        Tensor& m = m_[p];
        Tensor& v = v_[p];
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i) {
            const float gi = g[static_cast<size_t>(i)];
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            t[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Adam::state_tensors() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t p = 0; p < params_.size(); ++p) {
        out.emplace_back("opt.m." + params_[p].first, m_[p]);
        out.emplace_back("opt.v." + params_[p].first, v_[p]);
    }
    Tensor step({1}, {static_cast<float>(t_)});
    out.emplace_back("opt.step", step);
    return out;
}

void Adam::load_state(const std::unordered_map<std::string, Tensor>& tensors) {
    for (size_t p = 0; p < params_.size(); ++p) {
        auto mit = tensors.find("opt.m." + params_[p].first);
        auto vit = tensors.find("opt.v." + params_[p].first);
        if (mit == tensors.end() || vit == tensors.end())
            throw std::runtime_error("adam: missing optimizer state for " + params_[p].first);
        m_[p] = mit->second.clone();
        v_[p] = vit->second.clone();
    }
    auto sit = tensors.find("opt.step");
    if (sit != tensors.end()) t_ = static_cast<int64_t>(sit->second[0]);
}

float global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params) {
    double acc = 0.0;
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (float g : t.grad()) acc += static_cast<double>(g) * g;
    }
    return static_cast<float>(std::sqrt(acc));
}

void scale_grads(const std::vector<std::pair<std::string, Tensor>>& params, float s) {
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        Tensor tt = t;
        for (auto& g : tt.grad()) g *= s;
    }
}

// ---------------------------------------------------------------------------
// Bucketing

int bucket_for(int h, int w, const std::vector<std::pair<int, int>>& buckets) {
    check(!buckets.empty(), "bucketize: bucket list must be non-empty");
    const double a = std::log(static_cast<double>(h) / static_cast<double>(w));
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < buckets.size(); ++i) {
        const double b =
            std::log(static_cast<double>(buckets[i].first) / static_cast<double>(buckets[i].second));
        const double d = std::abs(a - b);
        if (d < best_d) {  // strict: ties keep the earlier bucket
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

std::vector<int> bucketize(const std::vector<std::pair<int, int>>& item_dims,
                           const std::vector<std::pair<int, int>>& buckets) {
    std::vector<int> ids;
    ids.reserve(item_dims.size());
    for (const auto& [h, w] : item_dims) ids.push_back(bucket_for(h, w, buckets));
    return ids;
}

BucketBatcher::BucketBatcher(std::vector<int> bucket_ids, int n_buckets, int batch_size)
    : batch_size_(batch_size) {
    check(batch_size >= 1, "batcher: batch_size must be >= 1");
    by_bucket_.assign(static_cast<size_t>(n_buckets), {});
    for (size_t i = 0; i < bucket_ids.size(); ++i) {
        const int b = bucket_ids[i];
        check(b >= 0 && b < n_buckets, "batcher: bucket id out of range");
        by_bucket_[static_cast<size_t>(b)].push_back(static_cast<int>(i));
    }
}

std::vector<std::vector<int>> BucketBatcher::epoch(Rng& rng) const {
    std::vector<std::vector<int>> batches;
    for (const auto& bucket : by_bucket_) {
        std::vector<int> order = bucket;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size_)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size_));
            batches.emplace_back(order.begin() + static_cast<ptrdiff_t>(start),
                                 order.begin() + static_cast<ptrdiff_t>(end));
        }
    }
    for (size_t i = batches.size(); i > 1; --i)
        std::swap(batches[i - 1], batches[rng.below(i)]);
    return batches;
}

// ---------------------------------------------------------------------------
// Traces

void write_trace(const std::string& path, const std::vector<StepRecord>& trace) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("trace: cannot open for writing: " + path);
    for (const auto& r : trace) {
        json j;
        j["step"] = r.step;
        j["loss"] = r.loss;
        j["sigma_mean"] = r.sigma_mean;
        j["exceed_count"] = r.exceed_count;
        j["decision"] = r.decision;
        out << j.dump() << "\n";
    }
}

std::vector<StepRecord> read_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("trace: cannot open: " + path);
    std::vector<StepRecord> trace;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        StepRecord r;
        r.step = j.at("step").get<int64_t>();
        r.loss = j.at("loss").get<double>();
        r.sigma_mean = j.at("sigma_mean").get<double>();
        r.exceed_count = j.at("exceed_count").get<int64_t>();
        r.decision = j.at("decision").get<std::string>();
        trace.push_back(std::move(r));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Shared step machinery

void TrainConfig::validate() const {
    check(batch_size >= 1, "train config: batch_size must be >= 1");
    check(lr > 0.0f, "train config: lr must be positive");
    check(total_steps >= 1, "train config: total_steps must be >= 1");
    check(!buckets.empty(), "train config: bucket list must be non-empty");
    check(fault_prob >= 0.0f && fault_prob <= 1.0f, "train config: fault_prob in [0,1]");
}

namespace {

// One guarded optimizer step over already-populated grads. Returns the guard
// decision after optional fault injection and clipping.
SpikeDecision guarded_step(std::vector<std::pair<std::string, Tensor>>& params, Adam& adam,
                           SpikeGuard& guard, const TrainConfig& tc, Rng& fault_rng,
                           TrainResult& result) {
    bool injected = false;
    if (tc.fault_prob > 0.0f && fault_rng.uniform() < tc.fault_prob) {
        scale_grads(params, tc.fault_scale);
        injected = true;
        ++result.injected;
    }
    SpikeDecision d = guard.observe(params);
    if (d.discard) {
        ++result.discarded;
        if (injected) ++result.injected_discarded;
        adam.zero_grad();
        return d;
    }
    if (tc.grad_clip_norm > 0.0f) {
        const float norm = global_grad_norm(params);
        if (norm > tc.grad_clip_norm) scale_grads(params, tc.grad_clip_norm / norm);
    }
    adam.step();
    adam.zero_grad();
    return d;
}

}  // namespace

Tensor downscale_image(const Tensor& image, int factor) {
    check(image.rank() == 3, "downscale: expected [C x H x W]");
    check(factor >= 1 && (factor & (factor - 1)) == 0, "downscale: factor must be a power of two");
    Tensor out = image;
    for (int f = factor; f > 1; f /= 2) {
        const int C = out.dim(0), H = out.dim(1), W = out.dim(2);
        check(H % 2 == 0 && W % 2 == 0, "downscale: dims must stay even");
        Tensor next({C, H / 2, W / 2});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / 2; ++y)
                for (int x = 0; x < W / 2; ++x) {
                    const float* base = out.data() + (static_cast<size_t>(c) * H + 2 * y) * W + 2 * x;
                    next[(static_cast<int64_t>(c) * (H / 2) + y) * (W / 2) + x] =
                        0.25f * (base[0] + base[1] + base[W] + base[W + 1]);
                }
        out = next;
    }
    return out;
}

// ---------------------------------------------------------------------------
// LLM pretraining

TrainResult train_llm(const std::vector<scene::SceneItem>& items, llm::LlmWeights& weights,
                      const TrainConfig& tc, const SpikeGuardConfig& gc) {
    tc.validate();
    check(!items.empty(), "train_llm: empty dataset");
    std::vector<std::vector<int>> sequences;
    for (const auto& item : items)
        for (const auto& cap : item.captions) {
            auto toks = llm::tokenize(cap, weights.cfg.max_seq_len);
            if (toks.ids.size() >= 2) sequences.push_back(std::move(toks.ids));
        }
    check(!sequences.empty(), "train_llm: no usable sequences");

    weights.set_requires_grad(true);
    auto params = weights.named_params();
    Adam adam(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    SpikeGuard guard(gc);
    Rng batch_rng = derive_rng(tc.seed, "llm-batches");
    Rng fault_rng = derive_rng(tc.seed, "llm-faults");

    TrainResult result;
    double best_smoothed = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<double> window;

    for (int step = 0; step < tc.total_steps; ++step) {
        Tape tape;
        Scalar total;
        for (int b = 0; b < tc.batch_size; ++b) {
            const auto& seq = sequences[batch_rng.below(sequences.size())];
            Scalar l = llm::next_token_loss(&tape, seq, weights);
            total = b == 0 ? l : scalar_add(&tape, total, l);
        }
        Scalar loss = scalar_scale(&tape, total, 1.0 / static_cast<double>(tc.batch_size));
        backward(tape, loss);

        SpikeDecision d = guarded_step(params, adam, guard, tc, fault_rng, result);
        result.trace.push_back({step, loss.value, 0.0, d.exceed_count,
                                d.discard ? "discard" : "apply"});
        ++result.steps_run;

        // plateau detection on the smoothed loss
        window.push_back(loss.value);
        if (static_cast<int>(window.size()) > tc.plateau_window)
            window.erase(window.begin());
        if (static_cast<int>(window.size()) == tc.plateau_window) {
            double sm = 0.0;
            for (double v : window) sm += v;
            sm /= static_cast<double>(window.size());
            if (sm < best_smoothed * (1.0 - static_cast<double>(tc.plateau_rel_tol))) {
                best_smoothed = sm;
                since_best = 0;
            } else if (++since_best >= tc.plateau_patience) {
                break;
            }
        }
    }
    result.opt_state = adam.state_tensors();
    weights.set_requires_grad(false);
    weights.zero_grads();
    return result;
}

// ---------------------------------------------------------------------------
// VAE training

TrainResult train_vae(const std::vector<scene::SceneItem>& items, vae::VaeWeights& weights,
                      const TrainConfig& tc, const SpikeGuardConfig& gc) {
    tc.validate();
    check(!items.empty(), "train_vae: empty dataset");
    check(!tc.resolution_stages.empty(), "train_vae: resolution stage list must be non-empty");

    // every stage must be reachable from the native resolution by exact
    // power-of-two average pooling
    for (int stage : tc.resolution_stages) {
        for (const auto& item : items) {
            const int h = item.image.dim(1);
            check(h % stage == 0 && ((h / stage) & (h / stage - 1)) == 0,
                  "train_vae: unreachable resolution stage " + std::to_string(stage));
        }
    }

    weights.set_requires_grad(true);
    auto params = weights.named_params();
    Adam adam(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    SpikeGuard guard(gc);
    Rng batch_rng = derive_rng(tc.seed, "vae-batches");
    Rng noise_rng = derive_rng(tc.seed, "vae-noise");
    Rng fault_rng = derive_rng(tc.seed, "vae-faults");

    TrainResult result;
    const int n_stages = static_cast<int>(tc.resolution_stages.size());
    const int per_stage = tc.total_steps / n_stages;
    int64_t step = 0;
    for (int si = 0; si < n_stages; ++si) {
        const int res = tc.resolution_stages[static_cast<size_t>(si)];
        const int stage_steps =
            si + 1 == n_stages ? tc.total_steps - per_stage * (n_stages - 1) : per_stage;
        // stage images, downscaled once
        std::vector<Tensor> stage_images;
        stage_images.reserve(items.size());
        for (const auto& item : items)
            stage_images.push_back(downscale_image(item.image, item.image.dim(1) / res));

        for (int s = 0; s < stage_steps; ++s, ++step) {
            Tape tape;
            Scalar total;
            for (int b = 0; b < tc.batch_size; ++b) {
                const auto& img = stage_images[batch_rng.below(stage_images.size())];
                vae::VaeLoss l = vae::vae_loss(&tape, img, noise_rng, weights);
                total = b == 0 ? l.total : scalar_add(&tape, total, l.total);
            }
            Scalar loss = scalar_scale(&tape, total, 1.0 / static_cast<double>(tc.batch_size));
            backward(tape, loss);

            SpikeDecision d = guarded_step(params, adam, guard, tc, fault_rng, result);
            result.trace.push_back({step, loss.value, 0.0, d.exceed_count,
                                    d.discard ? "discard" : "apply"});
            ++result.steps_run;
        }
    }
    result.opt_state = adam.state_tensors();
    weights.set_requires_grad(false);
    weights.zero_grads();
    return result;
}

// ---------------------------------------------------------------------------
// DiT training

TrainResult train_dit(const std::vector<scene::SceneItem>& items, dit::DitWeights& weights,
                      const llm::LlmWeights& frozen_llm, const vae::VaeWeights& frozen_vae,
                      const edm::EdmConfig& ec, const TrainConfig& tc,
                      const SpikeGuardConfig& gc) {
    tc.validate();
    ec.validate();
    check(!items.empty(), "train_dit: empty dataset");
    weights.cfg.validate_against(frozen_llm.cfg);
    check(weights.cfg.latent_channels == frozen_vae.cfg.latent_channels,
          "config: DiT latent_channels must equal VAE latent_channels");

    // clean latents: encode() means, globally scaled to sigma_data std
    std::vector<Tensor> latents;
    latents.reserve(items.size());
    double sq = 0.0, mn = 0.0;
    int64_t count = 0;
    for (const auto& item : items) {
        auto [mean, logvar] = vae::encode(nullptr, item.image, frozen_vae);
        for (int64_t i = 0; i < mean.numel(); ++i) {
            sq += static_cast<double>(mean[i]) * mean[i];
            mn += mean[i];
            ++count;
        }
        latents.push_back(std::move(mean));
    }
    const double var =
        sq / static_cast<double>(count) - (mn / static_cast<double>(count)) * (mn / static_cast<double>(count));
    const float latent_scale =
        var > 1e-12 ? static_cast<float>(static_cast<double>(ec.sigma_data) / std::sqrt(var)) : 1.0f;
    weights.latent_scale[0] = latent_scale;
    for (auto& l : latents)
        for (int64_t i = 0; i < l.numel(); ++i) l[i] *= latent_scale;

    // text contexts for every (item, caption level), deduplicated by digest
    llm::ContextCache cache(1 << 16);
    for (const auto& item : items)
        for (const auto& cap : item.captions) cache.get_or_compute(cap, frozen_llm);

    // single-bucket batches by aspect ratio
    std::vector<std::pair<int, int>> dims;
    dims.reserve(items.size());
    for (const auto& item : items) dims.emplace_back(item.image.dim(1), item.image.dim(2));
    BucketBatcher batcher(bucketize(dims, tc.buckets), static_cast<int>(tc.buckets.size()),
                          tc.batch_size);

    weights.set_requires_grad(true);
    auto all_params = weights.named_params();
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& p : all_params)
        if (p.first != "dit.latent_scale") params.push_back(p);
    Adam adam(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    SpikeGuard guard(gc);
    Rng batch_rng = derive_rng(tc.seed, "dit-batches");
    Rng level_rng = derive_rng(tc.seed, "dit-levels");
    Rng noise_rng = derive_rng(tc.seed, "dit-noise");
    Rng fault_rng = derive_rng(tc.seed, "dit-faults");

    TrainResult result;
    std::vector<std::vector<int>> batches;
    size_t batch_idx = 0;
    for (int step = 0; step < tc.total_steps; ++step) {
        if (batch_idx >= batches.size()) {
            batches = batcher.epoch(batch_rng);
            batch_idx = 0;
        }
        const auto& batch = batches[batch_idx++];

        Tape tape;
        Scalar total;
        double sigma_sum = 0.0;
        for (size_t b = 0; b < batch.size(); ++b) {
            const auto& item = items[static_cast<size_t>(batch[b])];
            const int level = scene::sample_caption_index(level_rng);
            ++result.level_counts[static_cast<size_t>(level)];
            llm::TextContext ctx =
                cache.get_or_compute(item.captions[static_cast<size_t>(level)], frozen_llm);
            const Tensor& latent = latents[static_cast<size_t>(batch[b])];
            edm::FthetaFn f = [&](Tape* t, const Tensor& x_in, float sigma) {
                return dit::denoiser_forward(t, x_in, sigma, ctx, weights);
            };
            edm::LossInfo li = edm::training_loss(&tape, latent, noise_rng, ec, f);
            sigma_sum += li.sigma;
            total = b == 0 ? li.loss : scalar_add(&tape, total, li.loss);
        }
        Scalar loss = scalar_scale(&tape, total, 1.0 / static_cast<double>(batch.size()));
        backward(tape, loss);

        SpikeDecision d = guarded_step(params, adam, guard, tc, fault_rng, result);
        result.trace.push_back({step, loss.value, sigma_sum / static_cast<double>(batch.size()),
                                d.exceed_count, d.discard ? "discard" : "apply"});
        ++result.steps_run;
    }
    result.opt_state = adam.state_tensors();
    weights.set_requires_grad(false);
    weights.zero_grads();
    return result;
}

}  // namespace t2i::train
