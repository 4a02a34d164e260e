#pragma once

#include <string>
#include <vector>

#include "dit.hpp"
#include "edm.hpp"
#include "llm.hpp"
#include "train.hpp"
#include "vae.hpp"

namespace t2i::cfg {

struct DataConfig {
    int n_items = 512;
    int resolution = 64;
    uint64_t seed = 0;
    // extra aspect ratios emitted alongside the square set, as "4:3" / "3:4"
    std::vector<std::string> aspects;
};

struct SampleConfig {
    int steps = 32;
    edm::Sampler sampler = edm::Sampler::heun;
    int grid_h = 8;  // latent grid; image is spatial_down times larger
    int grid_w = 8;
    uint64_t seed = 0;
};

struct RunConfig {
    std::string out_dir = "runs/default";
    std::string llm_init_mode = "pretrained";  // or "random-frozen"
    llm::LlmConfig llm;
    dit::DitConfig dit;
    vae::VaeConfig vae;
    edm::EdmConfig edm;
    train::SpikeGuardConfig guard;
    DataConfig data;
    SampleConfig sample;
    train::TrainConfig train_llm;
    train::TrainConfig train_vae;
    train::TrainConfig train_dit;

    // Cross-module invariants (DiT geometry mirrors the LLM; VAE channels
    // match the DiT latent). Throws std::invalid_argument naming the
    // violated invariant.
    void validate() const;

    // Digest over the model-defining sections (llm, dit, vae, sigma_data);
    // training/sampling knobs do not invalidate checkpoints.
    std::string model_digest() const;

    std::string checkpoint_path(const std::string& component) const;
};

RunConfig defaults();
RunConfig load_file(const std::string& path);          // defaults overlaid by file
void save_file(const RunConfig& cfg, const std::string& path);
std::string to_json(const RunConfig& cfg);
RunConfig from_json(const std::string& text);

// Applies one "dotted.key=value" override onto the JSON form.
void apply_override(std::string& json_text, const std::string& assignment);

}  // namespace t2i::cfg
