#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace t2i::ckpt {

struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset = 0;  // into the payload section
    uint64_t nbytes = 0;
    uint32_t crc32 = 0;
};

struct Manifest {
    uint64_t step = 0;
    std::string config_digest;
    std::vector<TensorEntry> tensors;
};

// File layout: magic line, JSON manifest, NUL separator, then raw
// little-endian float32 payloads in manifest order.
void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& tensors, uint64_t step,
                     const std::string& config_digest, const std::string& path);

struct Loaded {
    Manifest manifest;
    std::unordered_map<std::string, Tensor> tensors;
};

// Verifies per-tensor checksums; refuses a config-digest mismatch unless
// forced. expect_digest empty skips the digest comparison.
Loaded load_checkpoint(const std::string& path, const std::string& expect_digest = "",
                       bool force = false);

Manifest read_manifest(const std::string& path);

// Assigns loaded tensors into named parameters (by name, with shape check).
void bind_params(const Loaded& loaded, std::vector<std::pair<std::string, Tensor>> params);

}  // namespace t2i::ckpt
