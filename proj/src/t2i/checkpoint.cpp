#include "checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace t2i::ckpt {

using nlohmann::json;

namespace {
constexpr char kMagic[] = "T2I_CKPT_V1";

uint32_t payload_crc(const Tensor& t) {
    return static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(t.data()),
                static_cast<uInt>(sizeof(float) * static_cast<size_t>(t.numel()))));
}
}  // namespace

void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& tensors, uint64_t step,
                     const std::string& config_digest, const std::string& path) {
    json manifest;
    manifest["step"] = step;
    manifest["config_digest"] = config_digest;
    manifest["tensors"] = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        const uint64_t nbytes = sizeof(float) * static_cast<uint64_t>(t.numel());
        e["nbytes"] = nbytes;
        e["crc32"] = payload_crc(t);
        manifest["tensors"].push_back(e);
        offset += nbytes;
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    out << kMagic << "\n" << manifest.dump() << '\0';
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.numel())));
    if (!out.good()) throw std::runtime_error("checkpoint: write failed: " + path);
}

namespace {

Manifest parse_manifest(std::istream& in, const std::string& path) {
    std::string magic;
    std::getline(in, magic);
    if (magic != kMagic) throw std::runtime_error("checkpoint: bad magic in " + path);
    std::string jtext;
    std::getline(in, jtext, '\0');
    if (!in.good()) throw std::runtime_error("checkpoint: truncated manifest in " + path);
    json j = json::parse(jtext);
    Manifest m;
    m.step = j.at("step").get<uint64_t>();
    m.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& e : j.at("tensors")) {
        TensorEntry te;
        te.name = e.at("name").get<std::string>();
        te.shape = e.at("shape").get<std::vector<int>>();
        te.offset = e.at("offset").get<uint64_t>();
        te.nbytes = e.at("nbytes").get<uint64_t>();
        te.crc32 = e.at("crc32").get<uint32_t>();
        m.tensors.push_back(std::move(te));
    }
    return m;
}

}  // namespace

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    return parse_manifest(in, path);
}

Loaded load_checkpoint(const std::string& path, const std::string& expect_digest, bool force) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    Loaded loaded;
    loaded.manifest = parse_manifest(in, path);
    if (!expect_digest.empty() && loaded.manifest.config_digest != expect_digest && !force)
        throw std::runtime_error("checkpoint: config digest mismatch (file " +
                                 loaded.manifest.config_digest + " vs current " + expect_digest +
                                 "); pass force to override");
    for (const auto& e : loaded.manifest.tensors) {
        Tensor t(e.shape);
        if (e.nbytes != sizeof(float) * static_cast<uint64_t>(t.numel()))
            throw std::runtime_error("checkpoint: size mismatch for tensor " + e.name);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(e.nbytes));
        if (in.gcount() != static_cast<std::streamsize>(e.nbytes))
            throw std::runtime_error("checkpoint: integrity error, truncated payload for " +
                                     e.name);
        if (payload_crc(t) != e.crc32)
            throw std::runtime_error("checkpoint: integrity error, checksum mismatch for " +
                                     e.name);
        loaded.tensors.emplace(e.name, std::move(t));
    }
    return loaded;
}

void bind_params(const Loaded& loaded, std::vector<std::pair<std::string, Tensor>> params) {
    for (auto& [name, t] : params) {
        auto it = loaded.tensors.find(name);
        if (it == loaded.tensors.end())
            throw std::runtime_error("checkpoint: missing tensor " + name);
        if (!(it->second.shape() == t.shape()))
            throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
        std::memcpy(t.data(), it->second.data(),
                    sizeof(float) * static_cast<size_t>(t.numel()));
    }
}

}  // namespace t2i::ckpt
