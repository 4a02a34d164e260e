#include "config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace t2i::cfg {

using nlohmann::json;

namespace {

json train_to_json(const train::TrainConfig& t) {
    json j;
    j["batch_size"] = t.batch_size;
    j["lr"] = t.lr;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["adam_eps"] = t.adam_eps;
    j["total_steps"] = t.total_steps;
    j["grad_clip_norm"] = t.grad_clip_norm;
    j["seed"] = t.seed;
    json buckets = json::array();
    for (const auto& [h, w] : t.buckets) buckets.push_back({h, w});
    j["buckets"] = buckets;
    j["resolution_stages"] = t.resolution_stages;
    j["fault_prob"] = t.fault_prob;
    j["fault_scale"] = t.fault_scale;
    j["plateau_window"] = t.plateau_window;
    j["plateau_patience"] = t.plateau_patience;
    j["plateau_rel_tol"] = t.plateau_rel_tol;
    return j;
}

train::TrainConfig train_from_json(const json& j) {
    train::TrainConfig t;
    t.batch_size = j.at("batch_size").get<int>();
    t.lr = j.at("lr").get<float>();
    t.beta1 = j.at("beta1").get<float>();
    t.beta2 = j.at("beta2").get<float>();
    t.adam_eps = j.at("adam_eps").get<float>();
    t.total_steps = j.at("total_steps").get<int>();
    t.grad_clip_norm = j.at("grad_clip_norm").get<float>();
    t.seed = j.at("seed").get<uint64_t>();
    t.buckets.clear();
    for (const auto& b : j.at("buckets"))
        t.buckets.emplace_back(b.at(0).get<int>(), b.at(1).get<int>());
    t.resolution_stages = j.at("resolution_stages").get<std::vector<int>>();
    t.fault_prob = j.at("fault_prob").get<float>();
    t.fault_scale = j.at("fault_scale").get<float>();
    t.plateau_window = j.at("plateau_window").get<int>();
    t.plateau_patience = j.at("plateau_patience").get<int>();
    t.plateau_rel_tol = j.at("plateau_rel_tol").get<float>();
    return t;
}

}  // namespace

RunConfig defaults() {
    RunConfig c;
    c.train_llm.batch_size = 8;
    c.train_llm.lr = 1e-3f;
    c.train_llm.total_steps = 1500;
    c.train_vae.batch_size = 4;
    c.train_vae.lr = 1e-3f;
    c.train_vae.total_steps = 1400;
    c.train_dit.batch_size = 8;
    c.train_dit.lr = 2e-3f;
    c.train_dit.total_steps = 6000;
    return c;
}

void RunConfig::validate() const {
    llm.validate();
    dit.validate_against(llm);
    vae.validate();
    edm.validate();
    guard.validate();
    train_llm.validate();
    train_vae.validate();
    train_dit.validate();
    check(dit.latent_channels == vae.latent_channels,
          "config: DiT latent_channels must equal VAE latent_channels");
    check(data.n_items >= 1, "config: data.n_items must be >= 1");
    check(data.resolution % vae.spatial_down == 0,
          "config: data.resolution must divide by vae.spatial_down");
    check(sample.steps >= 1, "config: sample.steps must be >= 1");
    check(sample.grid_h >= 1 && sample.grid_w >= 1, "config: sample grid must be positive");
    check(sample.grid_h % dit.patch_size == 0 && sample.grid_w % dit.patch_size == 0,
          "config: sample grid must divide by dit.patch_size");
    check(llm_init_mode == "pretrained" || llm_init_mode == "random-frozen",
          "config: llm_init_mode must be 'pretrained' or 'random-frozen'");
}

std::string to_json(const RunConfig& c) {
    json j;
    j["out_dir"] = c.out_dir;
    j["llm_init_mode"] = c.llm_init_mode;
    j["llm"] = {{"n_layers", c.llm.n_layers},       {"hidden_dim", c.llm.hidden_dim},
                {"n_heads", c.llm.n_heads},         {"vocab_size", c.llm.vocab_size},
                {"max_seq_len", c.llm.max_seq_len}, {"ffn_mult", c.llm.ffn_mult}};
    j["dit"] = {{"patch_size", c.dit.patch_size},
                {"latent_channels", c.dit.latent_channels},
                {"downsample_begin", c.dit.downsample_begin},
                {"downsample_end", c.dit.downsample_end},
                {"downsample_factor", c.dit.downsample_factor},
                {"pe_mode", dit::pe_mode_name(c.dit.pe_mode)},
                {"sigma_embed_dim", c.dit.sigma_embed_dim},
                {"ref_grid", c.dit.ref_grid}};
    j["vae"] = {{"latent_channels", c.vae.latent_channels},
                {"spatial_down", c.vae.spatial_down},
                {"base_width", c.vae.base_width},
                {"kl_weight", c.vae.kl_weight},
                {"resolutions", c.vae.resolutions}};
    j["edm"] = {{"sigma_data", c.edm.sigma_data},
                {"p_mean", c.edm.p_mean},
                {"p_std", c.edm.p_std},
                {"sigma_min", c.edm.sigma_min},
                {"sigma_max", c.edm.sigma_max},
                {"rho", c.edm.rho},
                {"n_steps", c.edm.n_steps},
                {"sampler", edm::sampler_name(c.edm.sampler)}};
    j["guard"] = {{"value_threshold", c.guard.value_threshold},
                  {"count_threshold", c.guard.count_threshold},
                  {"calibration_window", c.guard.calibration_window}};
    j["data"] = {{"n_items", c.data.n_items},
                 {"resolution", c.data.resolution},
                 {"seed", c.data.seed},
                 {"aspects", c.data.aspects}};
    j["sample"] = {{"steps", c.sample.steps},
                   {"sampler", edm::sampler_name(c.sample.sampler)},
                   {"grid_h", c.sample.grid_h},
                   {"grid_w", c.sample.grid_w},
                   {"seed", c.sample.seed}};
    j["train_llm"] = train_to_json(c.train_llm);
    j["train_vae"] = train_to_json(c.train_vae);
    j["train_dit"] = train_to_json(c.train_dit);
    return j.dump(2);
}

RunConfig from_json(const std::string& text) {
    // overlay the parsed document onto the defaults so every key is optional
    json base = json::parse(to_json(defaults()));
    json overlay = json::parse(text);
    base.merge_patch(overlay);
    const json& j = base;

    RunConfig c;
    c.out_dir = j.at("out_dir").get<std::string>();
    c.llm_init_mode = j.at("llm_init_mode").get<std::string>();
    const json& jl = j.at("llm");
    c.llm.n_layers = jl.at("n_layers").get<int>();
    c.llm.hidden_dim = jl.at("hidden_dim").get<int>();
    c.llm.n_heads = jl.at("n_heads").get<int>();
    c.llm.vocab_size = jl.at("vocab_size").get<int>();
    c.llm.max_seq_len = jl.at("max_seq_len").get<int>();
    c.llm.ffn_mult = jl.at("ffn_mult").get<float>();
    const json& jd = j.at("dit");
    c.dit.n_layers = c.llm.n_layers;
    c.dit.hidden_dim = c.llm.hidden_dim;
    c.dit.n_heads = c.llm.n_heads;
    c.dit.ffn_mult = c.llm.ffn_mult;
    c.dit.patch_size = jd.at("patch_size").get<int>();
    c.dit.latent_channels = jd.at("latent_channels").get<int>();
    c.dit.downsample_begin = jd.at("downsample_begin").get<int>();
    c.dit.downsample_end = jd.at("downsample_end").get<int>();
    c.dit.downsample_factor = jd.at("downsample_factor").get<int>();
    c.dit.pe_mode = dit::pe_mode_from_string(jd.at("pe_mode").get<std::string>());
    c.dit.sigma_embed_dim = jd.at("sigma_embed_dim").get<int>();
    c.dit.ref_grid = jd.at("ref_grid").get<int>();
    const json& jv = j.at("vae");
    c.vae.latent_channels = jv.at("latent_channels").get<int>();
    c.vae.spatial_down = jv.at("spatial_down").get<int>();
    c.vae.base_width = jv.at("base_width").get<int>();
    c.vae.kl_weight = jv.at("kl_weight").get<float>();
    c.vae.resolutions = jv.at("resolutions").get<std::vector<int>>();
    const json& je = j.at("edm");
    c.edm.sigma_data = je.at("sigma_data").get<float>();
    c.edm.p_mean = je.at("p_mean").get<float>();
    c.edm.p_std = je.at("p_std").get<float>();
    c.edm.sigma_min = je.at("sigma_min").get<float>();
    c.edm.sigma_max = je.at("sigma_max").get<float>();
    c.edm.rho = je.at("rho").get<float>();
    c.edm.n_steps = je.at("n_steps").get<int>();
    c.edm.sampler = edm::sampler_from_string(je.at("sampler").get<std::string>());
    const json& jg = j.at("guard");
    c.guard.value_threshold = jg.at("value_threshold").get<float>();
    c.guard.count_threshold = jg.at("count_threshold").get<int64_t>();
    c.guard.calibration_window = jg.at("calibration_window").get<int>();
    const json& jda = j.at("data");
    c.data.n_items = jda.at("n_items").get<int>();
    c.data.resolution = jda.at("resolution").get<int>();
    c.data.seed = jda.at("seed").get<uint64_t>();
    c.data.aspects = jda.at("aspects").get<std::vector<std::string>>();
    const json& js = j.at("sample");
    c.sample.steps = js.at("steps").get<int>();
    c.sample.sampler = edm::sampler_from_string(js.at("sampler").get<std::string>());
    c.sample.grid_h = js.at("grid_h").get<int>();
    c.sample.grid_w = js.at("grid_w").get<int>();
    c.sample.seed = js.at("seed").get<uint64_t>();
    c.train_llm = train_from_json(j.at("train_llm"));
    c.train_vae = train_from_json(j.at("train_vae"));
    c.train_dit = train_from_json(j.at("train_dit"));
    return c;
}

RunConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void save_file(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot open for writing: " + path);
    out << to_json(cfg) << "\n";
}

std::string RunConfig::model_digest() const {
    json j;
    j["llm"] = json::parse(to_json(*this)).at("llm");
    j["dit"] = json::parse(to_json(*this)).at("dit");
    j["vae"] = json::parse(to_json(*this)).at("vae");
    j["sigma_data"] = edm.sigma_data;
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return std::string(buf);
}

std::string RunConfig::checkpoint_path(const std::string& component) const {
    return out_dir + "/" + component + ".ckpt";
}

void apply_override(std::string& json_text, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("override must look like section.key=value: " + assignment);
    const std::string dotted = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json doc = json::parse(json_text);
    json* node = &doc;
    size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot - start);
        if (dot == std::string::npos) {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::parse_error&) {
                parsed = value;  // bare string
            }
            (*node)[key] = parsed;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
    json_text = doc.dump();
}

}  // namespace t2i::cfg
