#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "checkpoint.hpp"
#include "config.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "pipeline.hpp"
#include "scene.hpp"
#include "train.hpp"

namespace t2i::cli {

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

cfg::RunConfig resolve_config(const CommonOpts& o) {
    std::string text = o.config_path.empty()
                           ? cfg::to_json(cfg::defaults())
                           : cfg::to_json(cfg::load_file(o.config_path));
    for (const auto& assignment : o.overrides) cfg::apply_override(text, assignment);
    cfg::RunConfig c = cfg::from_json(text);
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    c.validate();
    return c;
}

void require_checkpoint(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw std::runtime_error("missing prerequisite: " + what + " checkpoint not found at " +
                                 path + " (run the corresponding train command first)");
}

llm::LlmWeights load_llm(const cfg::RunConfig& c) {
    require_checkpoint(c.checkpoint_path("llm"), "LLM");
    auto loaded = ckpt::load_checkpoint(c.checkpoint_path("llm"), c.model_digest());
    Rng rng(0);
    llm::LlmWeights w = llm::LlmWeights::init(c.llm, rng);
    ckpt::bind_params(loaded, w.named_params());
    return w;
}

vae::VaeWeights load_vae(const cfg::RunConfig& c, const std::string& path) {
    require_checkpoint(path, "VAE");
    auto loaded = ckpt::load_checkpoint(path, c.model_digest());
    Rng rng(0);
    vae::VaeWeights w = vae::VaeWeights::init(c.vae, rng);
    ckpt::bind_params(loaded, w.named_params());
    return w;
}

dit::DitWeights load_dit(const cfg::RunConfig& c) {
    require_checkpoint(c.checkpoint_path("dit"), "DiT");
    auto loaded = ckpt::load_checkpoint(c.checkpoint_path("dit"), c.model_digest());
    Rng rng(0);
    dit::DitWeights w = dit::DitWeights::init(c.dit, rng);
    ckpt::bind_params(loaded, w.named_params());
    return w;
}

pipeline::Stack load_stack(const cfg::RunConfig& c) {
    pipeline::Stack s{load_llm(c), load_dit(c), load_vae(c, c.checkpoint_path("vae")), c.edm};
    return s;
}

std::pair<int, int> parse_grid(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos)
        throw std::invalid_argument("grid must look like HxW (latent cells), got: " + s);
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

std::pair<int, int> aspect_dims(const std::string& aspect, int resolution) {
    if (aspect == "1:1") return {resolution, resolution};
    if (aspect == "4:3") return {resolution * 3 / 4, resolution};
    if (aspect == "3:4") return {resolution, resolution * 3 / 4};
    throw std::invalid_argument("unsupported aspect (use 1:1, 4:3, 3:4): " + aspect);
}

int cmd_gen_data(const cfg::RunConfig& c) {
    const std::string dir = c.out_dir + "/data";
    fs::create_directories(c.out_dir);
    std::vector<std::string> aspects = {"1:1"};
    for (const auto& a : c.data.aspects) aspects.push_back(a);
    std::vector<scene::SceneItem> items;
    // round-robin counts per aspect, distinct seed streams
    for (size_t ai = 0; ai < aspects.size(); ++ai) {
        const int count = c.data.n_items / static_cast<int>(aspects.size()) +
                          (static_cast<int>(ai) < c.data.n_items % static_cast<int>(aspects.size())
                               ? 1
                               : 0);
        if (count == 0) continue;
        auto [h, w] = aspect_dims(aspects[ai], c.data.resolution);
        auto part = scene::make_dataset(count, c.data.seed + ai, h, w);
        for (auto& item : part) items.push_back(std::move(item));
    }
    scene::save_dataset(items, dir);
    cfg::save_file(c, c.out_dir + "/config.json");
    std::printf("%s\n", dir.c_str());
    std::printf("%s/config.json\n", c.out_dir.c_str());
    std::printf("items: %zu\n", items.size());
    return 0;
}

int cmd_train_llm(const cfg::RunConfig& c) {
    auto items = scene::load_dataset(c.out_dir + "/data");
    Rng rng = derive_rng(c.train_llm.seed, "llm-init");
    llm::LlmWeights w = llm::LlmWeights::init(c.llm, rng);
    uint64_t step = 0;
    auto tensors = w.named_params();
    if (c.llm_init_mode == "pretrained") {
        train::TrainResult r = train::train_llm(items, w, c.train_llm, c.guard);
        train::write_trace(c.out_dir + "/llm_trace.jsonl", r.trace);
        std::printf("%s/llm_trace.jsonl\n", c.out_dir.c_str());
        step = static_cast<uint64_t>(r.steps_run);
        for (auto& p : r.opt_state) tensors.push_back(p);
    }
    ckpt::save_checkpoint(tensors, step, c.model_digest(), c.checkpoint_path("llm"));
    std::printf("%s\n", c.checkpoint_path("llm").c_str());
    return 0;
}

int cmd_train_vae(const cfg::RunConfig& base, std::optional<int> channels) {
    cfg::RunConfig c = base;
    std::string path = c.checkpoint_path("vae");
    if (channels) {
        c.vae.latent_channels = *channels;
        c.dit.latent_channels = *channels;
        c.validate();
        path = c.out_dir + "/vae_c" + std::to_string(*channels) + ".ckpt";
    }
    auto items = scene::load_dataset(c.out_dir + "/data");
    Rng rng = derive_rng(c.train_vae.seed, "vae-init");
    vae::VaeWeights w = vae::VaeWeights::init(c.vae, rng);
    train::TrainResult r = train::train_vae(items, w, c.train_vae, c.guard);
    const std::string trace_path =
        channels ? c.out_dir + "/vae_c" + std::to_string(*channels) + "_trace.jsonl"
                 : c.out_dir + "/vae_trace.jsonl";
    train::write_trace(trace_path, r.trace);
    auto tensors = w.named_params();
    for (auto& p : r.opt_state) tensors.push_back(p);
    ckpt::save_checkpoint(tensors, static_cast<uint64_t>(r.steps_run), c.model_digest(), path);
    std::printf("%s\n", trace_path.c_str());
    std::printf("%s\n", path.c_str());
    return 0;
}

int cmd_train_dit(const cfg::RunConfig& c) {
    auto items = scene::load_dataset(c.out_dir + "/data");
    llm::LlmWeights lw = load_llm(c);
    vae::VaeWeights vw = load_vae(c, c.checkpoint_path("vae"));
    Rng rng = derive_rng(c.train_dit.seed, "dit-init");
    dit::DitWeights dw = dit::DitWeights::init(c.dit, rng);
    train::TrainResult r = train::train_dit(items, dw, lw, vw, c.edm, c.train_dit, c.guard);
    train::write_trace(c.out_dir + "/dit_trace.jsonl", r.trace);
    auto tensors = dw.named_params();
    for (auto& p : r.opt_state) tensors.push_back(p);
    ckpt::save_checkpoint(tensors, static_cast<uint64_t>(r.steps_run), c.model_digest(),
                          c.checkpoint_path("dit"));
    std::printf("%s/dit_trace.jsonl\n", c.out_dir.c_str());
    std::printf("%s\n", c.checkpoint_path("dit").c_str());
    return 0;
}

struct SampleOpts {
    std::vector<std::string> prompts;
    std::string prompt_file;
    std::string from_data;
    int n = 0;
    int level = 1;
    std::string pe_mode;
    std::string sampler;
    int steps = 0;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string grid;
    std::string out;
};

int cmd_sample(const cfg::RunConfig& c, const SampleOpts& o) {
    pipeline::Stack stack = load_stack(c);
    if (!o.pe_mode.empty()) stack.dit.cfg.pe_mode = dit::pe_mode_from_string(o.pe_mode);
    const edm::Sampler sampler =
        o.sampler.empty() ? c.sample.sampler : edm::sampler_from_string(o.sampler);
    const int steps = o.steps > 0 ? o.steps : c.sample.steps;
    const uint64_t seed = o.seed_set ? o.seed : c.sample.seed;
    auto [gh, gw] = o.grid.empty() ? std::make_pair(c.sample.grid_h, c.sample.grid_w)
                                   : parse_grid(o.grid);

    std::vector<std::string> prompts = o.prompts;
    std::vector<const scene::SceneSpec*> specs;  // parallel to prompts when from-data
    std::vector<scene::SceneItem> items;
    if (!o.prompt_file.empty()) {
        std::ifstream in(o.prompt_file);
        if (!in) throw std::runtime_error("cannot open prompt file: " + o.prompt_file);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) prompts.push_back(line);
    }
    if (!o.from_data.empty()) {
        items = scene::load_dataset(o.from_data);
        check(o.level >= 1 && o.level <= 6, "sample: --level must be in 1..6");
        const int n = o.n > 0 ? std::min<int>(o.n, static_cast<int>(items.size()))
                              : static_cast<int>(items.size());
        for (int i = 0; i < n; ++i) {
            prompts.push_back(items[static_cast<size_t>(i)].captions[static_cast<size_t>(o.level - 1)]);
            specs.push_back(&items[static_cast<size_t>(i)].spec);
        }
    }
    check(!prompts.empty(), "sample: no prompts given (use --prompt/--prompt-file/--from-data)");

    const std::string dir = o.out.empty() ? c.out_dir + "/samples" : o.out;
    fs::create_directories(dir);
    for (size_t i = 0; i < prompts.size(); ++i) {
        Rng noise = derive_rng(seed, "sample-" + std::to_string(i));
        Tensor img =
            pipeline::sample_image(stack, prompts[i], gh, gw, steps, sampler, noise);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "sample_%04zu", i);
        const std::string png = dir + "/" + stem + ".png";
        write_image_png(png, img);
        std::printf("%s\n", png.c_str());
        if (i < specs.size()) {
            std::ofstream meta(dir + "/" + stem + ".json");
            meta << scene::spec_to_json(*specs[i]) << "\n";
            std::printf("%s/%s.json\n", dir.c_str(), stem);
        }
    }
    return 0;
}

int cmd_eval_recon(const cfg::RunConfig& c, const std::string& data_dir,
                   std::optional<int> channels) {
    cfg::RunConfig cc = c;
    std::string path = cc.checkpoint_path("vae");
    if (channels) {
        cc.vae.latent_channels = *channels;
        cc.dit.latent_channels = *channels;
        cc.validate();
        path = cc.out_dir + "/vae_c" + std::to_string(*channels) + ".ckpt";
    }
    vae::VaeWeights w = load_vae(cc, path);
    auto items = scene::load_dataset(data_dir);
    const std::string out_path = cc.out_dir + "/recon_metrics.jsonl";
    std::ofstream out(out_path);
    double psnr_sum = 0.0, ssim_sum = 0.0;
    int finite_psnr = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        auto [mean, logvar] = vae::encode(nullptr, items[i].image, w);
        Tensor recon = vae::decode(nullptr, mean, w);
        // max_val 2.0: images span [-1, 1]
        const float p = metrics::psnr(recon, items[i].image, 2.0f);
        const float s = metrics::ssim(recon, items[i].image, 8, 0.01f, 0.03f, 2.0f);
        out << "{\"item\":" << i << ",\"psnr\":" << p << ",\"ssim\":" << s << "}\n";
        if (std::isfinite(p)) {
            psnr_sum += p;
            ++finite_psnr;
        }
        ssim_sum += s;
    }
    std::printf("%s\n", out_path.c_str());
    std::printf("mean_psnr: %.4f\nmean_ssim: %.4f\n",
                finite_psnr ? psnr_sum / finite_psnr : std::numeric_limits<double>::infinity(),
                ssim_sum / static_cast<double>(items.size()));
    return 0;
}

int cmd_eval_adherence(const cfg::RunConfig& c, const std::string& dir) {
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json") stems.push_back(e.path().stem().string());
    std::sort(stems.begin(), stems.end());
    check(!stems.empty(), "eval-adherence: no spec sidecars found in " + dir);
    const std::string out_path = c.out_dir + "/adherence.jsonl";
    fs::create_directories(c.out_dir);
    std::ofstream out(out_path);
    int passed = 0, shapes_total = 0, shapes_correct = 0;
    for (const auto& stem : stems) {
        std::ifstream in(dir + "/" + stem + ".json");
        std::stringstream ss;
        ss << in.rdbuf();
        scene::SceneSpec spec = scene::spec_from_json(ss.str());
        Tensor img = read_image_png(dir + "/" + stem + ".png");
        auto res = scene::adherence_check(img, spec);
        out << "{\"item\":\"" << stem << "\",\"pass\":" << (res.pass ? "true" : "false")
            << ",\"shapes_correct\":" << res.shapes_correct
            << ",\"shapes_total\":" << res.shapes_total << "}\n";
        passed += res.pass ? 1 : 0;
        shapes_total += res.shapes_total;
        shapes_correct += res.shapes_correct;
    }
    std::printf("%s\n", out_path.c_str());
    std::printf("images: %zu\naccuracy: %.4f\nshape_accuracy: %.4f\n", stems.size(),
                static_cast<double>(passed) / static_cast<double>(stems.size()),
                shapes_total ? static_cast<double>(shapes_correct) / shapes_total : 0.0);
    return 0;
}

int cmd_inspect(const std::string& path) {
    ckpt::Manifest m = ckpt::read_manifest(path);
    std::printf("checkpoint: %s\nstep: %llu\nconfig_digest: %s\ntensors: %zu\n", path.c_str(),
                static_cast<unsigned long long>(m.step), m.config_digest.c_str(),
                m.tensors.size());
    for (const auto& t : m.tensors) {
        std::string shape = "[";
        for (size_t i = 0; i < t.shape.size(); ++i)
            shape += (i ? "," : "") + std::to_string(t.shape[i]);
        shape += "]";
        std::printf("%-40s %-16s offset=%llu nbytes=%llu crc32=%08x\n", t.name.c_str(),
                    shape.c_str(), static_cast<unsigned long long>(t.offset),
                    static_cast<unsigned long long>(t.nbytes), t.crc32);
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale text-to-image stack (LLM-conditioned diffusion transformer)"};
    app.require_subcommand(1);

    CommonOpts common;
    app.add_option("--config", common.config_path, "JSON config file (defaults when omitted)");
    app.add_option("--set", common.overrides, "override config keys, e.g. --set edm.n_steps=16");
    app.add_option("--out-dir", common.out_dir, "run directory override");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene corpus");
    auto* tllm = app.add_subcommand("train-llm", "pretrain (or random-freeze) the text model");
    auto* tvae = app.add_subcommand("train-vae", "train the autoencoder");
    std::optional<int> vae_channels;
    tvae->add_option("--channels", vae_channels, "latent channel override (writes vae_c<N>.ckpt)");

    auto* tdit = app.add_subcommand("train-dit", "train the diffusion transformer");

    auto* smp = app.add_subcommand("sample", "prompts -> images");
    SampleOpts so;
    smp->add_option("--prompt", so.prompts, "prompt text (repeatable)");
    smp->add_option("--prompt-file", so.prompt_file, "file with one prompt per line");
    smp->add_option("--from-data", so.from_data, "sample scene-caption prompts from a dataset dir");
    smp->add_option("--n", so.n, "number of dataset items to sample (with --from-data)");
    smp->add_option("--level", so.level, "caption level 1..6 (with --from-data)");
    smp->add_option("--pe-mode", so.pe_mode, "expand | interpolating");
    smp->add_option("--sampler", so.sampler, "euler | heun");
    smp->add_option("--steps", so.steps, "sampler steps");
    auto* seed_opt = smp->add_option("--seed", so.seed, "noise seed");
    smp->add_option("--grid", so.grid, "latent grid HxW (e.g. 8x12)");
    smp->add_option("--out", so.out, "output directory");

    auto* erec = app.add_subcommand("eval-recon", "VAE reconstruction metrics over a dataset dir");
    std::string recon_data;
    std::optional<int> recon_channels;
    erec->add_option("--data", recon_data, "dataset directory")->required();
    erec->add_option("--channels", recon_channels, "evaluate vae_c<N>.ckpt instead of vae.ckpt");

    auto* eadh = app.add_subcommand("eval-adherence", "scene oracle over sampled images + specs");
    std::string adh_dir;
    eadh->add_option("--dir", adh_dir, "directory of sample_*.png with .json spec sidecars")
        ->required();

    auto* insp = app.add_subcommand("inspect", "print a checkpoint manifest");
    std::string inspect_path;
    insp->add_option("path", inspect_path, "checkpoint file")->required();

    std::vector<char*> argv;
    std::vector<std::string> storage = args;
    std::string prog = "t2i";
    argv.push_back(prog.data());
    for (auto& a : storage) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    so.seed_set = seed_opt->count() > 0;

    try {
        if (insp->parsed()) return cmd_inspect(inspect_path);
        cfg::RunConfig c = resolve_config(common);
        if (gen->parsed()) return cmd_gen_data(c);
        if (tllm->parsed()) return cmd_train_llm(c);
        if (tvae->parsed()) return cmd_train_vae(c, vae_channels);
        if (tdit->parsed()) return cmd_train_dit(c);
        if (smp->parsed()) return cmd_sample(c, so);
        if (erec->parsed()) return cmd_eval_recon(c, recon_data, recon_channels);
        if (eadh->parsed()) return cmd_eval_adherence(c, adh_dir);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

}  // namespace t2i::cli
