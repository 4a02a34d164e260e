#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "t2i/checkpoint.hpp"
#include "t2i/train.hpp"

using namespace t2i;
using namespace t2i::train;

namespace {

std::vector<std::pair<std::string, Tensor>> params_with_grads(const std::vector<float>& grads) {
    Tensor p = Tensor::zeros({static_cast<int>(grads.size())});
    p.set_requires_grad(true);
    auto& g = p.grad();
    for (size_t i = 0; i < grads.size(); ++i) g[i] = grads[i];
    return {{"p", p}};
}

}  // namespace

TEST_CASE("spike_guard rule: zero grads, thresholds, boundary, non-finite") {
    SpikeGuardConfig cfg;
    cfg.value_threshold = 1.0f;
    cfg.count_threshold = 10;

    auto zero = params_with_grads(std::vector<float>(20, 0.0f));
    SpikeDecision d0 = spike_guard(zero, cfg);
    CHECK_FALSE(d0.discard);
    CHECK(d0.exceed_count == 0);

    // 11 elements of magnitude 5 against count threshold 10: discard
    auto eleven = params_with_grads(std::vector<float>(11, 5.0f));
    SpikeDecision d1 = spike_guard(eleven, cfg);
    CHECK(d1.discard);
    CHECK(d1.exceed_count == 11);

    // count exactly equal to the threshold: apply (strict inequality)
    auto ten = params_with_grads(std::vector<float>(10, 5.0f));
    SpikeDecision d2 = spike_guard(ten, cfg);
    CHECK_FALSE(d2.discard);
    CHECK(d2.exceed_count == 10);

    std::vector<float> nan_grads(3, 0.0f);
    nan_grads[1] = std::nanf("");
    nan_grads[2] = std::numeric_limits<float>::infinity();
    auto nans = params_with_grads(nan_grads);
    SpikeDecision d3 = spike_guard(nans, cfg);
    CHECK(d3.exceed_count == 2);
}

TEST_CASE("spike guard calibration mechanizes the threshold-setting procedure") {
    SpikeGuardConfig cfg;
    cfg.calibration_window = 3;
    cfg.value_threshold = 1e9f;  // replaced by calibration
    cfg.count_threshold = 0;
    SpikeGuard guard(cfg);

    // healthy iterations with |g| <= 0.5
    for (int i = 0; i < 6; ++i) {
        auto p = params_with_grads(std::vector<float>(1000, 0.5f));
        SpikeDecision d = guard.observe(p);
        CHECK_FALSE(d.discard);
    }
    CHECK_FALSE(guard.calibrating());
    CHECK(guard.config().value_threshold == doctest::Approx(1.0f));  // 2 x p99.9
    CHECK(guard.config().count_threshold >= 1);

    // a spike afterwards is discarded
    auto spike = params_with_grads(std::vector<float>(1000, 100.0f));
    CHECK(guard.observe(spike).discard);
}

TEST_CASE("discard leaves parameters and optimizer state bitwise unchanged") {
    Rng rng(1);
    Tensor p = Tensor::randn({32}, rng);
    p.set_requires_grad(true);
    std::vector<std::pair<std::string, Tensor>> params{{"p", p}};
    Adam adam(params, 1e-2f);

    // one healthy step so the moments are non-trivial
    for (auto& g : p.grad()) g = 0.01f;
    adam.step();
    adam.zero_grad();

    std::vector<float> snap_p(p.data(), p.data() + p.numel());
    auto state = adam.state_tensors();
    std::vector<std::vector<float>> snap_state;
    for (auto& [name, t] : state) snap_state.emplace_back(t.data(), t.data() + t.numel());
    const int64_t t_before = adam.steps_taken();

    // spike arrives; guard discards; nothing may move
    SpikeGuardConfig gc;
    gc.value_threshold = 1.0f;
    gc.count_threshold = 0;
    for (auto& g : p.grad()) g = 1000.0f;
    SpikeDecision d = spike_guard(params, gc);
    CHECK(d.discard);
    adam.zero_grad();  // the discard path: drop grads, no step

    CHECK(adam.steps_taken() == t_before);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p[i] == snap_p[static_cast<size_t>(i)]);
    auto state2 = adam.state_tensors();
    for (size_t s = 0; s < state2.size(); ++s)
        for (int64_t i = 0; i < state2[s].second.numel(); ++i)
            CHECK(state2[s].second[i] == snap_state[s][static_cast<size_t>(i)]);
}

TEST_CASE("bucketize: squares, log-space ties, batch homogeneity") {
    std::vector<std::pair<int, int>> buckets{{64, 64}, {48, 64}};
    CHECK(bucket_for(32, 32, buckets) == 0);
    CHECK(bucket_for(48, 64, buckets) == 1);

    // aspect exactly between two buckets in log space goes to the earlier one
    std::vector<std::pair<int, int>> two{{64, 64}, {36, 64}};  // log aspects 0 and log(9/16)
    // aspect = 3:4 -> log(3/4) is exactly between log(1) and log(9/16)
    CHECK(bucket_for(48, 64, two) == 0);

    Rng rng(2);
    std::vector<std::pair<int, int>> dims;
    for (int i = 0; i < 1000; ++i) {
        const int pick = static_cast<int>(rng.below(3));
        dims.emplace_back(pick == 0 ? 64 : pick == 1 ? 48 : 64,
                          pick == 2 ? 48 : 64);
    }
    std::vector<std::pair<int, int>> b3{{64, 64}, {48, 64}, {64, 48}};
    auto ids = bucketize(dims, b3);
    BucketBatcher batcher(ids, 3, 8);
    Rng erng(3);
    auto batches = batcher.epoch(erng);
    size_t total = 0;
    for (const auto& batch : batches) {
        REQUIRE(!batch.empty());
        const int b = ids[static_cast<size_t>(batch[0])];
        for (int idx : batch) CHECK(ids[static_cast<size_t>(idx)] == b);
        total += batch.size();
    }
    CHECK(total == dims.size());
}

TEST_CASE("downscale_image averages 2x2 blocks exactly") {
    Tensor img({1, 4, 4});
    for (int i = 0; i < 16; ++i) img[i] = static_cast<float>(i);
    Tensor half = downscale_image(img, 2);
    CHECK(half.shape() == std::vector<int>{1, 2, 2});
    CHECK(half[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0f));
    CHECK(half[3] == doctest::Approx((10 + 11 + 14 + 15) / 4.0f));
    Tensor same = downscale_image(img, 1);
    for (int i = 0; i < 16; ++i) CHECK(same[i] == img[i]);
}

TEST_CASE("traces round trip through the line-delimited format") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "t2i_trace_test.jsonl").string();
    std::vector<StepRecord> trace{{0, 1.5, 0.7, 3, "apply"}, {1, 1.2, 0.9, 1200, "discard"}};
    write_trace(path, trace);
    auto back = read_trace(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].step == 0);
    CHECK(back[0].loss == doctest::Approx(1.5));
    CHECK(back[1].decision == "discard");
    CHECK(back[1].exceed_count == 1200);
    fs::remove(path);
}

TEST_CASE("checkpoint: round trip, digest gate, corruption detection") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "t2i_ckpt_test.ckpt").string();
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::pair<std::string, Tensor>> tensors;
        const int k = 1 + static_cast<int>(rng.below(4));
        for (int i = 0; i < k; ++i)
            tensors.emplace_back("t" + std::to_string(i),
                                 Tensor::randn({1 + static_cast<int>(rng.below(6)),
                                                1 + static_cast<int>(rng.below(6))},
                                               rng));
        ckpt::save_checkpoint(tensors, static_cast<uint64_t>(trial), "digest123", path);
        auto loaded = ckpt::load_checkpoint(path, "digest123");
        CHECK(loaded.manifest.step == static_cast<uint64_t>(trial));
        for (const auto& [name, t] : tensors) {
            const Tensor& lt = loaded.tensors.at(name);
            REQUIRE(lt.shape() == t.shape());
            for (int64_t i = 0; i < t.numel(); ++i) CHECK(lt[i] == t[i]);
        }
    }

    CHECK_THROWS_WITH_AS(ckpt::load_checkpoint(path, "other_digest"),
                         doctest::Contains("digest mismatch"), std::runtime_error);
    CHECK_NOTHROW(ckpt::load_checkpoint(path, "other_digest", /*force=*/true));

    // flip one payload byte: integrity error
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(0, std::ios::end);
        const auto size = static_cast<long>(f.tellg());
        f.seekp(size - 3);
        char c;
        f.seekg(size - 3);
        f.read(&c, 1);
        c = static_cast<char>(c ^ 0x40);
        f.seekp(size - 3);
        f.write(&c, 1);
    }
    CHECK_THROWS_WITH_AS(ckpt::load_checkpoint(path, "digest123"),
                         doctest::Contains("integrity"), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("adam state round trips through a checkpoint") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "t2i_opt_test.ckpt").string();
    Rng rng(5);
    Tensor p = Tensor::randn({8}, rng);
    p.set_requires_grad(true);
    std::vector<std::pair<std::string, Tensor>> params{{"w", p}};
    Adam adam(params, 1e-2f);
    for (int i = 0; i < 3; ++i) {
        for (auto& g : p.grad()) g = 0.1f * static_cast<float>(i + 1);
        adam.step();
        adam.zero_grad();
    }
    ckpt::save_checkpoint(adam.state_tensors(), 3, "d", path);
    auto loaded = ckpt::load_checkpoint(path, "d");

    Tensor p2 = p.clone();
    p2.set_requires_grad(true);
    Adam adam2({{"w", p2}}, 1e-2f);
    adam2.load_state(loaded.tensors);
    CHECK(adam2.steps_taken() == 3);

    // both optimizers must now evolve identically
    for (auto& g : p.grad()) g = 0.05f;
    for (auto& g : p2.grad()) g = 0.05f;
    adam.step();
    adam2.step();
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p[i] == p2[i]);
    fs::remove(path);
}

TEST_CASE("fixed seeds reproduce loss traces exactly") {
    auto items = scene::make_dataset(8, 11, 16, 16);
    vae::VaeConfig vc;
    vc.latent_channels = 4;
    vc.base_width = 8;
    vc.resolutions = {16};
    TrainConfig tc;
    tc.batch_size = 2;
    tc.total_steps = 6;
    tc.seed = 77;
    tc.resolution_stages = {16};
    SpikeGuardConfig gc;
    gc.value_threshold = 1e6f;

    Rng r1(1), r2(1);
    vae::VaeWeights w1 = vae::VaeWeights::init(vc, r1);
    vae::VaeWeights w2 = vae::VaeWeights::init(vc, r2);
    TrainResult a = train_vae(items, w1, tc, gc);
    TrainResult b = train_vae(items, w2, tc, gc);
    REQUIRE(a.trace.size() == b.trace.size());
    for (size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].loss == b.trace[i].loss);
    CHECK(w1.checksum() == w2.checksum());
}

TEST_CASE("vae training makes progress on a tiny corpus") {
    auto items = scene::make_dataset(8, 13, 16, 16);
    vae::VaeConfig vc;
    vc.latent_channels = 4;
    vc.base_width = 8;
    vc.resolutions = {16};
    TrainConfig tc;
    tc.batch_size = 2;
    tc.total_steps = 80;
    tc.lr = 2e-3f;
    tc.seed = 5;
    tc.resolution_stages = {16};
    SpikeGuardConfig gc;
    gc.value_threshold = 1e6f;
    Rng rng(2);
    vae::VaeWeights w = vae::VaeWeights::init(vc, rng);
    TrainResult r = train_vae(items, w, tc, gc);
    auto smoothed = [&](size_t from, size_t to) {
        double acc = 0.0;
        for (size_t i = from; i < to; ++i) acc += r.trace[i].loss;
        return acc / static_cast<double>(to - from);
    };
    CHECK(smoothed(70, 80) < smoothed(0, 10));

    // unreachable stage is a config error
    TrainConfig bad = tc;
    bad.resolution_stages = {24};
    vae::VaeWeights w2 = vae::VaeWeights::init(vc, rng);
    CHECK_THROWS_AS(train_vae(items, w2, bad, gc), std::invalid_argument);
}

TEST_CASE("guarded run survives injected gradient spikes; unguarded diverges") {
    auto items = scene::make_dataset(6, 17, 16, 16);
    vae::VaeConfig vc;
    vc.latent_channels = 4;
    vc.base_width = 8;
    vc.resolutions = {16};
    TrainConfig tc;
    tc.batch_size = 2;
    tc.total_steps = 500;
    tc.lr = 5e-3f;
    tc.seed = 21;
    tc.resolution_stages = {16};
    tc.fault_prob = 0.1f;
    tc.fault_scale = 1e6f;

    SpikeGuardConfig guarded;
    guarded.value_threshold = 50.0f;
    guarded.count_threshold = 100;
    Rng r1(3);
    vae::VaeWeights w1 = vae::VaeWeights::init(vc, r1);
    TrainResult rg = train_vae(items, w1, tc, guarded);
    CHECK(rg.injected > 0);
    CHECK(rg.injected_discarded == rg.injected);
    bool finite = true;
    for (auto& [name, t] : w1.named_params()) finite = finite && t.all_finite();
    CHECK(finite);

    // healthy reference: same run with no faults at all
    TrainConfig clean = tc;
    clean.fault_prob = 0.0f;
    Rng r3(3);
    vae::VaeWeights w3 = vae::VaeWeights::init(vc, r3);
    TrainResult rh = train_vae(items, w3, clean, guarded);

    SpikeGuardConfig off;
    off.value_threshold = 1e30f;
    off.count_threshold = (1LL << 60);
    Rng r2(3);
    vae::VaeWeights w2 = vae::VaeWeights::init(vc, r2);
    TrainResult ru = train_vae(items, w2, tc, off);

    auto tail_mean = [](const TrainResult& r) {
        double acc = 0.0;
        const size_t n = r.trace.size(), k = 30;
        for (size_t i = n - k; i < n; ++i) acc += r.trace[i].loss;
        return acc / static_cast<double>(k);
    };
    bool nonfinite = false;
    for (const auto& rec : ru.trace)
        if (!std::isfinite(rec.loss)) nonfinite = true;
    for (auto& [name, t] : w2.named_params())
        if (!t.all_finite()) nonfinite = true;
    // divergent: the loss never recovers and ends far above the healthy run
    const bool divergent = tail_mean(ru) > 3.0 * tail_mean(rh);
    CHECK((nonfinite || divergent));

    // the guard restores the healthy trajectory under the same faults
    CHECK(tail_mean(rg) < 2.0 * tail_mean(rh));
}
