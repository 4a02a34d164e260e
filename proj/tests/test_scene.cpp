#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "t2i/image_io.hpp"
#include "t2i/scene.hpp"

using namespace t2i;
using namespace t2i::scene;

namespace {

SceneSpec red_circle_center_on_white() {
    SceneSpec spec;
    spec.background = 0;  // white
    ShapeSpec s;
    s.kind = Kind::circle;
    s.color = 2;  // red
    s.size = Size::large;
    s.position = Position::center;
    spec.shapes = {s};
    return spec;
}

int word_count(const std::string& s) {
    std::istringstream ss(s);
    int n = 0;
    std::string w;
    while (ss >> w) ++n;
    return n;
}

}  // namespace

TEST_CASE("render is deterministic and shape color dominates its region") {
    SceneSpec spec = red_circle_center_on_white();
    Tensor a = render_scene(spec, 64, 64);
    Tensor b = render_scene(spec, 64, 64);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    auto res = adherence_check(a, spec);
    CHECK(res.pass);
    CHECK(res.shapes_correct == 1);
}

TEST_CASE("three shapes give exactly three connected components") {
    Rng rng(101);
    int checked = 0;
    while (checked < 20) {
        SceneSpec spec = sample_spec(rng);
        if (spec.shapes.size() != 3) continue;
        Tensor img = render_scene(spec, 64, 64);
        CHECK(count_components(img, spec.background) == 3);
        ++checked;
    }
}

TEST_CASE("caption levels: coarsest template and completeness") {
    SceneSpec spec = red_circle_center_on_white();
    auto caps = caption_levels(spec);
    CHECK(caps[5] == "a circle");
    CHECK(caps[0].find("red") != std::string::npos);
    CHECK(caps[0].find("circle") != std::string::npos);
    CHECK(caps[0].find("center") != std::string::npos);
    CHECK(caps[0].find("white") != std::string::npos);
    CHECK(caps[0].find("large") != std::string::npos);
}

TEST_CASE("caption word counts are non-increasing over 1000 random specs") {
    Rng rng(31337);
    for (int i = 0; i < 1000; ++i) {
        SceneSpec spec = sample_spec(rng);
        auto caps = caption_levels(spec);
        for (int l = 0; l + 1 < 6; ++l)
            CHECK(word_count(caps[static_cast<size_t>(l)]) >=
                  word_count(caps[static_cast<size_t>(l + 1)]));
    }
}

TEST_CASE("level-1 captions identify specs uniquely") {
    Rng rng(4242);
    std::map<std::string, SceneSpec> seen;
    for (int i = 0; i < 3000; ++i) {
        SceneSpec spec = sample_spec(rng);
        auto caps = caption_levels(spec);
        auto it = seen.find(caps[0]);
        if (it != seen.end()) {
            CHECK(it->second == spec);
        } else {
            seen.emplace(caps[0], spec);
        }
    }
}

TEST_CASE("sample_caption_level: reproducibility, uniformity, count validation") {
    std::vector<std::string> caps = {"a", "b", "c", "d", "e", "f"};
    Rng r1(9), r2(9);
    for (int i = 0; i < 50; ++i)
        CHECK(sample_caption_level(caps, r1) == sample_caption_level(caps, r2));

    Rng rng(2024);
    std::vector<int> counts(6, 0);
    const int draws = 60000;
    for (int i = 0; i < draws; ++i) ++counts[static_cast<size_t>(sample_caption_index(rng))];
    for (int l = 0; l < 6; ++l) {
        const double freq = static_cast<double>(counts[static_cast<size_t>(l)]) / draws;
        CHECK(std::abs(freq - 1.0 / 6.0) < 0.01);
    }

    std::vector<std::string> five = {"a", "b", "c", "d", "e"};
    Rng r3(1);
    CHECK_THROWS_AS(sample_caption_level(five, r3), std::invalid_argument);
}

TEST_CASE("make_dataset: uniqueness, reproducibility, invariants") {
    auto items = make_dataset(64, 7, 32, 32);
    CHECK(items.size() == 64);
    std::map<std::string, int> caps;
    for (const auto& item : items) ++caps[item.captions[0]];
    CHECK(caps.size() == 64);

    auto again = make_dataset(64, 7, 32, 32);
    for (size_t i = 0; i < items.size(); ++i) {
        CHECK(items[i].spec == again[i].spec);
        for (int64_t j = 0; j < items[i].image.numel(); ++j)
            CHECK(items[i].image[j] == again[i].image[j]);
    }

    for (const auto& item : items) {
        validate_spec(item.spec);
        auto res = adherence_check(item.image, item.spec);
        CHECK(res.pass);  // oracle agrees with ground truth on rendered images
    }

    CHECK_THROWS_AS(make_dataset(0, 1, 32, 32), std::invalid_argument);
}

TEST_CASE("adherence oracle agrees with ground truth on 300 rendered scenes") {
    Rng rng(5150);
    for (int i = 0; i < 300; ++i) {
        SceneSpec spec = sample_spec(rng);
        Tensor img = render_scene(spec, 64, 64);
        auto res = adherence_check(img, spec);
        CHECK(res.pass);
    }
    // and on non-square renders
    for (int i = 0; i < 100; ++i) {
        SceneSpec spec = sample_spec(rng);
        Tensor img = render_scene(spec, 48, 64);
        CHECK(adherence_check(img, spec).pass);
        Tensor img2 = render_scene(spec, 64, 96);
        CHECK(adherence_check(img2, spec).pass);
    }
}

TEST_CASE("dataset persists through the sidecar format") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "t2i_scene_test").string();
    fs::remove_all(dir);
    auto items = make_dataset(6, 3, 32, 32);
    save_dataset(items, dir);
    auto loaded = load_dataset(dir);
    REQUIRE(loaded.size() == items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        CHECK(loaded[i].spec == items[i].spec);
        CHECK(loaded[i].captions == items[i].captions);
        // 8-bit quantization bounds the pixel round-trip error
        for (int64_t j = 0; j < items[i].image.numel(); ++j)
            CHECK(std::abs(loaded[i].image[j] - items[i].image[j]) < 1.0f / 127.0f);
    }
    fs::remove_all(dir);
}

TEST_CASE("spec json round trip and validation") {
    Rng rng(77);
    SceneSpec spec = sample_spec(rng);
    SceneSpec back = spec_from_json(spec_to_json(spec));
    CHECK(back == spec);

    SceneSpec bad = spec;
    bad.shapes[0].color = bad.background;
    CHECK_THROWS_AS(validate_spec(bad), std::invalid_argument);

    SceneSpec dup = spec;
    dup.shapes.push_back(dup.shapes[0]);
    CHECK_THROWS_AS(validate_spec(dup), std::invalid_argument);
}
