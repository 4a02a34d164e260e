#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace t2i::scene {

// Fixed 8-color palette with maximally separated RGB corners so the
// dominant-color oracle is unambiguous.
struct PaletteColor {
    const char* name;
    uint8_t r, g, b;
};

inline constexpr std::array<PaletteColor, 8> kPalette{{
    {"white", 255, 255, 255},
    {"black", 0, 0, 0},
    {"red", 255, 0, 0},
    {"green", 0, 255, 0},
    {"blue", 0, 0, 255},
    {"yellow", 255, 255, 0},
    {"cyan", 0, 255, 255},
    {"magenta", 255, 0, 255},
}};

enum class Kind { circle = 0, square = 1, triangle = 2 };
enum class Size { small = 0, large = 1 };
enum class Position { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3, center = 4 };

const char* kind_name(Kind k);
const char* size_name(Size s);
const char* position_name(Position p);  // e.g. "top left"

struct ShapeSpec {
    Kind kind = Kind::circle;
    int color = 2;  // palette index
    Size size = Size::small;
    Position position = Position::center;

    bool operator==(const ShapeSpec&) const = default;
};

// Procedural scene: background color plus 1-3 shapes on distinct positions.
// Shape colors always differ from the background so every shape is visible
// to the oracle.
struct SceneSpec {
    int background = 0;  // palette index
    std::vector<ShapeSpec> shapes;
    int64_t seed = 0;

    bool operator==(const SceneSpec& o) const {
        return background == o.background && shapes == o.shapes;
    }
};

// Validation of the SceneSpec invariants (distinct positions, palette range,
// 1-3 shapes, shape color != background). Throws on violation.
void validate_spec(const SceneSpec& spec);

// Number of distinct valid specs (background x position subsets x attributes).
int64_t spec_space_size();

// Uniform hierarchical sampling: background, then shape count, then positions
// and per-shape attributes. Shapes are kept in canonical position order.
SceneSpec sample_spec(Rng& rng);

// Deterministic rasterization as [3 x H x W] in [-1, 1].
// Shape extent: small = 15%, large = 30% of min(H, W).
Tensor render_scene(const SceneSpec& spec, int height, int width);

// Exactly six caption strings ordered detailed -> coarse. Level 1 carries the
// background plus kind/color/size/position of every shape; each later level
// drops one attribute class; level 6 is the first shape's kind alone.
std::array<std::string, 6> caption_levels(const SceneSpec& spec);

// Uniform choice among exactly six captions.
std::string sample_caption_level(const std::vector<std::string>& captions, Rng& rng);
int sample_caption_index(Rng& rng);

struct SceneItem {
    SceneSpec spec;
    Tensor image;
    std::array<std::string, 6> captions;
};

// Deterministic dataset of n distinct scenes. Throws if n exceeds the number
// of distinct specs.
std::vector<SceneItem> make_dataset(int n, uint64_t seed, int height, int width);

// Prompt-adherence oracle: for every shape, the dominant non-background
// palette color inside a box around the shape's anchor must equal the
// shape's color.
struct AdherenceResult {
    bool pass = false;
    int shapes_total = 0;
    int shapes_correct = 0;
};
AdherenceResult adherence_check(const Tensor& image, const SceneSpec& spec);

// Nearest-palette classification of one pixel (pixel values in [-1, 1]).
int classify_pixel(float r, float g, float b);

// Connected components (4-connectivity) of the non-background mask.
int count_components(const Tensor& image, int background_color);

// Anchor of a position in pixel coordinates.
void position_anchor(Position p, int height, int width, float& cy, float& cx);

// Sidecar persistence: PNG per item plus one JSON file holding the spec and
// the six captions.
void save_dataset(const std::vector<SceneItem>& items, const std::string& dir);
std::vector<SceneItem> load_dataset(const std::string& dir);

std::string spec_to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const std::string& json_text);

}  // namespace t2i::scene
