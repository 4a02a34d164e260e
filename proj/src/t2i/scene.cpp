#include "scene.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "image_io.hpp"

namespace t2i::scene {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::circle: return "circle";
        case Kind::square: return "square";
        case Kind::triangle: return "triangle";
    }
    return "?";
}

const char* size_name(Size s) { return s == Size::small ? "small" : "large"; }

const char* position_name(Position p) {
    switch (p) {
        case Position::top_left: return "top left";
        case Position::top_right: return "top right";
        case Position::bottom_left: return "bottom left";
        case Position::bottom_right: return "bottom right";
        case Position::center: return "center";
    }
    return "?";
}

void validate_spec(const SceneSpec& spec) {
    check(spec.background >= 0 && spec.background < 8, "spec: background out of palette");
    check(!spec.shapes.empty() && spec.shapes.size() <= 3, "spec: shape count must be 1-3");
    std::set<int> positions;
    for (const auto& s : spec.shapes) {
        check(s.color >= 0 && s.color < 8, "spec: shape color out of palette");
        check(s.color != spec.background, "spec: shape color equals background");
        check(positions.insert(static_cast<int>(s.position)).second,
              "spec: duplicate shape position");
    }
}

int64_t spec_space_size() {
    // per-shape attribute choices: 3 kinds x 7 colors (background excluded) x 2 sizes
    const int64_t per_shape = 3 * 7 * 2;
    const int64_t choose5[4] = {0, 5, 10, 10};  // C(5, k) for k = 1..3
    int64_t per_bg = 0;
    int64_t pk = 1;
    for (int k = 1; k <= 3; ++k) {
        pk *= per_shape;
        per_bg += choose5[k] * pk;
    }
    return 8 * per_bg;
}

SceneSpec sample_spec(Rng& rng) {
    SceneSpec spec;
    spec.background = static_cast<int>(rng.below(8));
    const int k = 1 + static_cast<int>(rng.below(3));
    // k distinct positions via partial Fisher-Yates
    int pos[5] = {0, 1, 2, 3, 4};
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(5 - i)));
        std::swap(pos[i], pos[j]);
    }
    for (int i = 0; i < k; ++i) {
        ShapeSpec s;
        s.position = static_cast<Position>(pos[i]);
        s.kind = static_cast<Kind>(rng.below(3));
        int c = static_cast<int>(rng.below(7));
        if (c >= spec.background) ++c;  // skip the background color
        s.color = c;
        s.size = static_cast<Size>(rng.below(2));
        spec.shapes.push_back(s);
    }
    std::sort(spec.shapes.begin(), spec.shapes.end(), [](const ShapeSpec& a, const ShapeSpec& b) {
        return static_cast<int>(a.position) < static_cast<int>(b.position);
    });
    return spec;
}

void position_anchor(Position p, int height, int width, float& cy, float& cx) {
    const float H = static_cast<float>(height), W = static_cast<float>(width);
    switch (p) {
        case Position::top_left: cy = 3.0f * H / 16.0f; cx = 3.0f * W / 16.0f; break;
        case Position::top_right: cy = 3.0f * H / 16.0f; cx = 13.0f * W / 16.0f; break;
        case Position::bottom_left: cy = 13.0f * H / 16.0f; cx = 3.0f * W / 16.0f; break;
        case Position::bottom_right: cy = 13.0f * H / 16.0f; cx = 13.0f * W / 16.0f; break;
        case Position::center: cy = H / 2.0f; cx = W / 2.0f; break;
    }
}

namespace {

float palette_component(uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

bool inside_shape(Kind kind, float px, float py, float cx, float cy, float extent) {
    const float h = extent / 2.0f;
    const float dx = px - cx, dy = py - cy;
    switch (kind) {
        case Kind::circle:
            return dx * dx + dy * dy <= h * h;
        case Kind::square:
            return std::abs(dx) <= h && std::abs(dy) <= h;
        case Kind::triangle: {
            // upward triangle: apex (cx, cy-h), base corners (cx+-h, cy+h)
            if (dy < -h || dy > h) return false;
            const float frac = (dy + h) / (2.0f * h);  // 0 at apex, 1 at base
            return std::abs(dx) <= h * frac;
        }
    }
    return false;
}

}  // namespace

Tensor render_scene(const SceneSpec& spec, int height, int width) {
    validate_spec(spec);
    check(height >= 16 && width >= 16, "render_scene: resolution too small");
    Tensor img({3, height, width});
    const auto& bg = kPalette[static_cast<size_t>(spec.background)];
    const float bgv[3] = {palette_component(bg.r), palette_component(bg.g), palette_component(bg.b)};
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < static_cast<int64_t>(height) * width; ++i)
            img[static_cast<int64_t>(c) * height * width + i] = bgv[c];

    const float mindim = static_cast<float>(std::min(height, width));
    for (const auto& s : spec.shapes) {
        const float extent = (s.size == Size::small ? 0.15f : 0.30f) * mindim;
        float cy, cx;
        position_anchor(s.position, height, width, cy, cx);
        const auto& col = kPalette[static_cast<size_t>(s.color)];
        const float cv[3] = {palette_component(col.r), palette_component(col.g),
                             palette_component(col.b)};
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - extent)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + extent)));
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - extent)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + extent)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (inside_shape(s.kind, static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f,
                                 cx, cy, extent))
                    for (int c = 0; c < 3; ++c)
                        img[(static_cast<int64_t>(c) * height + y) * width + x] = cv[c];
    }
    return img;
}

std::array<std::string, 6> caption_levels(const SceneSpec& spec) {
    validate_spec(spec);
    auto shape_phrase = [&](const ShapeSpec& s, bool with_size, bool with_color,
                            bool with_position) {
        std::string out = "a";
        if (with_size) out += std::string(" ") + size_name(s.size);
        if (with_color) out += std::string(" ") + kPalette[static_cast<size_t>(s.color)].name;
        out += std::string(" ") + kind_name(s.kind);
        if (with_position) out += std::string(" at the ") + position_name(s.position);
        return out;
    };
    auto join_shapes = [&](bool with_size, bool with_color, bool with_position) {
        std::string out;
        for (size_t i = 0; i < spec.shapes.size(); ++i) {
            if (i > 0) out += " and ";
            out += shape_phrase(spec.shapes[i], with_size, with_color, with_position);
        }
        return out;
    };
    const std::string bg =
        std::string(" on a ") + kPalette[static_cast<size_t>(spec.background)].name + " background";
    std::array<std::string, 6> levels;
    levels[0] = join_shapes(true, true, true) + bg;  // full detail
    levels[1] = join_shapes(true, true, true);       // drop background
    levels[2] = join_shapes(false, true, true);      // drop size
    levels[3] = join_shapes(false, true, false);     // drop position
    levels[4] = join_shapes(false, false, false);    // drop color
    levels[5] = shape_phrase(spec.shapes[0], false, false, false);  // first kind only
    return levels;
}

int sample_caption_index(Rng& rng) { return static_cast<int>(rng.below(6)); }

std::string sample_caption_level(const std::vector<std::string>& captions, Rng& rng) {
    check(captions.size() == 6, "sample_caption_level: expected exactly 6 captions");
    return captions[static_cast<size_t>(sample_caption_index(rng))];
}

std::vector<SceneItem> make_dataset(int n, uint64_t seed, int height, int width) {
    check(n >= 1, "make_dataset: n must be >= 1");
    if (static_cast<int64_t>(n) > spec_space_size())
        throw std::invalid_argument("make_dataset: n exceeds the number of distinct specs");
    Rng rng = derive_rng(seed, "dataset");
    std::vector<SceneItem> items;
    std::set<std::string> seen;  // canonical captions are injective over specs
    while (static_cast<int>(items.size()) < n) {
        SceneSpec spec = sample_spec(rng);
        spec.seed = static_cast<int64_t>(items.size());
        auto caps = caption_levels(spec);
        if (!seen.insert(caps[0]).second) continue;
        SceneItem item;
        item.spec = spec;
        item.image = render_scene(spec, height, width);
        item.captions = caps;
        items.push_back(std::move(item));
    }
    return items;
}

int classify_pixel(float r, float g, float b) {
    int best = 0;
    float best_d = 1e30f;
    for (int i = 0; i < 8; ++i) {
        const auto& p = kPalette[static_cast<size_t>(i)];
        const float dr = r - palette_component(p.r);
        const float dg = g - palette_component(p.g);
        const float db = b - palette_component(p.b);
        const float d = dr * dr + dg * dg + db * db;
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

AdherenceResult adherence_check(const Tensor& image, const SceneSpec& spec) {
    validate_spec(spec);
    check(image.rank() == 3 && image.dim(0) == 3, "adherence_check: expected [3 x H x W]");
    const int H = image.dim(1), W = image.dim(2);
    const float box = 0.31f * static_cast<float>(std::min(H, W));
    AdherenceResult res;
    res.shapes_total = static_cast<int>(spec.shapes.size());
    for (const auto& s : spec.shapes) {
        float cy, cx;
        position_anchor(s.position, H, W, cy, cx);
        const int y0 = std::max(0, static_cast<int>(std::lround(cy - box / 2.0f)));
        const int y1 = std::min(H - 1, static_cast<int>(std::lround(cy + box / 2.0f)));
        const int x0 = std::max(0, static_cast<int>(std::lround(cx - box / 2.0f)));
        const int x1 = std::min(W - 1, static_cast<int>(std::lround(cx + box / 2.0f)));
        int64_t counts[8] = {0};
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const float r = image[(0 * static_cast<int64_t>(H) + y) * W + x];
                const float g = image[(1 * static_cast<int64_t>(H) + y) * W + x];
                const float b = image[(2 * static_cast<int64_t>(H) + y) * W + x];
                ++counts[classify_pixel(r, g, b)];
            }
        int dominant = -1;
        int64_t best = 0;
        for (int c = 0; c < 8; ++c) {
            if (c == spec.background) continue;
            if (counts[c] > best) {
                best = counts[c];
                dominant = c;
            }
        }
        if (dominant == s.color && best > 0) ++res.shapes_correct;
    }
    res.pass = (res.shapes_correct == res.shapes_total);
    return res;
}

int count_components(const Tensor& image, int background_color) {
    check(image.rank() == 3 && image.dim(0) == 3, "count_components: expected [3 x H x W]");
    const int H = image.dim(1), W = image.dim(2);
    std::vector<uint8_t> mask(static_cast<size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float r = image[(0 * static_cast<int64_t>(H) + y) * W + x];
            const float g = image[(1 * static_cast<int64_t>(H) + y) * W + x];
            const float b = image[(2 * static_cast<int64_t>(H) + y) * W + x];
            mask[static_cast<size_t>(y) * W + x] =
                classify_pixel(r, g, b) != background_color ? 1 : 0;
        }
    int components = 0;
    std::vector<uint8_t> visited(static_cast<size_t>(H) * W, 0);
    std::deque<std::pair<int, int>> queue;
    for (int sy = 0; sy < H; ++sy)
        for (int sx = 0; sx < W; ++sx) {
            const size_t si = static_cast<size_t>(sy) * W + sx;
            if (!mask[si] || visited[si]) continue;
            ++components;
            visited[si] = 1;
            queue.emplace_back(sy, sx);
            while (!queue.empty()) {
                auto [y, x] = queue.front();
                queue.pop_front();
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = y + dy[k], nx = x + dx[k];
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                    const size_t ni = static_cast<size_t>(ny) * W + nx;
                    if (mask[ni] && !visited[ni]) {
                        visited[ni] = 1;
                        queue.emplace_back(ny, nx);
                    }
                }
            }
        }
    return components;
}

std::string spec_to_json(const SceneSpec& spec) {
    json j;
    j["background"] = kPalette[static_cast<size_t>(spec.background)].name;
    j["seed"] = spec.seed;
    j["shapes"] = json::array();
    for (const auto& s : spec.shapes) {
        json js;
        js["kind"] = kind_name(s.kind);
        js["color"] = kPalette[static_cast<size_t>(s.color)].name;
        js["size"] = size_name(s.size);
        js["position"] = position_name(s.position);
        j["shapes"].push_back(js);
    }
    return j.dump(2);
}

namespace {

int palette_index(const std::string& name) {
    for (int i = 0; i < 8; ++i)
        if (name == kPalette[static_cast<size_t>(i)].name) return i;
    throw std::invalid_argument("unknown palette color: " + name);
}

Kind kind_from_name(const std::string& name) {
    for (int i = 0; i < 3; ++i)
        if (name == kind_name(static_cast<Kind>(i))) return static_cast<Kind>(i);
    throw std::invalid_argument("unknown shape kind: " + name);
}

Position position_from_name(const std::string& name) {
    for (int i = 0; i < 5; ++i)
        if (name == position_name(static_cast<Position>(i))) return static_cast<Position>(i);
    throw std::invalid_argument("unknown position: " + name);
}

}  // namespace

SceneSpec spec_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    SceneSpec spec;
    spec.background = palette_index(j.at("background").get<std::string>());
    spec.seed = j.value("seed", 0);
    for (const auto& js : j.at("shapes")) {
        ShapeSpec s;
        s.kind = kind_from_name(js.at("kind").get<std::string>());
        s.color = palette_index(js.at("color").get<std::string>());
        s.size = js.at("size").get<std::string>() == "small" ? Size::small : Size::large;
        s.position = position_from_name(js.at("position").get<std::string>());
        spec.shapes.push_back(s);
    }
    validate_spec(spec);
    return spec;
}

void save_dataset(const std::vector<SceneItem>& items, const std::string& dir) {
    fs::create_directories(dir);
    for (size_t i = 0; i < items.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "item_%05zu", i);
        write_image_png(dir + "/" + stem + ".png", items[i].image);
        json j = json::parse(spec_to_json(items[i].spec));
        json meta;
        meta["spec"] = j;
        meta["captions"] = items[i].captions;
        std::ofstream out(dir + "/" + stem + ".json");
        out << meta.dump(2) << "\n";
    }
}

std::vector<SceneItem> load_dataset(const std::string& dir) {
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".json") stems.push_back(e.path().stem().string());
    }
    std::sort(stems.begin(), stems.end());
    check(!stems.empty(), "load_dataset: no items found in " + dir);
    std::vector<SceneItem> items;
    for (const auto& stem : stems) {
        std::ifstream in(dir + "/" + stem + ".json");
        check(in.good(), "load_dataset: cannot read " + stem);
        std::stringstream ss;
        ss << in.rdbuf();
        json meta = json::parse(ss.str());
        SceneItem item;
        item.spec = spec_from_json(meta.at("spec").dump());
        auto caps = meta.at("captions").get<std::vector<std::string>>();
        check(caps.size() == 6, "load_dataset: item must carry 6 captions");
        std::copy(caps.begin(), caps.end(), item.captions.begin());
        item.image = read_image_png(dir + "/" + stem + ".png");
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace t2i::scene
