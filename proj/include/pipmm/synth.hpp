#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pipmm/rng.hpp"
#include "pipmm/tensor.hpp"

namespace pipmm {

struct PaletteColor {
    const char* name;
    std::array<std::uint8_t, 3> rgb;
};

inline const std::array<PaletteColor, 8>& palette() {
    static const std::array<PaletteColor, 8> p{{{"red", {255, 0, 0}},
                                                {"green", {0, 255, 0}},
                                                {"blue", {0, 0, 255}},
                                                {"yellow", {255, 255, 0}},
                                                {"cyan", {0, 255, 255}},
                                                {"pink", {255, 0, 255}},
                                                {"white", {255, 255, 255}},
                                                {"gray", {128, 128, 128}}}};
    return p;
}

enum class ShapeKind { square, circle, cross };
inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        default: return "cross";
    }
}

struct SceneConfig {
    std::size_t image = 32;
    std::size_t patch = 8;
    std::size_t n_big = 2;
    std::size_t n_small = 3;

    std::size_t grid() const { return image / patch; }

    void validate() const {
        if (patch < 4 || image % patch) throw ConfigError("data.grid: image size must be a multiple of the patch size");
        const std::size_t g = grid();
        if (g < 2 || g % 2) throw ConfigError("data.grid: need an even number of cells per side");
        if (g > 26) throw ConfigError("data.grid: at most 26 rows can be named");
        const std::size_t blocks = (g / 2) * (g / 2);
        if (n_big < 1 || n_big >= blocks)
            throw ConfigError("data.grid: " + std::to_string(g) + "x" + std::to_string(g) +
                              " grid too small for the requested large objects");
        if (n_small < 1 || n_small > (blocks - n_big) * 4)
            throw ConfigError("data.grid: " + std::to_string(g) + "x" + std::to_string(g) +
                              " grid too small for the requested small objects");
    }
};

struct SceneObject {
    ShapeKind shape;
    std::size_t color;
    std::size_t y0, x0, size;
    bool big;
};

struct Scene {
    Tensor image;                     // [H x W x 3], byte/255 values
    std::vector<SceneObject> objects; // big objects first, in block order
    std::vector<int> owner;           // per pixel: object index or -1
    std::vector<std::size_t> cell_labels;  // per patch: color index, or 8 when empty
};

inline bool shape_covers(ShapeKind s, std::size_t size, std::size_t dy, std::size_t dx) {
    const double c = (static_cast<double>(size) - 1.0) / 2.0;
    const double cy = static_cast<double>(dy) - c, cx = static_cast<double>(dx) - c;
    const double half = static_cast<double>(size) / 2.0;
    switch (s) {
        case ShapeKind::square: return true;
        case ShapeKind::circle: return cy * cy + cx * cx <= half * half;
        default: {
            const double arm = static_cast<double>(size) / 6.0 + 0.01;
            return std::abs(cy) < arm || std::abs(cx) < arm;
        }
    }
}

/// Big objects fill 2x2-cell blocks, small ones a single cell of a free block.
/// `target_color` (if < 8) is forced onto the small object at index `target`.
inline Scene make_scene(const SceneConfig& cfg, Rng& rng, std::size_t* target = nullptr,
                        std::size_t target_color = 8) {
    cfg.validate();
    const std::size_t S = cfg.image, P = cfg.patch, g = cfg.grid(), bg = g / 2;
    std::vector<std::size_t> blocks(bg * bg);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i] = i;
    rng.shuffle(blocks);
    std::vector<std::size_t> big_blocks(blocks.begin(), blocks.begin() + static_cast<long>(cfg.n_big));
    std::sort(big_blocks.begin(), big_blocks.end());

    Scene sc;
    std::vector<ShapeKind> used;
    for (auto b : big_blocks) {
        ShapeKind sh;
        do sh = static_cast<ShapeKind>(rng.below(3));
        while (used.size() < 3 && std::find(used.begin(), used.end(), sh) != used.end());
        used.push_back(sh);
        const std::size_t col = rng.below(8);
        sc.objects.push_back({sh, col, (b / bg) * 2 * P + 1, (b % bg) * 2 * P + 1, 2 * P - 2, true});
    }
    std::vector<std::size_t> cells;
    for (std::size_t i = cfg.n_big; i < blocks.size(); ++i) {
        const std::size_t b = blocks[i];
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t c = 0; c < 2; ++c) cells.push_back(((b / bg) * 2 + r) * g + (b % bg) * 2 + c);
    }
    rng.shuffle(cells);
    for (std::size_t i = 0; i < cfg.n_small; ++i) {
        const std::size_t cell = cells[i];
        const auto sh = static_cast<ShapeKind>(rng.below(3));
        const std::size_t col = rng.below(8);
        sc.objects.push_back({sh, col, (cell / g) * P + 1, (cell % g) * P + 1, P - 2, false});
    }
    if (target) {
        *target = cfg.n_big + rng.below(cfg.n_small);
        if (target_color < 8) sc.objects[*target].color = target_color;
    }

    std::vector<double> img(S * S * 3, 0.0);
    sc.owner.assign(S * S, -1);
    sc.cell_labels.assign(g * g, 8);
    for (std::size_t oi = 0; oi < sc.objects.size(); ++oi) {
        const auto& o = sc.objects[oi];
        const auto& rgb = palette()[o.color].rgb;
        for (std::size_t dy = 0; dy < o.size; ++dy)
            for (std::size_t dx = 0; dx < o.size; ++dx) {
                if (!shape_covers(o.shape, o.size, dy, dx)) continue;
                const std::size_t y = o.y0 + dy, x = o.x0 + dx;
                for (std::size_t c = 0; c < 3; ++c) img[(y * S + x) * 3 + c] = rgb[c] / 255.0;
                sc.owner[y * S + x] = static_cast<int>(oi);
            }
        // cells touched by the bounding box
        for (std::size_t r = o.y0 / P; r <= (o.y0 + o.size - 1) / P; ++r)
            for (std::size_t c = o.x0 / P; c <= (o.x0 + o.size - 1) / P; ++c) sc.cell_labels[r * g + c] = o.color;
    }
    sc.image = Tensor::from({S, S, 3}, std::move(img));
    return sc;
}

/// Patch indices overlapped by an object's bounding box.
inline std::vector<std::size_t> object_patches(const SceneObject& o, const SceneConfig& cfg) {
    const std::size_t P = cfg.patch, g = cfg.grid();
    std::vector<std::size_t> out;
    for (std::size_t r = o.y0 / P; r <= (o.y0 + o.size - 1) / P; ++r)
        for (std::size_t c = o.x0 / P; c <= (o.x0 + o.size - 1) / P; ++c) out.push_back(r * g + c);
    return out;
}

inline std::string cell_name(std::size_t cell, std::size_t g) {
    return std::string(1, static_cast<char>('a' + cell / g)) + std::to_string(cell % g + 1);
}

struct Sample {
    Tensor image;
    std::string prompt;
    std::string answer;
    std::vector<std::size_t> target_patch_ids;  // empty for caption / large-object samples
};

enum class SampleKind { confusion, caption, big_question };

/// Confusion samples with answers balanced over the palette (each block of 8 is a shuffled full set).
inline std::vector<Sample> gen_dataset(const SceneConfig& cfg, std::uint64_t seed, std::size_t n,
                                       SampleKind kind = SampleKind::confusion, std::vector<Scene>* scenes = nullptr) {
    if (n < 1) throw ContractError("gen_dataset: n must be at least 1");
    cfg.validate();
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(n);
    std::vector<std::size_t> colors;
    for (std::size_t i = 0; i < n; ++i) {
        if (kind == SampleKind::confusion && colors.empty()) {
            colors = {0, 1, 2, 3, 4, 5, 6, 7};
            rng.shuffle(colors);
        }
        Sample s;
        if (kind == SampleKind::confusion) {
            std::size_t t = 0;
            const std::size_t col = colors.back();
            colors.pop_back();
            auto sc = make_scene(cfg, rng, &t, col);
            const auto& o = sc.objects[t];
            s.image = sc.image;
            s.target_patch_ids = object_patches(o, cfg);
            s.prompt = std::string("what color is the small ") + shape_name(o.shape) + " at " +
                       cell_name(s.target_patch_ids.front(), cfg.grid()) + "?";
            s.answer = palette()[o.color].name;
            if (scenes) scenes->push_back(std::move(sc));
        } else {
            auto sc = make_scene(cfg, rng);
            s.image = sc.image;
            if (kind == SampleKind::caption) {
                const auto& o = sc.objects[0];
                s.prompt = "describe";
                s.answer = std::string(palette()[o.color].name) + " " + shape_name(o.shape);
            } else {
                const auto& o = sc.objects[rng.below(cfg.n_big)];
                s.prompt = std::string("what color is the big ") + shape_name(o.shape) + "?";
                s.answer = palette()[o.color].name;
            }
            if (scenes) scenes->push_back(std::move(sc));
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- serialization: hex image <TAB> prompt <TAB> answer <TAB> ids ----

inline std::string encode_record(const Sample& s) {
    static const char* hex = "0123456789abcdef";
    std::string line;
    line.reserve(s.image.numel() * 2 + 64);
    for (double v : s.image.data()) {
        const auto b = static_cast<unsigned>(std::lround(v * 255.0));
        line += hex[b >> 4];
        line += hex[b & 15];
    }
    line += '\t' + s.prompt + '\t' + s.answer + '\t';
    for (std::size_t i = 0; i < s.target_patch_ids.size(); ++i) {
        if (i) line += ',';
        line += std::to_string(s.target_patch_ids[i]);
    }
    return line;
}

inline Sample decode_record(const std::string& line, std::size_t image_size) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
        auto tab = line.find('\t', start);
        f.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    if (f.size() != 4) throw FormatError("dataset record needs 4 tab-separated fields", 0);
    const std::size_t n = image_size * image_size * 3;
    if (f[0].size() != 2 * n) throw FormatError("image payload has wrong length", 0);
    auto nib = [&](char c, std::size_t off) -> unsigned {
        if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
        throw FormatError("bad hex digit", off);
    };
    std::vector<double> px(n);
    for (std::size_t i = 0; i < n; ++i) px[i] = (nib(f[0][2 * i], 2 * i) * 16 + nib(f[0][2 * i + 1], 2 * i + 1)) / 255.0;
    Sample s;
    s.image = Tensor::from({image_size, image_size, 3}, std::move(px));
    s.prompt = f[1];
    s.answer = f[2];
    std::stringstream ss(f[3]);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) s.target_patch_ids.push_back(std::stoul(tok));
    return s;
}

inline void save_dataset(const std::vector<Sample>& data, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    for (auto& s : data) os << encode_record(s) << '\n';
}

inline std::vector<Sample> load_dataset(const std::string& path, std::size_t image_size) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read " + path);
    std::vector<Sample> out;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(decode_record(line, image_size));
    return out;
}

/// Order-sensitive fingerprint of prompts, answers and targets.
inline std::uint64_t dataset_fingerprint(const std::vector<Sample>& data) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
        h = (h ^ 0xff) * 1099511628211ull;
    };
    for (auto& s : data) {
        mix(s.prompt);
        mix(s.answer);
        for (auto t : s.target_patch_ids) mix(std::to_string(t));
    }
    return h;
}

}  // namespace pipmm
