#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pipmm/errors.hpp"
#include "pipmm/tensor.hpp"

namespace pipmm {

/// Min-max normalizes a 2-D grid to bytes: round(255 (v - min) / (max - min)), or 128 everywhere when flat.
inline std::vector<std::uint8_t> heatmap_levels(const Tensor& grid) {
    if (grid.dim() != 2 || grid.numel() == 0) throw ContractError("render_heatmap: empty or non-2-D grid");
    auto v = grid.data();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<std::uint8_t> out(v.size(), 128);
    if (*hi > *lo) {
        const double span = *hi - *lo;
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (v[i] - *lo) / span));
    }
    return out;
}

/// Binary PGM ("P5", maxval 255), nearest-neighbor upscaled by `upscale`.
inline std::string render_heatmap(const Tensor& grid, std::size_t upscale = 1) {
    if (upscale < 1) throw ContractError("render_heatmap: upscale must be >= 1");
    const auto lv = heatmap_levels(grid);
    const std::size_t h = grid.rows(), w = grid.cols(), H = h * upscale, W = w * upscale;
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    out.reserve(out.size() + H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) out += static_cast<char>(lv[(y / upscale) * w + x / upscale]);
    return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + path);
}

}  // namespace pipmm
