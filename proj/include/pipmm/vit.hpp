#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pipmm/nn.hpp"

namespace pipmm {

struct ViTConfig {
    std::size_t height = 32, width = 32, channels = 3;
    std::size_t patch = 8;
    std::size_t dim = 32;
    std::size_t layers = 2;
    std::size_t heads = 4;
    double pos_init_std = 0.5;

    std::size_t num_patches() const { return (height / patch) * (width / patch); }
    std::size_t patch_len() const { return patch * patch * channels; }

    void validate() const {
        if (patch == 0 || height % patch || width % patch)
            throw ConfigError("model.patch: image " + std::to_string(height) + "x" + std::to_string(width) +
                              " not divisible by patch size " + std::to_string(patch));
        if (dim == 0 || heads == 0 || dim % heads) throw ConfigError("model.vit_heads: width not divisible by heads");
    }
};

/// image [H x W x C] -> [N x P*P*C], blocks row-major over the grid, each block flattened row-major.
inline Tensor patchify(const Tensor& image, std::size_t P) {
    if (image.dim() != 3) throw ShapeError("patchify expects HxWxC, got " + shape_str(image.shape()));
    const std::size_t H = image.shape()[0], W = image.shape()[1], C = image.shape()[2];
    if (P == 0 || H % P || W % P)
        throw ShapeError("patch size " + std::to_string(P) + " does not divide image " + shape_str(image.shape()));
    const std::size_t gw = W / P, n = (H / P) * gw, len = P * P * C;
    std::vector<double> out(n * len);
    auto src = image.data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t by = (i / gw) * P, bx = (i % gw) * P;
        for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x)
                for (std::size_t c = 0; c < C; ++c)
                    out[i * len + (y * P + x) * C + c] = src[((by + y) * W + bx + x) * C + c];
    }
    return Tensor::from({n, len}, std::move(out));
}

inline Tensor unpatchify(const Tensor& patches, std::size_t H, std::size_t W, std::size_t C, std::size_t P) {
    if (P == 0 || H % P || W % P) throw ShapeError("patch size does not divide image");
    const std::size_t gw = W / P, n = (H / P) * gw, len = P * P * C;
    if (patches.shape() != Shape{n, len}) throw ShapeError("unpatchify: unexpected shape " + shape_str(patches.shape()));
    std::vector<double> img(H * W * C);
    auto src = patches.data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t by = (i / gw) * P, bx = (i % gw) * P;
        for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x)
                for (std::size_t c = 0; c < C; ++c)
                    img[((by + y) * W + bx + x) * C + c] = src[i * len + (y * P + x) * C + c];
    }
    return Tensor::from({H, W, C}, std::move(img));
}

struct EncoderOutput {
    Tensor z;                                // [(N+1) x D]
    std::vector<std::vector<double>> attn;   // per layer: heads x (N+1) x (N+1)
    std::vector<Tensor> layer_outputs;       // z_1 .. z_L
    std::size_t heads = 0;
    std::size_t tokens = 0;

    double attn_at(std::size_t layer, std::size_t head, std::size_t i, std::size_t j) const {
        return attn.at(layer)[(head * tokens + i) * tokens + j];
    }
};

class VisionEncoder {
public:
    VisionEncoder() = default;
    VisionEncoder(const ViTConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t D = cfg.dim, N = cfg.num_patches();
        E_ = normal_tensor({cfg.patch_len(), D}, rng, 0.02);
        pos_ = normal_tensor({N + 1, D}, rng, cfg.pos_init_std);
        cls_ = normal_tensor({D}, rng, 0.02);
        for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(D, cfg.heads, rng);
    }

    const ViTConfig& config() const { return cfg_; }
    const Tensor& class_token() const { return cls_; }
    Tensor& class_token() { return cls_; }
    Tensor& patch_embedding() { return E_; }
    Tensor& pos_embedding() { return pos_; }
    std::vector<Block>& blocks() { return blocks_; }

    /// z_0 = [class_vec; patches E] + E_pos.
    Tensor assemble_input(const Tensor& class_vec, const Tensor& patches) const {
        const std::size_t D = cfg_.dim;
        if (class_vec.numel() != D)
            throw ShapeError("class vector " + shape_str(class_vec.shape()) + " does not match width " + std::to_string(D));
        if (patches.dim() != 2 || patches.cols() != cfg_.patch_len() || patches.rows() != cfg_.num_patches())
            throw ShapeError("patch sequence " + shape_str(patches.shape()) + " does not match config");
        auto rows = concat_rows({class_vec.reshape({1, D}), matmul(patches, E_)});
        return add(rows, pos_);
    }

    Tensor encoder_block(std::size_t layer, const Tensor& z, std::vector<double>* probs = nullptr) const {
        return blocks_.at(layer)(z, false, probs);
    }

    EncoderOutput encode(const Tensor& z0) const {
        EncoderOutput out;
        out.heads = cfg_.heads;
        out.tokens = z0.rows();
        auto z = z0;
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            out.attn.emplace_back();
            z = blocks_[l](z, false, &out.attn.back());
            out.layer_outputs.push_back(z);
        }
        out.z = z;
        return out;
    }

    EncoderOutput encode_image(const Tensor& image, const Tensor& class_vec) const {
        return encode(assemble_input(class_vec, patchify(image, cfg_.patch)));
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".E", E_);
        f(prefix + ".pos", pos_);
        f(prefix + ".cls", cls_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + ".blocks." + std::to_string(i), f);
    }

private:
    ViTConfig cfg_;
    Tensor E_, pos_, cls_;
    std::vector<Block> blocks_;
};

/// Class-slot attention of `layer` over the patches, mean over heads; values in patch order (length N).
inline std::vector<double> cls_attention_row(const EncoderOutput& out, std::size_t layer) {
    if (layer >= out.attn.size()) throw ContractError("layer " + std::to_string(layer) + " out of range");
    const std::size_t T = out.tokens;
    std::vector<double> v(T - 1, 0.0);
    for (std::size_t h = 0; h < out.heads; ++h)
        for (std::size_t j = 1; j < T; ++j) v[j - 1] += out.attn_at(layer, h, 0, j);
    for (auto& x : v) x /= static_cast<double>(out.heads);
    return v;
}

/// Same values reshaped to the sqrt(N) x sqrt(N) patch grid.
inline Tensor cls_attention_map(const EncoderOutput& out, std::size_t layer) {
    auto v = cls_attention_row(out, layer);
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(v.size()))));
    if (side * side != v.size()) throw ShapeError("grid: N=" + std::to_string(v.size()) + " is not a perfect square");
    return Tensor::from({side, side}, std::move(v));
}

}  // namespace pipmm
