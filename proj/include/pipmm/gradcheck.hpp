#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pipmm/model.hpp"

namespace pipmm {

struct GradCheckResult {
    std::string name;
    std::string module;
    double error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return error < tolerance; }
};

inline Tensor random_tensor(Shape s, Rng& rng, double std = 1.0, bool requires_grad = true) {
    auto t = Tensor::zeros(std::move(s), requires_grad);
    for (auto& x : t.mutable_data()) x = rng.normal(0.0, std);
    return t;
}

/// Draws a generic, well-conditioned point: matrices ~ N(0, 1/fan_in), vectors jittered around their init.
inline void randomize_parameters(const std::vector<NamedTensor>& ps, Rng& rng) {
    for (const auto& p : ps) {
        auto t = p.tensor;
        auto d = t.mutable_data();
        if (t.dim() == 2) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
            for (auto& x : d) x = rng.normal(0.0, sd);
        } else {
            for (auto& x : d) x += rng.normal(0.0, 0.1);
        }
    }
}

inline std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& ps) {
    std::vector<Tensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}

/// Toy-size configuration for gradient checks: D=8, L=2, N=4, d_llm=16.
inline ModelConfig toy_model_config() {
    ModelConfig c;
    c.vit.height = c.vit.width = 8;
    c.vit.patch = 4;
    c.vit.dim = 8;
    c.vit.layers = 2;
    c.vit.heads = 2;
    c.lm.d_llm = 16;
    c.lm.n_layers = 2;
    c.lm.n_heads = 2;
    c.lm.max_seq_len = 48;
    c.bridge.kind = BridgeKind::mlp;
    c.bridge.depth = 4;
    c.alphabet = " abcdefghijklmnopqrstuvwxyz?";
    c.finalize();
    return c;
}

/// Gradient checks of every differentiable op and of the full image + prompt -> loss pipeline.
/// Each check runs at `points` random points and reports the worst error.
inline std::vector<GradCheckResult> gradient_suite(std::uint64_t seed = 7, std::size_t points = 3) {
    std::vector<GradCheckResult> out;
    constexpr double lin = 1e-6, nonlin = 1e-4;
    // five-point central stencil: truncation O(h^4) lets h sit well above the rounding floor
    constexpr double h = 5e-4;
    constexpr int order = 4;
    Rng rng(seed);
    auto run = [&](const std::string& name, const std::string& module, double tol, auto&& make) {
        double worst = 0.0;
        for (std::size_t p = 0; p < points; ++p) worst = std::max(worst, make());
        out.push_back({name, module, worst, tol});
    };
    auto check = [&](const std::function<Tensor()>& f, const std::vector<Tensor>& ps) {
        return finite_diff_check(f, ps, h, {}, order);
    };
    auto weighted = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

    run("matmul", "tensor_autodiff", lin, [&] {
        auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng, 1.0, false);
        return check([&] { return weighted(matmul(a, b), w); }, {a, b});
    });
    run("add_sub_mul_scale", "tensor_autodiff", nonlin, [&] {
        auto a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
        return check([&] { return sum(mul(scale(add(a, b), 0.7), sub(a, b))); }, {a, b});
    });
    run("add_bias", "tensor_autodiff", lin, [&] {
        auto x = random_tensor({4, 3}, rng), b = random_tensor({3}, rng), w = random_tensor({4, 3}, rng, 1.0, false);
        return check([&] { return weighted(add_bias(x, b), w); }, {x, b});
    });
    run("gather_concat_mean", "tensor_autodiff", lin, [&] {
        auto x = random_tensor({4, 3}, rng), y = random_tensor({2, 3}, rng), w = random_tensor({3}, rng, 1.0, false);
        return check(
            [&] { return weighted(mean_rows(concat_rows({gather_rows(x, {2, 0, 2}), y})), w); }, {x, y});
    });
    run("softmax_rows", "tensor_autodiff", nonlin, [&] {
        auto x = random_tensor({3, 5}, rng), w = random_tensor({3, 5}, rng, 1.0, false);
        return check([&] { return weighted(softmax_rows(x), w); }, {x});
    });
    run("layer_norm", "tensor_autodiff", nonlin, [&] {
        auto x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
        auto w = random_tensor({3, 5}, rng, 1.0, false);
        return check([&] { return weighted(layer_norm(x, g, b), w); }, {x, g, b});
    });
    run("gelu", "tensor_autodiff", nonlin, [&] {
        auto x = random_tensor({6}, rng, 2.0), w = random_tensor({6}, rng, 1.0, false);
        return check([&] { return weighted(gelu(x), w); }, {x});
    });
    run("attention", "tensor_autodiff", nonlin, [&] {
        auto q = random_tensor({4, 8}, rng), k = random_tensor({5, 8}, rng), v = random_tensor({5, 8}, rng);
        auto w = random_tensor({4, 8}, rng, 1.0, false);
        return check([&] { return weighted(attention(q, k, v, 2, false), w); }, {q, k, v});
    });
    run("attention_causal", "tensor_autodiff", nonlin, [&] {
        auto q = random_tensor({4, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
        auto w = random_tensor({4, 8}, rng, 1.0, false);
        return check([&] { return weighted(attention(q, k, v, 2, true), w); }, {q, k, v});
    });
    run("cross_entropy_rows", "tensor_autodiff", nonlin, [&] {
        auto x = random_tensor({4, 6}, rng);
        return check([&] { return cross_entropy_rows(x, {1, 2, 3}, {0, 5, 2}); }, {x});
    });

    run("encoder_block", "vit_encoder", 1e-5, [&] {
        Rng r(rng.next());
        Block blk(8, 2, r);
        randomize_parameters(collect(blk, "b"), r);
        auto z = random_tensor({5, 8}, rng);
        auto w = random_tensor({5, 8}, rng, 1.0, false);
        return check([&] { return weighted(blk(z, false), w); }, {z});
    });
    run("t_cls", "pip_bridge", 1e-5, [&] {
        Rng r(rng.next());
        BridgeConfig bc{BridgeKind::mlp, 3, 16, 16, 8};
        Bridge br(bc, r);
        randomize_parameters(collect(br, "bridge"), r);
        auto v = random_tensor({16}, rng, 1.0, false);
        return check([&] { auto t = br(v); return sum(mul(t, t)); }, tensors_of(collect(br, "bridge")));
    });
    run("project_linear", "visual_adapter", lin, [&] {
        Rng r(rng.next());
        VisualAdapter ad(AdapterConfig{AdapterKind::linear_projector, 8, 16, 0, 1}, r);
        auto z = random_tensor({4, 8}, rng);
        auto w = random_tensor({4, 16}, rng, 1.0, false);
        std::vector<Tensor> ps{z};
        for (auto& p : collect(ad, "a")) ps.push_back(p.tensor);
        return check([&] { return weighted(ad.project_linear(z).tokens, w); }, ps);
    });
    run("resample", "visual_adapter", nonlin, [&] {
        Rng r(rng.next());
        VisualAdapter ad(AdapterConfig{AdapterKind::query_resampler, 8, 16, 3, 2}, r);
        randomize_parameters(collect(ad, "a"), r);
        auto z = random_tensor({4, 8}, rng);
        auto w = random_tensor({3, 16}, rng, 1.0, false);
        std::vector<Tensor> ps{z};
        for (auto& p : collect(ad, "a")) ps.push_back(p.tensor);
        return check([&] { return weighted(ad.resample(z).tokens, w); }, ps);
    });

    run("vit_full_stack", "vit_encoder", nonlin, [&] {
        auto cfg = toy_model_config();
        Rng r(rng.next());
        VisionEncoder vit(cfg.vit, r);
        auto named = collect(vit, "vit");
        randomize_parameters(named, r);
        auto ps = tensors_of(named);
        auto img = random_tensor({8, 8, 3}, rng, 1.0, false);
        auto w = random_tensor({5, 8}, rng, 1.0, false);
        return check([&] { return weighted(vit.encode_image(img, vit.class_token()).z, w); }, ps);
    });
    run("lm_forward", "text_model", nonlin, [&] {
        auto cfg = toy_model_config();
        Rng r(rng.next());
        LanguageModel lm(cfg.lm, r);
        auto named = collect(lm, "lm");
        randomize_parameters(named, r);
        auto ps = tensors_of(named);
        std::vector<std::size_t> ids{1, 5, 9, 3, 7};
        return check(
            [&] { return cross_entropy_rows(lm.forward(ids).logits, {0, 1, 2, 3}, {5, 9, 3, 7}); }, ps);
    });
    run("pip_pipeline", "training_harness", nonlin, [&] {
        auto cfg = toy_model_config();
        cfg.arm = Arm::pip;
        MultimodalModel m(cfg, rng.next());
        Rng r(rng.next());
        auto named = m.named_parameters();
        for (auto& p : named) p.tensor.set_requires_grad(true);
        randomize_parameters(named, r);
        // whitening fitted on more prompts than d_llm so it has no null space
        std::vector<Tensor> hs;
        for (char cell = 'a'; cell <= 'd'; ++cell)
            for (const char* w : {"what is at ", "what color is ", "where is ", "find the ", "is there a ", "describe "})
                hs.push_back(m.prompt_vector(std::string(w) + cell + "?").detach());
        m.bridge().fit_whitening(hs, 1e-2);
        auto ps = tensors_of(named);
        auto img = random_tensor({8, 8, 3}, rng, 1.0, false);
        return check([&] { return m.sample_loss(img, "what is at b?", "red"); }, ps);
    });
    return out;
}

}  // namespace pipmm
