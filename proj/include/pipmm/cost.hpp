#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "pipmm/model.hpp"
#include "pipmm/profile.hpp"
#include "pipmm/synth.hpp"

namespace pipmm {

// Closed-form matmul FLOPs (2mkn per product, attention counted as QK^T plus PV).

inline std::uint64_t block_flops(std::uint64_t T, std::uint64_t d) { return 24 * T * d * d + 4 * T * T * d; }

inline std::uint64_t lm_forward_flops(const LMConfig& c, std::uint64_t T) {
    return c.n_layers * block_flops(T, c.d_llm) + 2 * T * c.d_llm * c.vocab_size;
}

inline std::uint64_t vit_flops(const ViTConfig& c) {
    const std::uint64_t N = c.num_patches(), T = N + 1;
    return 2 * N * c.patch_len() * c.dim + c.layers * block_flops(T, c.dim);
}

inline std::uint64_t bridge_flops(const BridgeConfig& c) {
    std::uint64_t f = 2 * c.d_in * c.d_in;
    for (std::size_t i = 0; i < c.layers(); ++i) {
        const std::uint64_t in = i == 0 ? c.d_in : c.d_hidden;
        const std::uint64_t out = i + 1 == c.layers() ? c.d_out : c.d_hidden;
        f += 2 * in * out;
    }
    return f;
}

inline std::uint64_t adapter_flops(const ModelConfig& c, std::size_t keep) {
    const std::uint64_t N = c.vit.num_patches(), D = c.vit.dim, dl = c.lm.d_llm;
    if (c.adapter.kind == AdapterKind::linear_projector) return 2 * N * D * dl;
    const std::uint64_t q = keep ? keep : c.adapter.queries;
    return 2 * q * D * D + 4 * N * D * D + 4 * q * N * D + 2 * q * D * dl;
}

/// Greedy decode without KV cache: step t runs the LM over q0 + t positions.
inline std::uint64_t generate_flops(const LMConfig& c, std::uint64_t q0, std::size_t steps) {
    std::uint64_t f = 0;
    for (std::size_t t = 0; t < steps; ++t) f += lm_forward_flops(c, q0 + t);
    return f;
}

struct CostReport {
    std::size_t keep = 0;
    std::size_t visual_tokens = 0;
    std::size_t llm_input_len = 0;
    std::uint64_t flops_prompt = 0, flops_bridge = 0, flops_vision = 0, flops_adapter = 0, flops_llm = 0;
    std::uint64_t flops_total = 0;
    std::uint64_t analytic_llm = 0, analytic_total = 0;
    std::size_t analytic_input_len = 0;
    std::int64_t peak_live_floats = 0;
    double wall_ms = 0.0;
};

inline CostReport analytic_cost(const ModelConfig& c, Arm arm, std::size_t prompt_len, std::size_t keep,
                                std::size_t max_new) {
    CostReport r;
    const std::size_t M = c.visual_token_count();
    r.keep = keep ? keep : M;
    r.visual_tokens = r.keep;
    r.analytic_input_len = r.keep + prompt_len;
    r.analytic_llm = generate_flops(c.lm, r.analytic_input_len, max_new);
    r.analytic_total = r.analytic_llm + vit_flops(c.vit) + adapter_flops(c, c.adapter.kind == AdapterKind::linear_projector ? 0 : r.keep);
    if (arm == Arm::pip) r.analytic_total += lm_forward_flops(c.lm, prompt_len) + bridge_flops(c.bridge);
    return r;
}

/// Runs the full generate path (fixed `max_new` steps) per keep value; FLOPs and peak floats
/// from one run, wall-clock as the median of `repeats` runs after one warmup.
inline std::vector<CostReport> cost_profile(const MultimodalModel& m, const Sample& s,
                                            const std::vector<std::size_t>& keep_values, std::size_t rank_layer = 0,
                                            std::size_t max_new = 8, std::size_t repeats = 5) {
    const auto& cfg = m.config();
    const auto prompt = m.vocab().tokenize(s.prompt);
    std::vector<CostReport> out;
    for (auto keep : keep_values) {
        CostReport rep = analytic_cost(cfg, m.arm(), prompt.size(), keep, max_new);
        auto run = [&](CostReport* r) {
            profile::PeakScope peak;
            profile::FlopScope total;
            Tensor cls;
            if (m.arm() == Arm::pip) {
                profile::FlopScope f;
                auto pv = m.lm().summarize(prompt);
                if (r) r->flops_prompt = f.elapsed();
                profile::FlopScope g;
                cls = m.bridge()(pv);
                if (r) r->flops_bridge = g.elapsed();
            } else {
                cls = m.vit().class_token();
            }
            profile::FlopScope fv;
            auto enc = m.encode_with(s.image, cls);
            if (r) r->flops_vision = fv.elapsed();
            profile::FlopScope fa;
            VisualTokens v;
            if (cfg.adapter.kind == AdapterKind::linear_projector) {
                v = m.visual_tokens(enc);
                if (keep && keep < v.count()) v = compress_topk(v, cls_attention_row(enc, rank_layer), keep);
            } else {
                std::vector<std::size_t> rows;
                for (std::size_t i = 1; i < enc.z.rows(); ++i) rows.push_back(i);
                v = compress_queries(m.adapter(), gather_rows(enc.z, rows), keep ? keep : cfg.adapter.queries);
            }
            if (r) r->flops_adapter = fa.elapsed();
            auto in = m.build_llm_input(v, prompt);
            profile::FlopScope fl;
            m.lm().generate(in.embeddings, in.positions, max_new, false);
            if (r) {
                r->flops_llm = fl.elapsed();
                r->flops_total = total.elapsed();
                r->llm_input_len = in.length();
                r->visual_tokens = v.count();
                r->peak_live_floats = peak.peak_above_base();
            }
        };
        run(&rep);
        std::vector<double> times;
        for (std::size_t i = 0; i < repeats; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            run(nullptr);
            times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        std::sort(times.begin(), times.end());
        rep.wall_ms = times.empty() ? 0.0 : times[times.size() / 2];
        out.push_back(rep);
    }
    return out;
}

}  // namespace pipmm
