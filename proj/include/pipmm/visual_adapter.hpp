#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "pipmm/nn.hpp"

namespace pipmm {

enum class AdapterKind { linear_projector, query_resampler };

struct AdapterConfig {
    AdapterKind kind = AdapterKind::linear_projector;
    std::size_t d_vit = 32;
    std::size_t d_llm = 32;
    std::size_t queries = 8;
    std::size_t heads = 4;

    void validate() const {
        if (kind == AdapterKind::query_resampler) {
            if (queries == 0) throw ConfigError("model.adapter_queries: must be at least 1");
            if (heads == 0 || d_vit % heads) throw ConfigError("model.adapter_heads: width not divisible by heads");
        }
    }
};

struct VisualTokens {
    Tensor tokens;                       // [M x d_llm]; undefined when M == 0
    std::vector<std::size_t> provenance; // source patch (linear) or query index (resampler)
    std::size_t full_count = 0;          // M before compression

    std::size_t count() const { return provenance.size(); }
};

class VisualAdapter {
public:
    VisualAdapter() = default;
    VisualAdapter(const AdapterConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        if (cfg.kind == AdapterKind::linear_projector) {
            proj_ = Linear(cfg.d_vit, cfg.d_llm, rng);
        } else {
            queries_ = normal_tensor({cfg.queries, cfg.d_vit}, rng, 0.02);
            wq_ = Linear(cfg.d_vit, cfg.d_vit, rng);
            wk_ = Linear(cfg.d_vit, cfg.d_vit, rng, 0.02, false);
            wv_ = Linear(cfg.d_vit, cfg.d_vit, rng);
            proj_ = Linear(cfg.d_vit, cfg.d_llm, rng);
        }
    }

    const AdapterConfig& config() const { return cfg_; }
    Linear& projection() { return proj_; }
    Tensor& queries() { return queries_; }

    /// Per-token affine map; z_patches excludes the class row.
    VisualTokens project_linear(const Tensor& z_patches) const {
        check_patches(z_patches);
        VisualTokens v;
        v.tokens = proj_(z_patches);
        v.provenance = iota(z_patches.rows());
        v.full_count = z_patches.rows();
        return v;
    }

    /// Cross-attention from the first `use_queries` queries to the patches, then projection to d_llm.
    VisualTokens resample(const Tensor& z_patches, std::size_t use_queries = 0,
                          std::vector<double>* probs = nullptr) const {
        if (cfg_.kind != AdapterKind::query_resampler) throw ContractError("resample on a linear adapter");
        check_patches(z_patches);
        const std::size_t q = use_queries ? use_queries : cfg_.queries;
        if (q == 0 || q > cfg_.queries) throw ContractError("resample: query count out of range");
        auto qs = q == cfg_.queries ? queries_ : gather_rows(queries_, iota(q));
        auto o = attention(wq_(qs), wk_(z_patches), wv_(z_patches), cfg_.heads, false, probs);
        VisualTokens v;
        v.tokens = proj_(o);
        v.provenance = iota(q);
        v.full_count = cfg_.queries;
        return v;
    }

    VisualTokens operator()(const Tensor& z_patches) const {
        return cfg_.kind == AdapterKind::linear_projector ? project_linear(z_patches) : resample(z_patches);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        if (cfg_.kind == AdapterKind::query_resampler) {
            f(prefix + ".queries", queries_);
            wq_.visit(prefix + ".wq", f);
            wk_.visit(prefix + ".wk", f);
            wv_.visit(prefix + ".wv", f);
        }
        proj_.visit(prefix + ".proj", f);
    }

    static std::vector<std::size_t> iota(std::size_t n) {
        std::vector<std::size_t> v(n);
        std::iota(v.begin(), v.end(), std::size_t{0});
        return v;
    }

private:
    void check_patches(const Tensor& z) const {
        if (z.dim() != 2 || z.cols() != cfg_.d_vit)
            throw ShapeError("adapter expects [N x " + std::to_string(cfg_.d_vit) + "], got " + shape_str(z.shape()));
    }

    AdapterConfig cfg_;
    Linear proj_;
    Tensor queries_;
    Linear wq_, wk_, wv_;
};

/// Indices of the `keep` highest scores, returned in ascending index order; ties go to the lower index.
inline std::vector<std::size_t> topk_indices(const std::vector<double>& scores, std::size_t keep) {
    if (keep < 1 || keep > scores.size())
        throw ContractError("keep=" + std::to_string(keep) + " outside [1, " + std::to_string(scores.size()) + "]");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// attn_topk: keeps the selected tokens unchanged, original order preserved.
inline VisualTokens compress_topk(const VisualTokens& v, const std::vector<double>& scores, std::size_t keep) {
    if (scores.size() != v.count()) throw ShapeError("score count does not match token count");
    auto idx = topk_indices(scores, keep);
    if (keep == v.count()) return v;
    VisualTokens out;
    out.tokens = gather_rows(v.tokens, idx);
    for (auto i : idx) out.provenance.push_back(v.provenance[i]);
    out.full_count = v.full_count;
    return out;
}

/// query_halving: reruns the resampler with only the first `keep` queries.
inline VisualTokens compress_queries(const VisualAdapter& adapter, const Tensor& z_patches, std::size_t keep) {
    if (keep < 1 || keep > adapter.config().queries)
        throw ContractError("keep=" + std::to_string(keep) + " outside [1, " + std::to_string(adapter.config().queries) + "]");
    return adapter.resample(z_patches, keep);
}

/// Selects tokens at the given positions (used for training-time token dropping).
inline VisualTokens select_tokens(const VisualTokens& v, const std::vector<std::size_t>& idx) {
    VisualTokens out;
    out.tokens = gather_rows(v.tokens, idx);
    for (auto i : idx) out.provenance.push_back(v.provenance.at(i));
    out.full_count = v.full_count;
    return out;
}

}  // namespace pipmm
