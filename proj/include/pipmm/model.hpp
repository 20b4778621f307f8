#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pipmm/bridge.hpp"
#include "pipmm/text_model.hpp"
#include "pipmm/visual_adapter.hpp"
#include "pipmm/vit.hpp"

namespace pipmm {

enum class Arm { baseline, pip };

struct ModelConfig {
    ViTConfig vit;
    LMConfig lm;
    BridgeConfig bridge;
    AdapterConfig adapter;
    Arm arm = Arm::pip;
    std::string alphabet = Vocab::default_alphabet;

    /// Fills derived widths and checks cross-module consistency.
    void finalize() {
        lm.vocab_size = Vocab(alphabet).size();
        bridge.d_in = lm.d_llm;
        bridge.d_hidden = lm.d_llm;
        bridge.d_out = vit.dim;
        adapter.d_vit = vit.dim;
        adapter.d_llm = lm.d_llm;
        vit.validate();
        lm.validate();
        bridge.validate();
        adapter.validate();
    }

    std::size_t visual_token_count() const {
        return adapter.kind == AdapterKind::linear_projector ? vit.num_patches() : adapter.queries;
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {
        {"vit",
         {{"height", c.vit.height}, {"width", c.vit.width}, {"channels", c.vit.channels}, {"patch", c.vit.patch},
          {"dim", c.vit.dim}, {"layers", c.vit.layers}, {"heads", c.vit.heads}, {"pos_init_std", c.vit.pos_init_std}}},
        {"lm",
         {{"d_llm", c.lm.d_llm}, {"layers", c.lm.n_layers}, {"heads", c.lm.n_heads}, {"max_seq_len", c.lm.max_seq_len},
          {"summarize", c.lm.summarize_mode == SummarizeMode::llm_last ? "llm_last" : "encoder_pool"}}},
        {"bridge", {{"kind", c.bridge.kind == BridgeKind::linear ? "linear" : "mlp"}, {"depth", c.bridge.depth}}},
        {"adapter",
         {{"kind", c.adapter.kind == AdapterKind::linear_projector ? "linear" : "resampler"},
          {"queries", c.adapter.queries},
          {"heads", c.adapter.heads}}},
        {"arm", c.arm == Arm::pip ? "pip" : "baseline"},
        {"alphabet", c.alphabet},
    };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto& v = j.at("vit");
    c.vit.height = v.at("height");
    c.vit.width = v.at("width");
    c.vit.channels = v.at("channels");
    c.vit.patch = v.at("patch");
    c.vit.dim = v.at("dim");
    c.vit.layers = v.at("layers");
    c.vit.heads = v.at("heads");
    c.vit.pos_init_std = v.at("pos_init_std");
    auto& l = j.at("lm");
    c.lm.d_llm = l.at("d_llm");
    c.lm.n_layers = l.at("layers");
    c.lm.n_heads = l.at("heads");
    c.lm.max_seq_len = l.at("max_seq_len");
    c.lm.summarize_mode = l.at("summarize") == "llm_last" ? SummarizeMode::llm_last : SummarizeMode::encoder_pool;
    c.bridge.kind = j.at("bridge").at("kind") == "linear" ? BridgeKind::linear : BridgeKind::mlp;
    c.bridge.depth = j.at("bridge").at("depth");
    auto& a = j.at("adapter");
    c.adapter.kind = a.at("kind") == "linear" ? AdapterKind::linear_projector : AdapterKind::query_resampler;
    c.adapter.queries = a.at("queries");
    c.adapter.heads = a.at("heads");
    c.arm = j.at("arm") == "pip" ? Arm::pip : Arm::baseline;
    c.alphabet = j.at("alphabet");
    c.finalize();
    return c;
}

/// LLM input Q = [V; embed(prompt); embed(answer[:-1])] with position ids.
/// Visual tokens keep their provenance index as position; text starts after the full visual count.
struct LlmInput {
    Tensor embeddings;
    std::vector<std::size_t> positions;
    std::size_t visual_count = 0;
    std::size_t prompt_len = 0;   // includes BOS
    std::vector<std::size_t> targets;  // answer ids followed by EOS; empty at inference

    std::size_t length() const { return positions.size(); }
};

inline const std::vector<std::string>& parameter_groups() {
    static const std::vector<std::string> g{"vit", "lm", "bridge", "visual_adapter"};
    return g;
}

class MultimodalModel {
public:
    MultimodalModel() = default;
    MultimodalModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.finalize();
        vocab_ = Vocab(cfg_.alphabet);
        Rng rng(seed);
        vit_ = VisionEncoder(cfg_.vit, rng);
        lm_ = LanguageModel(cfg_.lm, rng);
        bridge_ = Bridge(cfg_.bridge, rng);
        adapter_ = VisualAdapter(cfg_.adapter, rng);
        match_bridge_to_class_token();
    }

    MultimodalModel clone() const {
        MultimodalModel m = *this;
        m.visit("", [](const std::string&, Tensor& t) { t = t.clone(); });
        m.bridge_.visit_buffers("", [](const std::string&, Tensor& t) { t = t.clone(); });
        m.summary_cache_ = std::make_shared<std::unordered_map<std::string, std::vector<double>>>();
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    Arm arm() const { return cfg_.arm; }
    void set_arm(Arm a) { cfg_.arm = a; }
    /// Swaps in a freshly initialized bridge of another shape (d_in and d_out must match).
    void set_bridge_config(const BridgeConfig& bc, std::uint64_t seed) {
        if (bc.d_in != cfg_.bridge.d_in || bc.d_out != cfg_.bridge.d_out)
            throw ConfigError("bridge: input/output dims must match the model");
        cfg_.bridge = bc;
        Rng r(seed);
        bridge_ = Bridge(bc, r);
        match_bridge_to_class_token();
    }
    const Vocab& vocab() const { return vocab_; }
    VisionEncoder& vit() { return vit_; }
    const VisionEncoder& vit() const { return vit_; }
    LanguageModel& lm() { return lm_; }
    const LanguageModel& lm() const { return lm_; }
    Bridge& bridge() { return bridge_; }
    const Bridge& bridge() const { return bridge_; }
    VisualAdapter& adapter() { return adapter_; }
    const VisualAdapter& adapter() const { return adapter_; }

    /// Last bridge bias := I_class, so a bridge with zero last-layer weights reproduces the baseline.
    void match_bridge_to_class_token() {
        auto b = bridge_.layers().back().b.mutable_data();
        auto c = vit_.class_token().data();
        std::copy(c.begin(), c.end(), b.begin());
    }

    // Prompt summaries are cached only while the LM is frozen.
    void set_summary_cache(bool on) {
        cache_on_ = on;
        summary_cache_->clear();
    }

    Tensor prompt_vector(const std::string& prompt) const {
        if (cache_on_) {
            auto it = summary_cache_->find(prompt);
            if (it != summary_cache_->end()) return Tensor::from({cfg_.lm.d_llm}, it->second);
        }
        auto v = lm_.summarize(vocab_.tokenize(prompt));
        if (cache_on_) {
            (*summary_cache_)[prompt] = v.vec();
            return v.detach();
        }
        return v;
    }

    Tensor t_cls(const std::string& prompt) const { return bridge_(prompt_vector(prompt)); }

    Tensor class_vector(const std::string& prompt) const {
        return cfg_.arm == Arm::pip ? t_cls(prompt) : vit_.class_token();
    }

    EncoderOutput encode(const Tensor& image, const std::string& prompt) const {
        return vit_.encode_image(image, class_vector(prompt));
    }

    EncoderOutput encode_with(const Tensor& image, const Tensor& class_vec) const {
        return vit_.encode_image(image, class_vec);
    }

    /// Adapter over patch rows only (class row excluded).
    VisualTokens visual_tokens(const EncoderOutput& enc) const {
        const std::size_t T = enc.z.rows();
        std::vector<std::size_t> rows(T - 1);
        for (std::size_t i = 1; i < T; ++i) rows[i - 1] = i;
        return adapter_(gather_rows(enc.z, rows));
    }

    LlmInput build_llm_input(const VisualTokens& v, const std::vector<std::size_t>& prompt_ids,
                             const std::vector<std::size_t>& answer_ids = {}) const {
        if (v.count() > 0 && v.tokens.cols() != cfg_.lm.d_llm)
            throw ShapeError("visual token width " + std::to_string(v.tokens.cols()) + " != d_llm " +
                             std::to_string(cfg_.lm.d_llm));
        LlmInput in;
        in.visual_count = v.count();
        in.prompt_len = prompt_ids.size();
        std::vector<std::size_t> text = prompt_ids;
        if (!answer_ids.empty()) {
            text.insert(text.end(), answer_ids.begin(), answer_ids.end());
            in.targets = answer_ids;
            in.targets.push_back(Vocab::EOS);
        }
        auto emb = lm_.embed(text);
        in.embeddings = v.count() > 0 ? concat_rows({v.tokens, emb}) : emb;
        in.positions = v.provenance;
        for (std::size_t i = 0; i < text.size(); ++i) in.positions.push_back(v.full_count + i);
        return in;
    }

    /// Teacher-forced answer loss for one sample. With `drop` set, visual tokens are sub-sampled in place.
    Tensor sample_loss(const Tensor& image, const std::string& prompt, const std::string& answer,
                       const std::vector<std::size_t>* keep_idx = nullptr, LlmInput* seen = nullptr,
                       Tensor* logits_out = nullptr) const;

    std::string answer(const Tensor& image, const std::string& prompt, std::size_t keep, std::size_t rank_layer,
                       std::size_t max_new, EncoderOutput* enc_out = nullptr) const;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        const std::string p = prefix.empty() ? "" : prefix + ".";
        vit_.visit(p + "vit", f);
        lm_.visit(p + "lm", f);
        bridge_.visit(p + "bridge", f);
        adapter_.visit(p + "visual_adapter", f);
    }

    std::vector<NamedTensor> named_parameters() { return collect(*this, ""); }

    std::vector<NamedTensor> group_parameters(const std::string& group) {
        std::vector<NamedTensor> out;
        for (auto& p : named_parameters())
            if (p.name.rfind(group + ".", 0) == 0) out.push_back(p);
        return out;
    }

    std::vector<NamedTensor> named_buffers() {
        std::vector<NamedTensor> out;
        bridge_.visit_buffers("bridge", [&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
        return out;
    }

private:
    ModelConfig cfg_;
    Vocab vocab_;
    VisionEncoder vit_;
    LanguageModel lm_;
    Bridge bridge_;
    VisualAdapter adapter_;
    bool cache_on_ = false;
    std::shared_ptr<std::unordered_map<std::string, std::vector<double>>> summary_cache_ =
        std::make_shared<std::unordered_map<std::string, std::vector<double>>>();
};

/// Sum over answer targets of -log softmax(logits)[a_j]; row i predicts token i+1.
inline Tensor answer_loss(const Tensor& logits, const LlmInput& in) {
    if (in.targets.empty()) throw ContractError("answer_loss: sample has no answer positions");
    const std::size_t first = in.visual_count + in.prompt_len - 1;
    std::vector<std::size_t> rows(in.targets.size());
    for (std::size_t j = 0; j < rows.size(); ++j) rows[j] = first + j;
    return cross_entropy_rows(logits, rows, in.targets);
}

inline Tensor MultimodalModel::sample_loss(const Tensor& image, const std::string& prompt, const std::string& answer,
                                           const std::vector<std::size_t>* keep_idx, LlmInput* seen,
                                           Tensor* logits_out) const {
    auto enc = encode(image, prompt);
    auto v = visual_tokens(enc);
    if (keep_idx) v = select_tokens(v, *keep_idx);
    auto in = build_llm_input(v, vocab_.tokenize(prompt), vocab_.encode_raw(answer));
    auto out = lm_.forward_embeddings(in.embeddings, in.positions);
    auto loss = answer_loss(out.logits, in);
    if (logits_out) *logits_out = out.logits;
    if (seen) *seen = std::move(in);
    return loss;
}

inline std::string MultimodalModel::answer(const Tensor& image, const std::string& prompt, std::size_t keep,
                                           std::size_t rank_layer, std::size_t max_new,
                                           EncoderOutput* enc_out) const {
    auto enc = encode(image, prompt);
    auto v = visual_tokens(enc);
    if (keep > 0 && keep < v.count()) {
        if (cfg_.adapter.kind == AdapterKind::linear_projector) {
            v = compress_topk(v, cls_attention_row(enc, rank_layer), keep);
        } else {
            const std::size_t T = enc.z.rows();
            std::vector<std::size_t> rows(T - 1);
            for (std::size_t i = 1; i < T; ++i) rows[i - 1] = i;
            v = compress_queries(adapter_, gather_rows(enc.z, rows), keep);
        }
    }
    auto in = build_llm_input(v, vocab_.tokenize(prompt));
    auto ids = lm_.generate(in.embeddings, in.positions, max_new);
    if (enc_out) *enc_out = std::move(enc);
    return vocab_.decode(ids);
}

}  // namespace pipmm
