#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include "pipmm/nn.hpp"

namespace pipmm {

/// Character vocabulary with reserved PAD=0, BOS=1, EOS=2.
class Vocab {
public:
    static constexpr std::size_t PAD = 0, BOS = 1, EOS = 2;
    static constexpr const char* default_alphabet = " abcdefghijklmnopqrstuvwxyz0123456789?";

    explicit Vocab(std::string alphabet = default_alphabet) : alphabet_(std::move(alphabet)) {
        tokens_ = {"<pad>", "<bos>", "<eos>"};
        index_.fill(-1);
        for (char c : alphabet_) {
            auto u = static_cast<unsigned char>(c);
            if (index_[u] >= 0) throw ConfigError(std::string("duplicate vocab character '") + c + "'");
            index_[u] = static_cast<int>(tokens_.size());
            tokens_.emplace_back(1, c);
        }
    }

    std::size_t size() const { return tokens_.size(); }
    const std::string& alphabet() const { return alphabet_; }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }

    std::size_t id(char c) const {
        int i = index_[static_cast<unsigned char>(c)];
        if (i < 0) throw TokenizeError(std::string("character '") + c + "' is not in the vocabulary");
        return static_cast<std::size_t>(i);
    }

    /// BOS-prefixed ids.
    std::vector<std::size_t> tokenize(const std::string& text) const {
        std::vector<std::size_t> out{BOS};
        for (char c : text) out.push_back(id(c));
        return out;
    }

    /// Ids without the BOS prefix, for answers.
    std::vector<std::size_t> encode_raw(const std::string& text) const {
        std::vector<std::size_t> out;
        for (char c : text) out.push_back(id(c));
        return out;
    }

    /// Drops reserved ids.
    std::string decode(const std::vector<std::size_t>& ids) const {
        std::string s;
        for (auto i : ids)
            if (i > EOS) s += tokens_.at(i);
        return s;
    }

    std::string serialize() const {
        std::string s;
        for (auto& t : tokens_) s += t + "\n";
        return s;
    }

private:
    std::string alphabet_;
    std::vector<std::string> tokens_;
    std::array<int, 256> index_{};
};

enum class SummarizeMode { llm_last, encoder_pool };

struct LMConfig {
    std::size_t vocab_size = 0;
    std::size_t d_llm = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 64;
    SummarizeMode summarize_mode = SummarizeMode::llm_last;

    void validate() const {
        if (vocab_size <= Vocab::EOS) throw ConfigError("model.llm_vocab: too small");
        if (d_llm == 0 || n_heads == 0 || d_llm % n_heads)
            throw ConfigError("model.llm_heads: d_llm must be divisible by heads");
        if (max_seq_len == 0) throw ConfigError("model.llm_max_seq: must be positive");
    }
};

struct LMOutput {
    Tensor logits;  // [t x vocab]
    Tensor hidden;  // [t x d_llm], final residual stream before the output norm
};

class LanguageModel {
public:
    LanguageModel() = default;
    LanguageModel(const LMConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        tok_ = normal_tensor({cfg.vocab_size, cfg.d_llm}, rng, 1.0);
        pos_ = normal_tensor({cfg.max_seq_len, cfg.d_llm}, rng, 0.02);
        for (std::size_t i = 0; i < cfg.n_layers; ++i) blocks_.emplace_back(cfg.d_llm, cfg.n_heads, rng);
        lnf_ = LayerNorm(cfg.d_llm);
        head_ = Linear(cfg.d_llm, cfg.vocab_size, rng);
    }

    const LMConfig& config() const { return cfg_; }

    Tensor embed(const std::vector<std::size_t>& ids) const { return gather_rows(tok_, ids); }

    /// Runs the stack over input embeddings with explicit position ids.
    LMOutput forward_embeddings(const Tensor& x, const std::vector<std::size_t>& positions, bool causal = true) const {
        if (x.cols() != cfg_.d_llm)
            throw ShapeError("LM input width " + std::to_string(x.cols()) + " != d_llm " + std::to_string(cfg_.d_llm));
        if (positions.size() != x.rows()) throw ShapeError("position ids do not match input length");
        for (auto p : positions)
            if (p >= cfg_.max_seq_len)
                throw ShapeError("sequence length: position " + std::to_string(p) + " exceeds max_seq_len " +
                                 std::to_string(cfg_.max_seq_len));
        auto h = add(x, gather_rows(pos_, positions));
        for (auto& b : blocks_) h = b(h, causal);
        return {head_(lnf_(h)), h};
    }

    LMOutput forward(const std::vector<std::size_t>& ids) const {
        if (ids.empty()) throw ContractError("lm_forward on empty input");
        if (ids.size() > cfg_.max_seq_len)
            throw ShapeError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                             std::to_string(cfg_.max_seq_len));
        return forward_embeddings(embed(ids), iota(0, ids.size()));
    }

    /// Prompt-only pass. llm_last: hidden state at the final prompt token; encoder_pool: mean of bidirectional states.
    Tensor summarize(const std::vector<std::size_t>& prompt) const {
        if (prompt.empty()) throw ContractError("summarize_prompt on empty prompt");
        if (cfg_.summarize_mode == SummarizeMode::llm_last) {
            auto out = forward(prompt);
            return gather_rows(out.hidden, {prompt.size() - 1}).reshape({cfg_.d_llm});
        }
        auto out = forward_embeddings(embed(prompt), iota(0, prompt.size()), false);
        return mean_rows(out.hidden);
    }

    /// Greedy decoding; the first new token continues after the largest prefix position.
    std::vector<std::size_t> generate(const Tensor& prefix, const std::vector<std::size_t>& positions,
                                      std::size_t max_new, bool stop_at_eos = true) const {
        if (max_new == 0) throw ContractError("generate: max_new must be positive");
        if (prefix.rows() == 0) throw ContractError("generate: empty prefix");
        std::size_t next_pos = *std::max_element(positions.begin(), positions.end()) + 1;
        std::vector<Tensor> parts{prefix};
        std::vector<std::size_t> pos = positions;
        std::vector<std::size_t> out;
        for (std::size_t step = 0; step < max_new; ++step) {
            auto x = parts.size() == 1 ? parts[0] : concat_rows(parts);
            auto res = forward_embeddings(x, pos);
            const std::size_t v = cfg_.vocab_size, last = res.logits.rows() - 1;
            std::size_t best = 0;
            for (std::size_t j = 1; j < v; ++j)
                if (res.logits.at(last, j) > res.logits.at(last, best)) best = j;
            out.push_back(best);
            if (stop_at_eos && best == Vocab::EOS) break;
            parts.push_back(embed({best}));
            pos.push_back(next_pos++);
        }
        return out;
    }

    std::vector<std::size_t> generate(const Tensor& prefix, std::size_t max_new) const {
        return generate(prefix, iota(0, prefix.rows()), max_new);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".tok", tok_);
        f(prefix + ".pos", pos_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + ".blocks." + std::to_string(i), f);
        lnf_.visit(prefix + ".lnf", f);
        head_.visit(prefix + ".head", f);
    }

    static std::vector<std::size_t> iota(std::size_t from, std::size_t n) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = from + i;
        return v;
    }

private:
    LMConfig cfg_;
    Tensor tok_, pos_;
    std::vector<Block> blocks_;
    LayerNorm lnf_;
    Linear head_;
};

}  // namespace pipmm
