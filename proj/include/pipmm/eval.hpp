#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pipmm/model.hpp"
#include "pipmm/synth.hpp"

namespace pipmm {

struct EvalOptions {
    std::size_t keep = 0;        // 0 = no compression
    std::size_t rank_layer = 0;  // class-attention layer used for attn_topk
    std::size_t hit_layer = 0;   // class-attention layer used for the hit-rate
    std::size_t max_new = 8;
};

struct EvalReport {
    std::uint64_t dataset_id = 0;
    std::vector<std::string> predictions;
    std::vector<bool> correct;
    std::vector<bool> hits;
    double accuracy = 0.0;
    double hit_rate = 0.0;
    double target_mass = 0.0;

    std::size_t n() const { return correct.size(); }
};

/// Greedy-decode exact match with a caller-supplied answerer.
inline EvalReport evaluate_answers(const std::vector<Sample>& data,
                                   const std::function<std::string(const Sample&)>& answerer) {
    EvalReport r;
    r.dataset_id = dataset_fingerprint(data);
    for (auto& s : data) {
        auto a = answerer(s);
        r.correct.push_back(a == s.answer);
        r.predictions.push_back(std::move(a));
    }
    r.accuracy = data.empty() ? 0.0
                              : static_cast<double>(std::count(r.correct.begin(), r.correct.end(), true)) /
                                    static_cast<double>(data.size());
    return r;
}

struct HitRate {
    double rate = 0.0;
    double target_mass = 0.0;
    std::vector<bool> hits;
};

/// Argmax of the class-slot attention row (patch order, ties to the lower index) inside the target set.
inline HitRate attention_hitrate(const std::vector<Sample>& data,
                                 const std::function<std::vector<double>(const Sample&)>& attn_row) {
    HitRate h;
    for (auto& s : data) {
        auto row = attn_row(s);
        const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        const bool hit = std::find(s.target_patch_ids.begin(), s.target_patch_ids.end(), arg) != s.target_patch_ids.end();
        double mass = 0.0;
        for (auto t : s.target_patch_ids) mass += row.at(t);
        h.hits.push_back(hit);
        h.rate += hit ? 1.0 : 0.0;
        h.target_mass += mass;
    }
    if (!data.empty()) {
        h.rate /= static_cast<double>(data.size());
        h.target_mass /= static_cast<double>(data.size());
    }
    return h;
}

/// Accuracy and hit-rate from a single encode per sample.
inline EvalReport evaluate(const MultimodalModel& m, const std::vector<Sample>& data, const EvalOptions& opt = {}) {
    std::vector<std::vector<double>> rows;
    auto rep = evaluate_answers(data, [&](const Sample& s) {
        EncoderOutput enc;
        auto a = m.answer(s.image, s.prompt, opt.keep, opt.rank_layer, opt.max_new, &enc);
        rows.push_back(cls_attention_row(enc, opt.hit_layer));
        return a;
    });
    std::size_t i = 0;
    auto h = attention_hitrate(data, [&](const Sample&) { return rows[i++]; });
    rep.hits = h.hits;
    rep.hit_rate = h.rate;
    rep.target_mass = h.target_mass;
    return rep;
}

inline double evaluate_accuracy(const MultimodalModel& m, const std::vector<Sample>& data, std::size_t max_new = 8) {
    return evaluate_answers(data, [&](const Sample& s) { return m.answer(s.image, s.prompt, 0, 0, max_new); }).accuracy;
}

inline HitRate attention_hitrate(const MultimodalModel& m, const std::vector<Sample>& data, std::size_t layer) {
    return attention_hitrate(data, [&](const Sample& s) { return cls_attention_row(m.encode(s.image, s.prompt), layer); });
}

/// Normal-approximation binomial confidence interval.
inline std::pair<double, double> binomial_ci(double p, std::size_t n, double z = 1.96) {
    const double se = std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(std::max<std::size_t>(n, 1)));
    return {std::max(0.0, p - z * se), std::min(1.0, p + z * se)};
}

struct Comparison {
    std::size_t wins = 0, losses = 0, ties = 0;
    double win_rate() const {
        const auto n = wins + losses + ties;
        return n ? static_cast<double>(wins) / static_cast<double>(n) : 0.0;
    }
};

/// Per-sample exact-match comparison: win iff A correct and B wrong.
inline Comparison compare_runs(const EvalReport& a, const EvalReport& b) {
    if (a.dataset_id != b.dataset_id || a.n() != b.n())
        throw ContractError("compare_runs: reports come from different datasets");
    Comparison c;
    for (std::size_t i = 0; i < a.n(); ++i) {
        if (a.correct[i] == b.correct[i]) ++c.ties;
        else if (a.correct[i]) ++c.wins;
        else ++c.losses;
    }
    return c;
}

}  // namespace pipmm
