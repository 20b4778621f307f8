#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pipmm/model.hpp"
#include "pipmm/optim.hpp"
#include "pipmm/synth.hpp"

namespace pipmm {

enum class Stage { pretrain, finetune };

struct FreezeSpec {
    std::string stage;
    std::set<std::string> trainable;

    static FreezeSpec for_stage(Stage s) {
        if (s == Stage::pretrain) return {"pretrain", {"bridge"}};
        return {"finetune", {"bridge", "visual_adapter"}};
    }
};

/// Sets requires_grad so that exactly the listed groups are trainable; clears stale grads.
inline void freeze_for_stage(MultimodalModel& m, const FreezeSpec& spec) {
    const auto& groups = parameter_groups();
    for (auto& g : spec.trainable)
        if (std::find(groups.begin(), groups.end(), g) == groups.end())
            throw ConfigError("unknown parameter group '" + g + "'");
    for (auto& p : m.named_parameters()) {
        const auto group = p.name.substr(0, p.name.find('.'));
        p.tensor.set_requires_grad(spec.trainable.count(group) > 0);
        p.tensor.clear_grad();
    }
    m.set_summary_cache(spec.trainable.count("lm") == 0);
}

inline std::vector<NamedTensor> trainable_parameters(MultimodalModel& m) {
    std::vector<NamedTensor> out;
    for (auto& p : m.named_parameters())
        if (p.tensor.requires_grad()) out.push_back(p);
    return out;
}

struct MetricsRow {
    std::uint64_t step = 0;
    std::string stage;
    double loss = 0.0;         // mean per-sample answer loss over the epoch
    double exact_match = 0.0;  // teacher-forced argmax matches every target
    double seq_len_mean = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os << "step,stage,loss,exact_match,seq_len_mean\n";
    char buf[128];
    for (auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%llu,%s,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.step),
                      r.stage.c_str(), r.loss, r.exact_match, r.seq_len_mean);
        os << buf;
    }
    return os.str();
}

struct TrainOptions {
    std::string stage_name = "finetune";
    std::size_t epochs = 1;
    double lr = 1e-3;
    std::size_t batch = 8;
    std::uint64_t seed = 0;
    double drop_prob = 0.0;     // probability of training a sample on a random visual-token subset
    std::size_t drop_keep = 0;  // subset size; 0 means half
    std::size_t max_steps = 0;  // 0 = no cap
};

struct TrainState {
    OptimizerState opt;
    Rng rng;
    std::uint64_t step = 0;
};

/// Teacher-forced exact match: greedy argmax equals every target (answer chars and EOS).
inline bool teacher_forced_match(const Tensor& logits, const LlmInput& in) {
    const std::size_t first = in.visual_count + in.prompt_len - 1, V = logits.cols();
    for (std::size_t j = 0; j < in.targets.size(); ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < V; ++c)
            if (logits.at(first + j, c) > logits.at(first + j, best)) best = c;
        if (best != in.targets[j]) return false;
    }
    return true;
}

/// Mini-batch Adam over the currently trainable parameters. Deterministic given options and data order.
inline std::vector<MetricsRow> train(MultimodalModel& m, const std::vector<Sample>& data, const TrainOptions& opt,
                                     TrainState* state_io = nullptr,
                                     const std::function<void(const MetricsRow&)>& on_epoch = {}) {
    if (data.empty()) throw ContractError("train: empty dataset");
    auto params = trainable_parameters(m);
    if (params.empty()) throw ContractError("train: no trainable parameters (apply freeze_for_stage first)");
    TrainState local{OptimizerState{}, Rng(opt.seed), 0};
    TrainState& st = state_io ? *state_io : local;
    st.opt.mode = OptMode::adam;
    st.opt.lr = opt.lr;
    const std::size_t M = m.config().visual_token_count();
    const std::size_t drop_keep = opt.drop_keep ? opt.drop_keep : std::max<std::size_t>(1, M / 2);

    std::vector<MetricsRow> history;
    std::vector<std::size_t> order(data.size());
    for (std::size_t e = 0; e < opt.epochs; ++e) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        st.rng.shuffle(order);
        double loss_sum = 0.0, match = 0.0, len_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < order.size(); b += opt.batch) {
            if (opt.max_steps && st.step >= opt.max_steps) break;
            const std::size_t end = std::min(order.size(), b + opt.batch);
            const double inv = 1.0 / static_cast<double>(end - b);
            for (auto& p : params) p.tensor.zero_grad();
            for (std::size_t k = b; k < end; ++k) {
                const auto& s = data[order[k]];
                std::vector<std::size_t> keep_idx;
                const bool drop = opt.drop_prob > 0.0 && st.rng.uniform() < opt.drop_prob;
                if (drop) {
                    std::vector<std::size_t> all(M);
                    for (std::size_t i = 0; i < M; ++i) all[i] = i;
                    st.rng.shuffle(all);
                    keep_idx.assign(all.begin(), all.begin() + static_cast<long>(drop_keep));
                    std::sort(keep_idx.begin(), keep_idx.end());
                }
                Tape tape;
                LlmInput in;
                Tensor logits;
                Tensor loss;
                try {
                    loss = m.sample_loss(s.image, s.prompt, s.answer, drop ? &keep_idx : nullptr, &in, &logits);
                } catch (const NumericError& e) {
                    throw NumericError("divergence: non-finite forward at step " + std::to_string(st.step) + " (" +
                                       e.what() + ")");
                }
                const double lv = loss.item();
                if (!std::isfinite(lv))
                    throw NumericError("divergence: non-finite loss at step " + std::to_string(st.step));
                tape.backward(scale(loss, inv));
                loss_sum += lv;
                match += teacher_forced_match(logits, in) ? 1.0 : 0.0;
                len_sum += static_cast<double>(in.visual_count + in.prompt_len);
                ++seen;
            }
            optimizer_step(params, st.opt);
            ++st.step;
        }
        if (seen == 0) break;
        MetricsRow row{st.step, opt.stage_name, loss_sum / seen, match / seen, len_sum / seen};
        history.push_back(row);
        if (on_epoch) on_epoch(row);
    }
    return history;
}

// ---- backbone pretraining ----

struct VisionPretrainOptions {
    std::size_t epochs = 30;
    double lr = 2e-3;
    std::size_t batch = 16;
    double generic_prob = 0.1;
    bool cosine = true;  // cosine decay of lr to 0.1% over all steps
    std::uint64_t seed = 0;
};

/// Token-labeling pretraining of the ViT with a class-slot query port.
/// Generic samples (class slot = I_class) label each patch with its own color; query samples
/// (class slot = learned cell embedding) label every patch with the queried cell's color.
/// An auxiliary head on the first-layer class state predicts the queried color.
/// `on_epoch(epoch, mean_loss, query_hit)`: query_hit is the fraction of query samples whose
/// first-layer class-slot attention peaks on the queried cell.
inline std::vector<double> pretrain_vision(VisionEncoder& vit, const std::vector<Scene>& scenes,
                                           const VisionPretrainOptions& opt,
                                           const std::function<void(std::size_t, double, double)>& on_epoch = {}) {
    const std::size_t D = vit.config().dim, N = vit.config().num_patches();
    Rng rng(opt.seed);
    auto cell_queries = normal_tensor({N, D}, rng, 0.02);
    Linear token_head(D, 9, rng), class_head(D, 9, rng);
    std::vector<NamedTensor> params = collect(vit, "vit");
    for (auto& p : params) p.tensor.set_requires_grad(true);
    params.push_back({"cell_queries", cell_queries});
    for (auto& p : collect(token_head, "token_head")) params.push_back(p);
    for (auto& p : collect(class_head, "class_head")) params.push_back(p);
    OptimizerState st;
    st.lr = opt.lr;
    st.clip_norm = 0.0;
    const std::size_t total_steps = opt.epochs * ((scenes.size() + opt.batch - 1) / opt.batch);
    const std::size_t aux_layer = vit.config().layers >= 2 ? vit.config().layers - 2 : 0;

    std::vector<double> losses;
    std::vector<std::size_t> order(scenes.size());
    for (std::size_t e = 0; e < opt.epochs; ++e) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        double total = 0.0, hits = 0.0, queries = 0.0;
        for (std::size_t b = 0; b < order.size(); b += opt.batch) {
            const std::size_t end = std::min(order.size(), b + opt.batch);
            const double inv = 1.0 / static_cast<double>(end - b);
            for (auto& p : params) p.tensor.zero_grad();
            for (std::size_t k = b; k < end; ++k) {
                const auto& sc = scenes[order[k]];
                const bool generic = rng.uniform() < opt.generic_prob;
                const std::size_t cell = rng.below(N);
                Tape tape;
                auto cls = generic ? vit.class_token() : gather_rows(cell_queries, {cell}).reshape({D});
                auto out = vit.encode_image(sc.image, cls);
                if (!generic) {
                    auto row = cls_attention_row(out, 0);
                    hits += static_cast<double>(std::max_element(row.begin(), row.end()) - row.begin() ==
                                                static_cast<std::ptrdiff_t>(cell));
                    queries += 1.0;
                }
                std::vector<std::size_t> rows(N), tgt(N);
                for (std::size_t j = 0; j < N; ++j) {
                    rows[j] = j + 1;
                    tgt[j] = generic ? sc.cell_labels[j] : sc.cell_labels[cell];
                }
                auto logits = token_head(gather_rows(out.z, rows));
                std::vector<std::size_t> all(N);
                for (std::size_t j = 0; j < N; ++j) all[j] = j;
                auto tok_loss = scale(cross_entropy_rows(logits, all, tgt), 1.0 / static_cast<double>(N));
                const std::size_t ctgt =
                    generic ? *std::max_element(sc.cell_labels.begin(), sc.cell_labels.end()) : sc.cell_labels[cell];
                auto cls_state = gather_rows(out.layer_outputs.at(aux_layer), {0});
                auto cls_loss = cross_entropy_rows(class_head(cls_state), {0}, {ctgt});
                auto loss = add(tok_loss, cls_loss);
                total += loss.item();
                tape.backward(scale(loss, inv));
            }
            if (opt.cosine) {
                const double t = static_cast<double>(st.step) / static_cast<double>(total_steps);
                st.lr = opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
                st.lr = std::max(st.lr, opt.lr * 1e-3);
            }
            optimizer_step(params, st);
        }
        const double mean_loss = total / static_cast<double>(scenes.size());
        losses.push_back(mean_loss);
        if (on_epoch) on_epoch(e, mean_loss, queries > 0 ? hits / queries : 0.0);
    }
    return losses;
}

}  // namespace pipmm
