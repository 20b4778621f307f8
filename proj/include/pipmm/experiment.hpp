#pragma once

#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "pipmm/checkpoint.hpp"
#include "pipmm/eval.hpp"
#include "pipmm/training.hpp"

namespace pipmm {

using LogFn = std::function<void(const std::string&)>;

/// Everything needed to build a backbone and train/evaluate one arm.
struct ExperimentConfig {
    ModelConfig model;
    SceneConfig scene;

    std::uint64_t backbone_seed = 1234;
    std::size_t vision_scenes = 4000;
    std::size_t vision_epochs = 30;
    double vision_lr = 2e-3;
    std::size_t vl_samples = 6000;
    std::size_t vl_epochs = 12;
    double vl_lr = 1e-3;

    std::size_t n_confusion = 3000;
    std::size_t n_caption = 1500;
    std::size_t n_test = 400;
    std::size_t batch = 8;
    std::size_t stage1_epochs = 1;
    double stage1_lr = 1e-3;
    std::size_t stage2_epochs = 20;
    double stage2_lr = 3e-3;
    double drop_prob = 0.8;
    double whiten_ridge = 1e-2;
    std::size_t rank_layer = 0;
    std::size_t max_new = 8;

    std::size_t half_keep() const { return std::max<std::size_t>(1, model.visual_token_count() / 2); }
};

inline std::string backbone_key(const ExperimentConfig& c) {
    auto j = to_json(c.model);
    j.erase("arm");
    j.erase("bridge");
    j["format"] = 3;
    j["scene"] = {c.scene.image, c.scene.patch, c.scene.n_big, c.scene.n_small};
    j["backbone"] = {c.backbone_seed, c.vision_scenes, c.vision_epochs, c.vision_lr, c.vl_samples, c.vl_epochs, c.vl_lr,
                     c.batch};
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : j.dump()) h = (h ^ ch) * 1099511628211ull;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Large-object questions, captions and confusion questions interleaved 1:1:1.
inline std::vector<Sample> backbone_mix(const SceneConfig& sc, std::uint64_t seed, std::size_t n) {
    const std::size_t per = (n + 2) / 3;
    auto big = gen_dataset(sc, seed, per, SampleKind::big_question);
    auto cap = gen_dataset(sc, seed + 1, per, SampleKind::caption);
    auto conf = gen_dataset(sc, seed + 2, per, SampleKind::confusion);
    std::vector<Sample> out;
    for (std::size_t i = 0; out.size() < n; ++i) {
        const auto& src = i % 3 == 0 ? big : i % 3 == 1 ? cap : conf;
        out.push_back(src[i / 3]);
    }
    return out;
}

/// Deterministic shared backbone: ViT query-port pretraining, then LM + adapter on the frozen ViT.
inline MultimodalModel build_backbone(const ExperimentConfig& c, const LogFn& log = {}) {
    ModelConfig mc = c.model;
    mc.arm = Arm::baseline;
    MultimodalModel m(mc, c.backbone_seed);
    std::vector<Scene> scenes;
    gen_dataset(c.scene, c.backbone_seed + 1, c.vision_scenes, SampleKind::caption, &scenes);
    VisionPretrainOptions vo;
    vo.epochs = c.vision_epochs;
    vo.lr = c.vision_lr;
    vo.seed = c.backbone_seed + 2;
    pretrain_vision(m.vit(), scenes, vo, [&](std::size_t e, double loss, double hit) {
        if (log) log("vision epoch " + std::to_string(e) + " loss " + std::to_string(loss) + " query_hit " + std::to_string(hit));
    });
    scenes.clear();
    freeze_for_stage(m, FreezeSpec{"backbone", {"lm", "visual_adapter"}});
    TrainOptions to;
    to.stage_name = "backbone";
    to.epochs = c.vl_epochs;
    to.lr = c.vl_lr;
    to.batch = c.batch;
    to.seed = c.backbone_seed + 3;
    train(m, backbone_mix(c.scene, c.backbone_seed + 4, c.vl_samples), to, nullptr, [&](const MetricsRow& r) {
        if (log) log("backbone step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
    });
    freeze_for_stage(m, FreezeSpec{"frozen", {}});
    m.match_bridge_to_class_token();
    return m;
}

/// Loads the backbone from `dir` when a matching file exists, otherwise builds and stores it.
inline MultimodalModel cached_backbone(const ExperimentConfig& c, const std::string& dir, const LogFn& log = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto path = (fs::path(dir) / ("backbone-" + backbone_key(c) + ".ckpt")).string();
    if (fs::exists(path)) {
        if (log) log("loading backbone " + path);
        auto m = load_checkpoint(path);
        return m;
    }
    auto m = build_backbone(c, log);
    const auto tmp = path + ".tmp";
    save_checkpoint(m, tmp);
    fs::rename(tmp, path);
    return m;
}

struct ArmData {
    std::vector<Sample> confusion, captions, test;
};

inline ArmData make_arm_data(const ExperimentConfig& c, std::uint64_t seed) {
    const std::uint64_t base = 1000003ull * (seed + 1);
    return {gen_dataset(c.scene, base, c.n_confusion), gen_dataset(c.scene, base + 1, c.n_caption, SampleKind::caption),
            gen_dataset(c.scene, base + 2, c.n_test)};
}

struct ArmResult {
    MultimodalModel model;
    std::vector<MetricsRow> history;
    TrainState state;
};

/// Baseline: adapter fine-tuning on the confusion set. PIP: fresh bridge (whitened input, last bias = I_class),
/// stage 1 on captions, stage 2 on the confusion set. Both arms share data, budget and token dropping.
inline ArmResult train_arm(const MultimodalModel& backbone, Arm arm, const ExperimentConfig& c, const ArmData& data,
                           std::uint64_t seed, const LogFn& log = {}) {
    ArmResult res{backbone.clone(), {}, TrainState{}};
    auto& m = res.model;
    m.set_arm(arm);
    auto logger = [&](const MetricsRow& r) {
        if (log)
            log(std::string(arm == Arm::pip ? "pip" : "baseline") + " " + r.stage + " step " + std::to_string(r.step) +
                " loss " + std::to_string(r.loss) + " em " + std::to_string(r.exact_match));
    };
    TrainOptions to;
    to.batch = c.batch;
    to.drop_prob = c.drop_prob;
    to.drop_keep = c.half_keep();
    res.state.rng = Rng(seed * 7919 + 17);
    if (arm == Arm::pip) {
        Rng r(seed * 104729 + 5);
        m.bridge() = Bridge(m.config().bridge, r);
        m.match_bridge_to_class_token();
        freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
        std::set<std::string> prompts;
        for (auto& s : data.confusion) prompts.insert(s.prompt);
        std::vector<Tensor> hs;
        for (auto& p : prompts) hs.push_back(m.prompt_vector(p));
        m.bridge().fit_whitening(hs, c.whiten_ridge);
        if (c.stage1_epochs > 0) {
            to.stage_name = "pretrain";
            to.epochs = c.stage1_epochs;
            to.lr = c.stage1_lr;
            res.state.opt = OptimizerState{};
            auto h = train(m, data.captions, to, &res.state, logger);
            res.history.insert(res.history.end(), h.begin(), h.end());
        }
    }
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
    to.stage_name = "finetune";
    to.epochs = c.stage2_epochs;
    to.lr = c.stage2_lr;
    res.state.opt = OptimizerState{};
    auto h = train(m, data.confusion, to, &res.state, logger);
    res.history.insert(res.history.end(), h.begin(), h.end());
    return res;
}

}  // namespace pipmm
