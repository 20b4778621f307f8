#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "pipmm/cost.hpp"
#include "pipmm/experiment.hpp"

using namespace pipmm;

namespace {

ModelConfig small_config(Arm arm) {
    ModelConfig c;
    c.arm = arm;
    c.finalize();
    return c;
}

// Patches containing at least one pixel owned by object `oi`.
std::set<std::size_t> scanned_patches(const Scene& sc, int oi, const SceneConfig& cfg) {
    std::set<std::size_t> out;
    const std::size_t S = cfg.image, P = cfg.patch, g = cfg.grid();
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x)
            if (sc.owner[y * S + x] == oi) out.insert((y / P) * g + x / P);
    return out;
}

}  // namespace

TEST(SynthBench, SameSeedIsBitIdentical) {
    SceneConfig sc;
    auto a = gen_dataset(sc, 77, 20), b = gen_dataset(sc, 77, 20), c = gen_dataset(sc, 78, 20);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image.vec(), b[i].image.vec());
        EXPECT_EQ(encode_record(a[i]), encode_record(b[i]));
    }
    EXPECT_NE(dataset_fingerprint(a), dataset_fingerprint(c));
}

TEST(SynthBench, AnswersBalancedOverPalette) {
    SceneConfig sc;
    auto d = gen_dataset(sc, 5, 8000);
    std::map<std::string, int> counts;
    for (auto& s : d) ++counts[s.answer];
    ASSERT_EQ(counts.size(), 8u);
    for (auto& [c, n] : counts) EXPECT_NEAR(n / 8000.0, 0.125, 0.02) << c;
}

TEST(SynthBench, TargetPatchesMatchPixelScan) {
    SceneConfig sc;
    std::vector<Scene> scenes;
    auto d = gen_dataset(sc, 9, 300, SampleKind::confusion, &scenes);
    for (std::size_t i = 0; i < d.size(); ++i) {
        ASSERT_FALSE(d[i].target_patch_ids.empty());
        const auto& s = scenes[i];
        int target = -1;
        for (std::size_t oi = 0; oi < s.objects.size(); ++oi) {
            const auto& o = s.objects[oi];
            if (o.big || palette()[o.color].name != d[i].answer) continue;
            if (scanned_patches(s, static_cast<int>(oi), sc).count(d[i].target_patch_ids.front())) target = static_cast<int>(oi);
        }
        ASSERT_GE(target, 0) << i;
        auto scan = scanned_patches(s, target, sc);
        EXPECT_EQ(scan, std::set<std::size_t>(d[i].target_patch_ids.begin(), d[i].target_patch_ids.end())) << i;
    }
}

TEST(SynthBench, TargetIsNeverTheSalientObject) {
    SceneConfig sc;
    std::vector<Scene> scenes;
    auto d = gen_dataset(sc, 10, 100, SampleKind::confusion, &scenes);
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::size_t big = 0;
        for (auto& o : scenes[i].objects) big += o.big;
        EXPECT_EQ(big, 2u);
        EXPECT_EQ(d[i].target_patch_ids.size(), 1u);
        EXPECT_EQ(d[i].prompt.rfind("what color is the small ", 0), 0u);
    }
}

TEST(SynthBench, GridTooSmallIsConfigError) {
    SceneConfig sc;
    sc.n_small = 9;
    EXPECT_THROW(gen_dataset(sc, 1, 1), ConfigError);
    sc = SceneConfig{};
    sc.n_big = 4;
    EXPECT_THROW(gen_dataset(sc, 1, 1), ConfigError);
    EXPECT_THROW(gen_dataset(SceneConfig{}, 1, 0), ContractError);
}

TEST(SynthBench, RecordRoundTrip) {
    SceneConfig sc;
    auto d = gen_dataset(sc, 12, 5);
    const auto path = (std::filesystem::temp_directory_path() / "pipmm_records.tsv").string();
    save_dataset(d, path);
    auto back = load_dataset(path, 32);
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back[i].image.vec(), d[i].image.vec());
        EXPECT_EQ(back[i].target_patch_ids, d[i].target_patch_ids);
    }
    EXPECT_EQ(dataset_fingerprint(back), dataset_fingerprint(d));
    std::filesystem::remove(path);
    EXPECT_THROW(decode_record("zz\tp\ta\t1", 1), FormatError);
}

TEST(SynthBench, OracleAndNullAnswerers) {
    SceneConfig sc;
    auto d = gen_dataset(sc, 13, 80);
    EXPECT_EQ(evaluate_answers(d, [](const Sample& s) { return s.answer; }).accuracy, 1.0);
    EXPECT_EQ(evaluate_answers(d, [](const Sample&) { return std::string("?"); }).accuracy, 0.0);
}

TEST(SynthBench, UntrainedModelIsNearChance) {
    auto m = MultimodalModel(small_config(Arm::baseline), 1);
    auto d = gen_dataset(SceneConfig{}, 14, 40);
    const double acc = evaluate_accuracy(m, d, 8);
    RecordProperty("untrained_accuracy", std::to_string(acc));
    EXPECT_LE(acc, 0.25);
}

TEST(SynthBench, HitRateOfStubs) {
    auto d = gen_dataset(SceneConfig{}, 15, 4000);
    // uniform rows with ties broken by a per-sample random rotation
    Rng rng(16);
    auto uni = attention_hitrate(d, [&](const Sample&) {
        std::vector<double> r(16, 1.0 / 16);
        r[rng.below(16)] += 1e-9;
        return r;
    });
    const double p = 1.0 / 16, sigma = std::sqrt(p * (1 - p) / 4000.0);
    EXPECT_NEAR(uni.rate, p, 3 * sigma);
    EXPECT_NEAR(uni.target_mass, p, 1e-6);
    auto oracle = attention_hitrate(d, [](const Sample& s) {
        std::vector<double> r(16, 0.0);
        for (auto t : s.target_patch_ids) r[t] = 1.0 / s.target_patch_ids.size();
        return r;
    });
    EXPECT_EQ(oracle.rate, 1.0);
    EXPECT_EQ(oracle.target_mass, 1.0);
}

TEST(SynthBench, CompareRuns) {
    auto d = gen_dataset(SceneConfig{}, 17, 10);
    auto a = evaluate_answers(d, [](const Sample& s) { return s.answer; });
    auto b = evaluate_answers(d, [](const Sample& s) { return s.answer == "red" ? s.answer : "?"; });
    auto self = compare_runs(a, a);
    EXPECT_EQ(self.wins, 0u);
    EXPECT_EQ(self.losses, 0u);
    EXPECT_EQ(self.ties, 10u);
    auto c = compare_runs(a, b);
    std::size_t wrong = 0;
    for (bool x : b.correct) wrong += !x;
    EXPECT_EQ(c.wins, wrong);
    EXPECT_EQ(c.losses, 0u);
    auto other = evaluate_answers(gen_dataset(SceneConfig{}, 18, 10), [](const Sample& s) { return s.answer; });
    EXPECT_THROW(compare_runs(a, other), ContractError);
}

TEST(SynthBench, BinomialInterval) {
    auto [lo, hi] = binomial_ci(0.5, 100);
    EXPECT_NEAR(lo, 0.402, 1e-12);
    EXPECT_NEAR(hi, 0.598, 1e-12);
}

// ---- cost ----

TEST(CostModel, BlockFlopsClosedForm) {
    EXPECT_EQ(block_flops(10, 32), 24u * 10 * 32 * 32 + 4u * 10 * 10 * 32);
    LMConfig c;
    c.vocab_size = 41;
    EXPECT_EQ(lm_forward_flops(c, 5), 2 * block_flops(5, 32) + 2u * 5 * 32 * 41);
}

TEST(CostModel, MeasuredMatchesClosedFormAndOrdering) {
    auto d = gen_dataset(SceneConfig{}, 19, 1);
    auto pip = MultimodalModel(small_config(Arm::pip), 2);
    auto base = MultimodalModel(small_config(Arm::baseline), 2);
    auto p = cost_profile(pip, d[0], {16, 8}, 0, 8, 1);
    auto b = cost_profile(base, d[0], {16}, 0, 8, 1);
    for (auto* r : {&p[0], &p[1], &b[0]}) {
        EXPECT_EQ(r->flops_llm, r->analytic_llm);
        EXPECT_EQ(r->flops_total, r->analytic_total);
        EXPECT_EQ(r->llm_input_len, r->analytic_input_len);
        EXPECT_GT(r->peak_live_floats, 0);
    }
    EXPECT_EQ(p[0].llm_input_len - p[1].llm_input_len, 8u);
    EXPECT_LT(p[1].flops_llm, p[0].flops_llm);
    EXPECT_LT(p[1].flops_total, b[0].flops_total);
    EXPECT_LT(b[0].flops_total, p[0].flops_total);
}

TEST(CostModel, MonotoneInKeepAndPromptLength) {
    auto c = small_config(Arm::pip);
    std::uint64_t prev = 0;
    for (std::size_t k = 1; k <= 16; ++k) {
        auto r = analytic_cost(c, Arm::pip, 10, k, 8);
        EXPECT_GE(r.analytic_total, prev);
        prev = r.analytic_total;
    }
    EXPECT_LT(analytic_cost(c, Arm::pip, 10, 8, 8).analytic_total, analytic_cost(c, Arm::pip, 11, 8, 8).analytic_total);
}
