#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "pipmm/experiment.hpp"
#include "pipmm/gradcheck.hpp"

using namespace pipmm;

namespace {

ModelConfig small_config(Arm arm = Arm::pip) {
    ModelConfig c;
    c.arm = arm;
    c.finalize();
    return c;
}

std::map<std::string, std::vector<double>> snapshot(MultimodalModel& m) {
    std::map<std::string, std::vector<double>> s;
    for (auto& p : m.named_parameters()) s[p.name] = p.tensor.vec();
    return s;
}

std::set<std::string> changed(const std::map<std::string, std::vector<double>>& a,
                              const std::map<std::string, std::vector<double>>& b) {
    std::set<std::string> out;
    for (auto& [k, v] : a)
        if (b.at(k) != v) out.insert(k);
    return out;
}

std::vector<Sample> tiny_data(std::size_t n, std::uint64_t seed = 5) {
    SceneConfig sc;
    return gen_dataset(sc, seed, n);
}

}  // namespace

// ---- loss ----

TEST(AnswerLoss, UniformLogitsGiveLengthTimesLogVocab) {
    LlmInput in;
    in.visual_count = 2;
    in.prompt_len = 3;
    in.targets = {7, 9, 2};
    auto logits = Tensor::zeros({7, 256});
    EXPECT_NEAR(answer_loss(logits, in).item(), 16.635532333438686, 1e-9);
    EXPECT_NEAR(answer_loss(logits, in).item(), 3.0 * std::log(256.0), 1e-12);
}

TEST(AnswerLoss, ConfidentCorrectLogitsGiveNearZero) {
    LlmInput in;
    in.prompt_len = 1;
    in.targets = {3};
    auto logits = Tensor::zeros({2, 8});
    logits.mutable_data()[3] = 20.0;
    EXPECT_NEAR(answer_loss(logits, in).item(), std::log1p(7 * std::exp(-20.0)), 1e-15);
}

TEST(AnswerLoss, HandSummedTwoTokenAnswer) {
    LlmInput in;
    in.visual_count = 1;
    in.prompt_len = 1;
    in.targets = {1, 0};
    auto logits = Tensor::from({3, 3}, {9, 9, 9, 1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    const double l1 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
    const double l2 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) + 1.0;
    EXPECT_NEAR(answer_loss(logits, in).item(), l1 + l2, 1e-12);
}

TEST(AnswerLoss, NonAnswerPositionsDoNotMatter) {
    auto m = MultimodalModel(small_config(), 3);
    auto s = tiny_data(1).front();
    LlmInput in;
    Tensor logits;
    const double base = m.sample_loss(s.image, s.prompt, s.answer, nullptr, &in, &logits).item();
    const std::size_t first = in.visual_count + in.prompt_len - 1;
    Rng rng(4);
    auto pert = logits.clone();
    auto d = pert.mutable_data();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        if (r >= first && r < first + in.targets.size()) continue;
        for (std::size_t c = 0; c < logits.cols(); ++c) d[r * logits.cols() + c] += rng.normal(0.0, 5.0);
    }
    EXPECT_EQ(answer_loss(pert, in).item(), base);
    EXPECT_EQ(answer_loss(logits, in).item(), base);
}

TEST(AnswerLoss, NoAnswerIsContractError) {
    LlmInput in;
    in.prompt_len = 2;
    EXPECT_THROW(answer_loss(Tensor::zeros({2, 4}), in), ContractError);
}

TEST(AnswerLoss, TargetsEndWithEos) {
    auto m = MultimodalModel(small_config(), 3);
    auto s = tiny_data(1).front();
    LlmInput in;
    m.sample_loss(s.image, s.prompt, s.answer, nullptr, &in);
    EXPECT_EQ(in.targets.size(), s.answer.size() + 1);
    EXPECT_EQ(in.targets.back(), Vocab::EOS);
}

// ---- optimizer ----

TEST(Optimizer, FirstAdamStepMovesByLr) {
    auto w = Tensor::from({2}, {1.0, -2.0}, true);
    std::vector<NamedTensor> ps{{"w", w}};
    {
        Tape tape;
        tape.backward(sum(mul(w, Tensor::from({2}, {3.0, -0.5}))));
    }
    OptimizerState st;
    st.lr = 0.1;
    st.clip_norm = 0.0;
    optimizer_step(ps, st);
    EXPECT_NEAR(w[0] - 1.0, -0.1, 1e-8);
    EXPECT_NEAR(w[1] + 2.0, 0.1, 1e-8);
}

TEST(Optimizer, ClippingScalesGlobalNorm) {
    auto w = Tensor::from({2}, {0.0, 0.0}, true);
    std::vector<NamedTensor> ps{{"w", w}};
    {
        Tape tape;
        tape.backward(sum(mul(w, Tensor::from({2}, {3.0, 4.0}))));
    }
    OptimizerState st;
    st.mode = OptMode::sgd;
    st.lr = 1.0;
    st.clip_norm = 1.0;
    optimizer_step(ps, st);
    EXPECT_NEAR(w[0], -0.6, 1e-15);
    EXPECT_NEAR(w[1], -0.8, 1e-15);
}

TEST(Optimizer, NanGradientIsNumericError) {
    auto w = Tensor::from({1}, {1.0}, true);
    std::vector<NamedTensor> ps{{"w", w}};
    {
        Tape tape;
        tape.backward(sum(w));
    }
    w.mutable_grad()[0] = std::nan("");
    OptimizerState st;
    EXPECT_THROW(optimizer_step(ps, st), NumericError);
}

// ---- freezing ----

TEST(Freezing, UnknownGroupIsConfigError) {
    auto m = MultimodalModel(small_config(), 1);
    EXPECT_THROW(freeze_for_stage(m, FreezeSpec{"x", {"decoder"}}), ConfigError);
}

TEST(Freezing, PretrainStepChangesOnlyBridge) {
    auto m = MultimodalModel(small_config(), 2);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
    auto before = snapshot(m);
    TrainOptions o;
    o.max_steps = 1;
    o.batch = 2;
    train(m, tiny_data(2), o);
    auto diff = changed(before, snapshot(m));
    EXPECT_FALSE(diff.empty());
    for (auto& n : diff) EXPECT_EQ(n.rfind("bridge.", 0), 0u) << n;
}

TEST(Freezing, FinetuneStepChangesOnlyBridgeAndAdapter) {
    auto m = MultimodalModel(small_config(), 2);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
    auto before = snapshot(m);
    TrainOptions o;
    o.max_steps = 1;
    o.batch = 2;
    train(m, tiny_data(2), o);
    auto diff = changed(before, snapshot(m));
    bool adapter = false;
    for (auto& n : diff) {
        EXPECT_TRUE(n.rfind("bridge.", 0) == 0 || n.rfind("visual_adapter.", 0) == 0) << n;
        adapter = adapter || n.rfind("visual_adapter.", 0) == 0;
    }
    EXPECT_TRUE(adapter);
}

TEST(Freezing, BridgeGetsGradientThroughFrozenModules) {
    auto m = MultimodalModel(small_config(), 6);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
    auto s = tiny_data(1).front();
    Tape tape;
    tape.backward(m.sample_loss(s.image, s.prompt, s.answer));
    double g = 0.0;
    for (auto& p : m.group_parameters("bridge"))
        if (p.tensor.has_grad())
            for (double x : p.tensor.grad()) g += x * x;
    EXPECT_GT(g, 0.0);
    for (auto& p : m.group_parameters("lm")) EXPECT_FALSE(p.tensor.requires_grad());
}

TEST(Freezing, TrainableFractionIsReported) {
    auto m = MultimodalModel(small_config(), 1);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
    std::size_t total = 0, trainable = 0;
    for (auto& p : m.named_parameters()) {
        total += p.tensor.numel();
        if (p.tensor.requires_grad()) trainable += p.tensor.numel();
    }
    const double frac = static_cast<double>(trainable) / static_cast<double>(total);
    RecordProperty("trainable_fraction", std::to_string(frac));
    EXPECT_GT(frac, 0.0);
    EXPECT_LT(frac, 1.0);
}

// ---- train ----

TEST(Train, LossDecreasesOnCopyTask) {
    // answer = the single word in the prompt
    auto c = small_config(Arm::baseline);
    auto m = MultimodalModel(c, 8);
    freeze_for_stage(m, FreezeSpec{"copy", {"lm"}});
    std::vector<Sample> data;
    const char* words[] = {"red", "blue", "gray", "pink"};
    Rng rng(9);
    auto img = random_tensor({32, 32, 3}, rng, 0.5, false);
    for (int i = 0; i < 16; ++i) data.push_back({img, words[i % 4], words[i % 4], {}});
    TrainOptions o;
    o.epochs = 5;
    o.lr = 3e-3;
    o.batch = 4;
    auto h = train(m, data, o);
    ASSERT_EQ(h.size(), 5u);
    EXPECT_LT(h[4].loss, h[0].loss);
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
    auto run = [] {
        auto m = MultimodalModel(small_config(), 10);
        freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
        TrainOptions o;
        o.epochs = 1;
        o.batch = 2;
        o.seed = 3;
        o.drop_prob = 0.5;
        TrainState st{OptimizerState{}, Rng(3), 0};
        auto h = train(m, tiny_data(4), o, &st);
        return std::pair{checkpoint_bytes(m, &st), metrics_csv(h)};
    };
    auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Train, MetricsCsvHeaderAndColumns) {
    auto csv = metrics_csv({{4, "finetune", 1.5, 0.25, 30.0}});
    EXPECT_EQ(csv, "step,stage,loss,exact_match,seq_len_mean\n4,finetune,1.5,0.25,30\n");
}

TEST(Train, EmptyDataAndNoTrainableAreContractErrors) {
    auto m = MultimodalModel(small_config(), 1);
    TrainOptions o;
    freeze_for_stage(m, FreezeSpec{"none", {}});
    EXPECT_THROW(train(m, tiny_data(1), o), ContractError);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
    EXPECT_THROW(train(m, {}, o), ContractError);
}

TEST(Train, DivergenceReportsStep) {
    auto m = MultimodalModel(small_config(), 1);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
    m.adapter().projection().w.mutable_data()[0] = std::numeric_limits<double>::infinity();
    TrainOptions o;
    try {
        train(m, tiny_data(1), o);
        FAIL() << "expected an error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
    }
}

// ---- checkpoint ----

TEST(Checkpoint, RoundTripIsBitExact) {
    auto m = MultimodalModel(small_config(), 11);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
    auto bytes = checkpoint_bytes(m);
    auto r = checkpoint_from_bytes(bytes);
    EXPECT_EQ(checkpoint_bytes(r), bytes);
    auto s = tiny_data(1).front();
    EXPECT_EQ(m.sample_loss(s.image, s.prompt, s.answer).item(), r.sample_loss(s.image, s.prompt, s.answer).item());
    for (auto& p : r.group_parameters("lm")) EXPECT_FALSE(p.tensor.requires_grad());
    for (auto& p : r.group_parameters("bridge")) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(Checkpoint, HeaderStartsWithMagicAndVersion) {
    auto m = MultimodalModel(small_config(), 11);
    auto bytes = checkpoint_bytes(m);
    EXPECT_EQ(bytes.substr(0, 6), std::string("PIPMM\0", 6));
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 1);
    EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0);
}

TEST(Checkpoint, CorruptionReportsOffset) {
    auto m = MultimodalModel(small_config(), 11);
    auto bytes = checkpoint_bytes(m);
    auto bad_magic = bytes;
    bad_magic[1] = 'X';
    try {
        checkpoint_from_bytes(bad_magic);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset, 0u);
    }
    auto bad_version = bytes;
    bad_version[6] = 9;
    try {
        checkpoint_from_bytes(bad_version);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset, 6u);
    }
    try {
        checkpoint_from_bytes(bytes.substr(0, bytes.size() / 2));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_GT(e.offset, 8u);
    }
    EXPECT_THROW(checkpoint_from_bytes(bytes + "x"), FormatError);
}

TEST(Checkpoint, TrainStateRoundTrips) {
    auto m = MultimodalModel(small_config(), 12);
    freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
    TrainState st{OptimizerState{}, Rng(5), 0};
    TrainOptions o;
    o.max_steps = 1;
    train(m, tiny_data(2), o, &st);
    TrainState back;
    auto r = checkpoint_from_bytes(checkpoint_bytes(m, &st), &back);
    EXPECT_EQ(back.step, st.step);
    EXPECT_EQ(back.opt.m, st.opt.m);
    EXPECT_EQ(back.rng.state(), st.rng.state());
}
