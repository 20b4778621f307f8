// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if any fails.
// usage: acceptance [cache_dir]   (the shared backbone is cached there between runs)
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pipmm/cli.hpp"

using namespace pipmm;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
    std::printf("criterion %2d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
}

std::string f4(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4f", v);
    return b;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::vector<double>> snapshot(MultimodalModel& m) {
    std::map<std::string, std::vector<double>> s;
    for (auto& p : m.named_parameters()) s[p.name] = p.tensor.vec();
    return s;
}

bool only_groups_changed(const std::map<std::string, std::vector<double>>& before, MultimodalModel& m,
                         const std::set<std::string>& groups, std::set<std::string>* seen) {
    bool ok = true;
    for (auto& [name, v] : snapshot(m)) {
        if (before.at(name) == v) continue;
        const auto g = name.substr(0, name.find('.'));
        seen->insert(g);
        ok = ok && groups.count(g);
    }
    return ok;
}

int run_tool(std::vector<std::string> args) {
    std::vector<const char*> argv{"pipmm"};
    for (auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code) std::fprintf(stderr, "%s", err.str().c_str());
    return code;
}

const std::vector<std::string> tiny_sets = {
    "--set", "model.vit_dim=8",      "--set", "model.vit_heads=2",     "--set", "model.llm_dim=16",
    "--set", "model.llm_heads=2",    "--set", "train.vision_scenes=16", "--set", "train.vision_epochs=1",
    "--set", "train.vl_samples=9",   "--set", "train.vl_epochs=1",     "--set", "train.epochs=2",
    "--set", "data.n=8",             "--set", "data.n_caption=4",      "--set", "data.n_test=4",
    "--set", "eval.max_new=3"};

std::vector<std::string> with_tiny(std::vector<std::string> a, const fs::path& out) {
    a.push_back("--out");
    a.push_back(out.string());
    a.insert(a.end(), tiny_sets.begin(), tiny_sets.end());
    return a;
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path cache = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_cache");
    fs::create_directories(cache);
    ExperimentConfig c;
    const auto Mfull = c.model.visual_token_count(), Mhalf = c.half_keep();

    // 1. gradient suite
    {
        const auto t0 = std::chrono::steady_clock::now();
        const auto res = gradient_suite();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool ok = secs < 60.0;
        double worst = 0.0;
        std::string bad;
        for (auto& r : res) {
            ok = ok && r.passed();
            worst = std::max(worst, r.error / r.tolerance);
            if (!r.passed()) bad += " " + r.name;
        }
        report(1, ok, std::to_string(res.size()) + " checks, worst error/tolerance " + f4(worst) + ", " + f4(secs) +
                          " s" + (bad.empty() ? "" : ", failing:" + bad));
    }

    // 2. class-slot replacement with I_class is the baseline encoder
    {
        double worst = 0.0;
        auto m = MultimodalModel(c.model, 3);
        auto data = gen_dataset(c.scene, 4, 20);
        for (auto& s : data) {
            m.set_arm(Arm::baseline);
            auto base = m.encode(s.image, s.prompt);
            auto repl = m.encode_with(s.image, m.vit().class_token().clone());
            for (std::size_t i = 0; i < base.z.numel(); ++i) worst = std::max(worst, std::abs(base.z[i] - repl.z[i]));
            worst += base.attn == repl.attn ? 0.0 : 1.0;
        }
        report(2, worst == 0.0, "max abs diff " + std::to_string(worst) + " over 20 images");
    }

    // 3. freezing contract
    {
        auto data = gen_dataset(c.scene, 5, 8);
        auto m = MultimodalModel(c.model, 6);
        TrainOptions o;
        o.max_steps = 1;
        freeze_for_stage(m, FreezeSpec::for_stage(Stage::pretrain));
        auto before = snapshot(m);
        train(m, data, o);
        std::set<std::string> s1, s2;
        const bool ok1 = only_groups_changed(before, m, {"bridge"}, &s1);
        freeze_for_stage(m, FreezeSpec::for_stage(Stage::finetune));
        before = snapshot(m);
        train(m, data, o);
        const bool ok2 = only_groups_changed(before, m, {"bridge", "visual_adapter"}, &s2);
        auto names = [](const std::set<std::string>& s) {
            std::string o;
            for (auto& x : s) o += (o.empty() ? "" : "+") + x;
            return o;
        };
        report(3, ok1 && ok2 && s1 == std::set<std::string>{"bridge"} && s2.count("visual_adapter"),
               "stage 1 changed {" + names(s1) + "}, stage 2 changed {" + names(s2) + "}");
    }

    // 4. loss oracle
    {
        LlmInput in;
        in.visual_count = 4;
        in.prompt_len = 5;
        in.targets = {10, 11, 12};
        const double uni = answer_loss(Tensor::zeros({12, 256}), in).item();
        const double err = std::abs(uni - 3.0 * std::log(256.0));
        auto m = MultimodalModel(c.model, 7);
        auto s = gen_dataset(c.scene, 8, 1).front();
        LlmInput seen;
        Tensor logits;
        const double base = m.sample_loss(s.image, s.prompt, s.answer, nullptr, &seen, &logits).item();
        const std::size_t first = seen.visual_count + seen.prompt_len - 1;
        auto pert = logits.clone();
        Rng rng(9);
        auto d = pert.mutable_data();
        for (std::size_t r = 0; r < logits.rows(); ++r)
            if (r < first || r >= first + seen.targets.size())
                for (std::size_t k = 0; k < logits.cols(); ++k) d[r * logits.cols() + k] += rng.normal(0.0, 10.0);
        const double delta = answer_loss(pert, seen).item() - base;
        report(4, err < 1e-9 && delta == 0.0,
               "uniform loss error " + std::to_string(err) + ", masked perturbation delta " + std::to_string(delta));
    }

    // 5, 6, 8. desk-scale A/B over three seeds
    {
        auto log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
        auto backbone = cached_backbone(c, cache.string(), log);
        std::map<Arm, std::vector<double>> full, half, hit;
        std::map<Arm, std::size_t> hits_n, hits_k;
        for (std::uint64_t seed : {0, 1, 2}) {
            auto data = make_arm_data(c, seed);
            for (Arm arm : {Arm::baseline, Arm::pip}) {
                auto res = train_arm(backbone, arm, c, data, seed, log);
                auto a = evaluate(res.model, data.test, EvalOptions{0, c.rank_layer, c.rank_layer, c.max_new});
                auto b = evaluate(res.model, data.test, EvalOptions{Mhalf, c.rank_layer, c.rank_layer, c.max_new});
                full[arm].push_back(a.accuracy);
                half[arm].push_back(b.accuracy);
                hit[arm].push_back(a.hit_rate);
                hits_n[arm] += a.hits.size();
                hits_k[arm] += static_cast<std::size_t>(std::count(a.hits.begin(), a.hits.end(), true));
                std::printf("  seed %llu %-8s full %s  half %s  hit %s\n", static_cast<unsigned long long>(seed),
                            arm == Arm::pip ? "pip" : "baseline", f4(a.accuracy).c_str(), f4(b.accuracy).c_str(),
                            f4(a.hit_rate).c_str());
                std::fflush(stdout);
                if (arm == Arm::pip && seed == 0) {
                    // held-in split: the confusion samples the model was trained on
                    std::vector<Sample> held(data.confusion.begin(), data.confusion.begin() + 400);
                    const double acc = evaluate_accuracy(res.model, held, c.max_new);
                    std::printf("  held-in (informational): pip exact-match %s on 400 training samples, target >= 0.90 %s\n",
                                f4(acc).c_str(), acc >= 0.9 ? "met" : "not met");
                }
            }
        }
        auto mean = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        };
        const double fb = mean(full[Arm::baseline]), fp = mean(full[Arm::pip]);
        const double hb = mean(half[Arm::baseline]), hp = mean(half[Arm::pip]);
        report(5, fp >= fb + 0.03, "mean full accuracy pip " + f4(fp) + " vs baseline " + f4(fb) + " (need +0.03)");
        report(6, (fp - hp) <= (fb - hb) && hp > hb,
               "drop pip " + f4(fp - hp) + " vs baseline " + f4(fb - hb) + "; compressed pip " + f4(hp) +
                   " vs baseline " + f4(hb));
        const double rb = mean(hit[Arm::baseline]), rp = mean(hit[Arm::pip]);
        auto ci = [](double p, std::size_t n) {
            auto [lo, hi] = binomial_ci(p, n);
            return "[" + f4(lo) + ", " + f4(hi) + "]";
        };
        // uniform stub: random tie-break so the argmax is a uniform patch
        auto test = make_arm_data(c, 0).test;
        Rng rng(10);
        auto stub = attention_hitrate(test, [&](const Sample&) {
            std::vector<double> r(Mfull, 1.0 / static_cast<double>(Mfull));
            r[rng.below(Mfull)] += 1e-9;
            return r;
        });
        double expect = 0.0;
        for (auto& s : test) expect += static_cast<double>(s.target_patch_ids.size()) / static_cast<double>(Mfull);
        expect /= static_cast<double>(test.size());
        const double sigma = std::sqrt(expect * (1 - expect) / static_cast<double>(test.size()));
        const bool stub_ok = std::abs(stub.rate - expect) <= 3 * sigma;
        report(8, rp > rb && stub_ok,
               "hit-rate pip " + f4(rp) + " " + ci(rp, hits_n[Arm::pip]) + " vs baseline " + f4(rb) + " " +
                   ci(rb, hits_n[Arm::baseline]) + "; uniform stub " + f4(stub.rate) + " vs " + f4(expect) +
                   " +- " + f4(3 * sigma));
    }

    // 7. cost model
    {
        auto s = gen_dataset(c.scene, 11, 1).front();
        auto pip = MultimodalModel(c.model, 12);
        auto base = pip.clone();
        base.set_arm(Arm::baseline);
        auto p = cost_profile(pip, s, {Mfull, Mhalf}, c.rank_layer, c.max_new, 1);
        auto b = cost_profile(base, s, {Mfull}, c.rank_layer, c.max_new, 1);
        bool exact = true;
        for (auto* r : {&p[0], &p[1], &b[0]})
            exact = exact && r->flops_llm == r->analytic_llm && r->llm_input_len == r->analytic_input_len &&
                    r->flops_total == r->analytic_total;
        const bool halves = p[0].llm_input_len - p[1].llm_input_len == Mfull - Mhalf;
        const bool order = p[1].flops_total < b[0].flops_total && b[0].flops_total < p[0].flops_total;
        report(7, exact && halves && order,
               "llm input " + std::to_string(p[0].llm_input_len) + " -> " + std::to_string(p[1].llm_input_len) +
                   "; total flops pip/2 " + std::to_string(p[1].flops_total) + " < baseline " +
                   std::to_string(b[0].flops_total) + " < pip " + std::to_string(p[0].flops_total) +
                   (exact ? "; measured = closed form" : "; measured != closed form"));
    }

    // 9. parameter-count law and sweep schema
    {
        const fs::path out = cache / "sweep";
        fs::remove_all(out);
        const int code = run_tool(with_tiny({"sweep-adapter-depth"}, out));
        auto rc = parse_run_config("", [] {
            std::vector<std::string> o;
            for (std::size_t i = 1; i < tiny_sets.size(); i += 2) o.push_back(tiny_sets[i]);
            return o;
        }());
        std::istringstream is(slurp(out / (config_hash(rc) + "-s0") / "sweep.csv"));
        std::string line;
        std::getline(is, line);
        bool ok = code == 0 && line == "adapter,parameters,final_loss,accuracy";
        const char* names[] = {"linear", "mlp1", "mlp2", "mlp3", "mlp4", "mlp5"};
        for (std::size_t d = 0; d < 6; ++d) {
            ok = ok && static_cast<bool>(std::getline(is, line));
            const auto a = line.find(','), b2 = line.find(',', a + 1);
            ok = ok && line.substr(0, a) == names[d];
            auto bc = rc.exp.model.bridge;
            bc.kind = d == 0 ? BridgeKind::linear : BridgeKind::mlp;
            bc.depth = std::max<std::size_t>(d, 1);
            ok = ok && std::stoul(line.substr(a + 1, b2 - a - 1)) == count_params(bc);
            Rng rng(d);
            ok = ok && Bridge(bc, rng).num_params() == count_params(bc);
        }
        // the same law at default widths
        for (std::size_t d = 1; d <= 5; ++d) {
            auto bc = c.model.bridge;
            bc.depth = d;
            Rng rng(d);
            ok = ok && Bridge(bc, rng).num_params() == count_params(bc);
        }
        report(9, ok, "sweep rows linear, mlp1..mlp5 with closed-form parameter counts");
    }

    // 10. reproducibility
    {
        std::vector<std::string> artifacts;
        bool ok = true;
        for (int run = 0; run < 2; ++run) {
            const fs::path out = cache / ("repro" + std::to_string(run));
            fs::remove_all(out);
            ok = ok && run_tool(with_tiny({"train"}, out)) == 0 && run_tool(with_tiny({"attn-viz", "--index", "0"}, out)) == 0;
            std::string all;
            for (auto& e : fs::recursive_directory_iterator(out)) {
                const auto name = e.path().filename().string();
                if (name == "model.ckpt" || name == "metrics.csv" || e.path().extension() == ".pgm")
                    all += name + ":" + slurp(e.path());
            }
            artifacts.push_back(all);
        }
        auto m = MultimodalModel(c.model, 13);
        auto bytes = checkpoint_bytes(m);
        auto back = checkpoint_from_bytes(bytes);
        const bool round = checkpoint_bytes(back) == bytes;
        report(10, ok && artifacts[0] == artifacts[1] && !artifacts[0].empty() && round,
               std::string("checkpoints, metrics and heatmaps ") + (artifacts[0] == artifacts[1] ? "identical" : "differ") +
                   " across two runs; save/load round trip " + (round ? "exact" : "differs"));
    }

    std::printf("%d of 10 criteria failed\n", failures);
    return failures ? 1 : 0;
}
