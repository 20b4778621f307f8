#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pipmm/config.hpp"
#include "pipmm/cost.hpp"
#include "pipmm/gradcheck.hpp"
#include "pipmm/heatmap.hpp"

namespace pipmm {

namespace fs = std::filesystem;

/// Failure inside a command; `stage` names where it happened.
struct StageError : Error {
    std::string stage;
    StageError(std::string st, const std::string& msg) : Error(msg), stage(std::move(st)) {}
};

namespace cli {

struct Context {
    RunConfig rc;
    fs::path dir;
    std::ostream& out;
    std::ostream& err;
    bool verbose = false;

    LogFn log() const {
        if (!verbose) return {};
        return [this](const std::string& s) { err << s << '\n'; };
    }
};

inline std::string fmt(double v, int prec = 6) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

inline std::vector<Sample> test_split(const RunConfig& rc) { return make_arm_data(rc.exp, rc.data_seed).test; }

inline fs::path backbone_dir() { return output_root() / "backbones"; }

inline MultimodalModel backbone(const Context& cx) { return cached_backbone(cx.rc.exp, backbone_dir().string(), cx.log()); }

/// The trained run model if present, else the shared backbone with the configured arm.
inline MultimodalModel model_for_run(const Context& cx, bool require_trained) {
    const auto path = cx.dir / "model.ckpt";
    if (fs::exists(path)) return load_checkpoint(path.string());
    if (require_trained) throw StageError("load", "no checkpoint at " + path.string() + "; run `train` first");
    auto m = backbone(cx);
    m.set_arm(cx.rc.exp.model.arm);
    return m;
}

inline int gen_data(Context& cx) {
    const auto d = make_arm_data(cx.rc.exp, cx.rc.data_seed);
    fs::create_directories(cx.dir / "data");
    for (auto [name, set] : {std::pair{"confusion", &d.confusion}, {"captions", &d.captions}, {"test", &d.test}}) {
        const auto path = (cx.dir / "data" / (std::string(name) + ".tsv")).string();
        save_dataset(*set, path);
        cx.out << name << ' ' << set->size() << " samples fingerprint " << std::hex << dataset_fingerprint(*set)
               << std::dec << ' ' << path << '\n';
    }
    return 0;
}

inline int train_cmd(Context& cx) {
    auto c = cx.rc.exp;
    const Arm arm = c.model.arm;
    if (cx.rc.stage == "pretrain") {
        if (arm == Arm::baseline) throw ConfigError("train.stage: the baseline arm has no pretrain stage");
        c.stage2_epochs = 0;
    } else if (cx.rc.stage == "finetune") {
        c.stage1_epochs = 0;
    }
    auto bb = backbone(cx);
    const auto data = make_arm_data(c, cx.rc.data_seed);
    auto res = train_arm(bb, arm, c, data, cx.rc.seed, cx.log());
    fs::create_directories(cx.dir);
    save_checkpoint(res.model, (cx.dir / "model.ckpt").string(), &res.state);
    write_file((cx.dir / "metrics.csv").string(), metrics_csv(res.history));
    write_file((cx.dir / "config.json").string(), to_json(cx.rc).dump(2) + "\n");
    const double last = res.history.empty() ? 0.0 : res.history.back().loss;
    cx.out << "trained " << (arm == Arm::pip ? "pip" : "baseline") << " steps " << res.state.step << " final_loss "
           << fmt(last) << " -> " << cx.dir.string() << '\n';
    return 0;
}

inline int eval_cmd(Context& cx) {
    auto m = model_for_run(cx, true);
    const auto test = test_split(cx.rc);
    std::ostringstream csv, preds;
    csv << "keep,n,accuracy,acc_ci_low,acc_ci_high,hit_rate,hit_ci_low,hit_ci_high,target_mass\n";
    preds << "keep,index,prompt,answer,prediction,correct,hit\n";
    for (auto k : cx.rc.keep_list()) {
        EvalOptions o{k, cx.rc.exp.rank_layer, cx.rc.hit_layer, cx.rc.exp.max_new};
        const auto r = evaluate(m, test, o);
        const auto [al, ah] = binomial_ci(r.accuracy, r.n());
        const auto [hl, hh] = binomial_ci(r.hit_rate, r.hits.size());
        csv << k << ',' << r.n() << ',' << fmt(r.accuracy) << ',' << fmt(al) << ',' << fmt(ah) << ','
            << fmt(r.hit_rate) << ',' << fmt(hl) << ',' << fmt(hh) << ',' << fmt(r.target_mass) << '\n';
        for (std::size_t i = 0; i < r.n(); ++i)
            preds << k << ',' << i << ",\"" << test[i].prompt << "\"," << test[i].answer << ',' << r.predictions[i]
                  << ',' << r.correct[i] << ',' << (i < r.hits.size() ? int(r.hits[i]) : 0) << '\n';
        cx.out << "keep " << k << " accuracy " << fmt(r.accuracy, 4) << " [" << fmt(al, 4) << ", " << fmt(ah, 4)
               << "] hit_rate " << fmt(r.hit_rate, 4) << " [" << fmt(hl, 4) << ", " << fmt(hh, 4) << "] n " << r.n()
               << '\n';
    }
    fs::create_directories(cx.dir);
    write_file((cx.dir / "eval.csv").string(), csv.str());
    write_file((cx.dir / "predictions.csv").string(), preds.str());
    return 0;
}

inline int attn_viz(Context& cx, std::size_t index, std::size_t upscale) {
    auto m = model_for_run(cx, false);
    const auto test = test_split(cx.rc);
    if (index >= test.size())
        throw StageError("attn-viz", "sample index " + std::to_string(index) + " outside the test split of " +
                                         std::to_string(test.size()));
    const auto& s = test[index];
    const auto enc = m.encode(s.image, s.prompt);
    const auto out = cx.dir / "attn";
    fs::create_directories(out);
    std::ostringstream csv;
    csv << "layer,head,patch,weight\n";
    for (std::size_t l = 0; l < enc.attn.size(); ++l) {
        for (std::size_t h = 0; h < enc.heads; ++h)
            for (std::size_t j = 1; j < enc.tokens; ++j)
                csv << l << ',' << h << ',' << j - 1 << ',' << std::setprecision(17) << enc.attn_at(l, h, 0, j) << '\n';
        const auto path = out / ("sample" + std::to_string(index) + "_layer" + std::to_string(l) + ".pgm");
        write_file(path.string(), render_heatmap(cls_attention_map(enc, l), upscale));
        cx.out << path.string() << '\n';
    }
    write_file((out / ("sample" + std::to_string(index) + "_attention.csv")).string(), csv.str());
    cx.out << "prompt \"" << s.prompt << "\" answer " << s.answer << " target patches";
    for (auto p : s.target_patch_ids) cx.out << ' ' << p;
    cx.out << '\n';
    return 0;
}

inline int compress_bench(Context& cx, std::size_t repeats) {
    auto m = model_for_run(cx, false);
    const auto test = test_split(cx.rc);
    auto rows = cost_profile(m, test.front(), cx.rc.keep_list(), cx.rc.exp.rank_layer, cx.rc.exp.max_new, repeats);
    std::ostringstream csv;
    csv << "keep,visual_tokens,llm_input_len,flops_vision,flops_prompt,flops_bridge,flops_adapter,flops_llm,"
           "flops_total,analytic_llm,analytic_total,peak_live_floats,wall_ms\n";
    for (auto& r : rows) {
        csv << r.keep << ',' << r.visual_tokens << ',' << r.llm_input_len << ',' << r.flops_vision << ','
            << r.flops_prompt << ',' << r.flops_bridge << ',' << r.flops_adapter << ',' << r.flops_llm << ','
            << r.flops_total << ',' << r.analytic_llm << ',' << r.analytic_total << ',' << r.peak_live_floats << ','
            << fmt(r.wall_ms) << '\n';
        cx.out << "keep " << r.keep << " llm_input " << r.llm_input_len << " flops_total " << r.flops_total
               << " wall_ms " << fmt(r.wall_ms, 4) << '\n';
    }
    fs::create_directories(cx.dir);
    write_file((cx.dir / "cost.csv").string(), csv.str());
    return 0;
}

inline int sweep_adapter_depth(Context& cx, std::size_t max_depth) {
    auto bb = backbone(cx);
    const auto data = make_arm_data(cx.rc.exp, cx.rc.data_seed);
    std::ostringstream csv;
    csv << "adapter,parameters,final_loss,accuracy\n";
    for (std::size_t depth = 0; depth <= max_depth; ++depth) {
        auto c = cx.rc.exp;
        c.model.bridge.kind = depth == 0 ? BridgeKind::linear : BridgeKind::mlp;
        c.model.bridge.depth = std::max<std::size_t>(depth, 1);
        c.model.finalize();
        auto base = bb.clone();
        base.set_bridge_config(c.model.bridge, cx.rc.seed);
        auto res = train_arm(base, Arm::pip, c, data, cx.rc.seed, cx.log());
        const double acc = evaluate_accuracy(res.model, data.test, c.max_new);
        const double last = res.history.empty() ? 0.0 : res.history.back().loss;
        const std::string name = depth == 0 ? "linear" : "mlp" + std::to_string(depth);
        const auto n = count_params(c.model.bridge);
        csv << name << ',' << n << ',' << fmt(last) << ',' << fmt(acc) << '\n';
        cx.out << name << " parameters " << n << " final_loss " << fmt(last, 4) << " accuracy " << fmt(acc, 4) << '\n';
    }
    fs::create_directories(cx.dir);
    write_file((cx.dir / "sweep.csv").string(), csv.str());
    return 0;
}

inline int grad_check(Context& cx, std::uint64_t seed, std::size_t points) {
    const auto res = gradient_suite(seed, points);
    std::map<std::string, double> worst;
    std::size_t failed = 0;
    for (auto& r : res) {
        worst[r.module] = std::max(worst[r.module], r.error / r.tolerance);
        failed += !r.passed();
        cx.out << std::left << std::setw(20) << r.name << std::setw(18) << r.module << " error " << std::scientific
               << std::setprecision(2) << r.error << " tol " << r.tolerance << std::defaultfloat
               << (r.passed() ? "  ok" : "  FAIL") << '\n';
    }
    for (auto& [mod, ratio] : worst)
        cx.out << "module " << mod << " worst error/tolerance " << fmt(ratio, 3) << '\n';
    if (failed) throw StageError("grad-check", std::to_string(failed) + " of " + std::to_string(res.size()) +
                                                  " checks above tolerance");
    cx.out << "all " << res.size() << " checks passed\n";
    return 0;
}

}  // namespace cli

/// Entry point shared by the binary and the tests. Exit codes: 0 ok, 1 runtime failure, 2 bad configuration.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"pipmm: prompt-conditioned vision-language experiments"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    std::vector<std::string> sets;
    bool verbose = false;
    auto common = [&](CLI::App* s) {
        s->add_option("-c,--config", config_path, "INI run configuration");
        s->add_option("-s,--set", sets, "override, e.g. --set train.seed=3")->take_all();
        s->add_option("-o,--out", out_dir, "output root (default $PIPMM_OUT or ./pipmm_runs)");
        s->add_flag("-v,--verbose", verbose, "log progress to stderr");
    };
    auto* gen = app.add_subcommand("gen-data", "write the train and test splits");
    auto* tr = app.add_subcommand("train", "train one arm from the shared backbone");
    auto* ev = app.add_subcommand("eval", "accuracy and hit-rate per keep value");
    auto* av = app.add_subcommand("attn-viz", "class-attention heatmaps for one test sample");
    auto* cb = app.add_subcommand("compress-bench", "cost per keep value");
    auto* sw = app.add_subcommand("sweep-adapter-depth", "bridge depth sweep");
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient checks");
    for (auto* s : {gen, tr, ev, av, cb, sw}) common(s);
    std::size_t index = 0, upscale = 8, repeats = 5, max_depth = 5, points = 3;
    std::uint64_t gc_seed = 7;
    av->add_option("--index", index, "test sample index");
    av->add_option("--upscale", upscale, "pixels per patch")->check(CLI::PositiveNumber);
    cb->add_option("--repeats", repeats, "timing repeats")->check(CLI::PositiveNumber);
    sw->add_option("--max-depth", max_depth, "deepest MLP bridge")->check(CLI::Range(1, 8));
    gc->add_option("--seed", gc_seed, "random points seed");
    gc->add_option("--points", points, "random points per check")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, e2;
        const int code = app.exit(e, o, e2);
        out << o.str();
        err << e2.str();
        return code == 0 ? 0 : 2;
    }

    auto* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    std::string stage = "config";
    try {
        if (!out_dir.empty()) {
#ifdef _WIN32
            _putenv_s("PIPMM_OUT", out_dir.c_str());
#else
            setenv("PIPMM_OUT", out_dir.c_str(), 1);
#endif
        }
        if (sub == gc) {
            stage = cmd;
            cli::Context cx{RunConfig{}, {}, out, err, verbose};
            return cli::grad_check(cx, gc_seed, points);
        }
        RunConfig rc = config_path.empty() ? parse_run_config("", sets) : load_run_config(config_path, sets);
        cli::Context cx{rc, run_dir(rc), out, err, verbose};
        stage = cmd;
        if (sub == gen) return cli::gen_data(cx);
        if (sub == tr) return cli::train_cmd(cx);
        if (sub == ev) return cli::eval_cmd(cx);
        if (sub == av) return cli::attn_viz(cx, index, upscale);
        if (sub == cb) return cli::compress_bench(cx, repeats);
        return cli::sweep_adapter_depth(cx, max_depth);
    } catch (const ConfigError& e) {
        err << "error: config: " << e.what() << '\n';
        return 2;
    } catch (const StageError& e) {
        err << "error: " << e.stage << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << stage << ": " << e.what() << '\n';
        return 1;
    }
}

}  // namespace pipmm
