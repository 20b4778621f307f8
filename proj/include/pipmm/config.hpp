#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "pipmm/experiment.hpp"

namespace pipmm {

/// A run document: experiment settings plus the seeds and evaluation grid used by the CLI.
struct RunConfig {
    ExperimentConfig exp;
    std::string stage = "both";  // pretrain, finetune or both
    std::uint64_t seed = 0;
    std::uint64_t data_seed = 0;
    std::vector<std::size_t> keeps;  // empty = {M, M/2}
    std::size_t hit_layer = 0;
    std::size_t grid = 0;  // cells per side; 0 = model.image / model.patch

    std::vector<std::size_t> keep_list() const {
        if (!keeps.empty()) return keeps;
        return {exp.model.visual_token_count(), exp.half_keep()};
    }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto s = trim(v);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    auto s = trim(v);
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(d))
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    return d;
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, const std::map<std::string, E>& names) {
    auto it = names.find(trim(v));
    if (it != names.end()) return it->second;
    std::string opts;
    for (auto& [n, _] : names) opts += (opts.empty() ? "" : "|") + n;
    throw ConfigError(key + ": expected one of " + opts + ", got '" + v + "'");
}

}  // namespace detail

/// Applies one `section.key = value` setting. Unknown keys throw ConfigError naming the key.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
    using namespace detail;
    auto& e = rc.exp;
    auto& m = e.model;
    auto u = [&] { return parse_uint(key, value); };
    auto d = [&] { return parse_double(key, value); };
    if (key == "model.image") m.vit.height = m.vit.width = u();
    else if (key == "model.patch") m.vit.patch = u();
    else if (key == "model.vit_dim") m.vit.dim = u();
    else if (key == "model.vit_layers") m.vit.layers = u();
    else if (key == "model.vit_heads") m.vit.heads = u();
    else if (key == "model.llm_dim") m.lm.d_llm = u();
    else if (key == "model.llm_layers") m.lm.n_layers = u();
    else if (key == "model.llm_heads") m.lm.n_heads = u();
    else if (key == "model.llm_max_seq") m.lm.max_seq_len = u();
    else if (key == "model.summarize")
        m.lm.summarize_mode = parse_enum<SummarizeMode>(
            key, value, {{"llm_last", SummarizeMode::llm_last}, {"encoder_pool", SummarizeMode::encoder_pool}});
    else if (key == "model.bridge_kind")
        m.bridge.kind = parse_enum<BridgeKind>(key, value, {{"linear", BridgeKind::linear}, {"mlp", BridgeKind::mlp}});
    else if (key == "model.bridge_depth") m.bridge.depth = u();
    else if (key == "model.adapter_kind")
        m.adapter.kind = parse_enum<AdapterKind>(
            key, value, {{"linear", AdapterKind::linear_projector}, {"resampler", AdapterKind::query_resampler}});
    else if (key == "model.adapter_queries") m.adapter.queries = u();
    else if (key == "model.adapter_heads") m.adapter.heads = u();
    else if (key == "model.arm") m.arm = parse_enum<Arm>(key, value, {{"baseline", Arm::baseline}, {"pip", Arm::pip}});
    else if (key == "train.stage") {
        rc.stage = trim(value);
        if (rc.stage != "pretrain" && rc.stage != "finetune" && rc.stage != "both")
            throw ConfigError(key + ": expected one of both|finetune|pretrain, got '" + value + "'");
    } else if (key == "train.seed") rc.seed = u();
    else if (key == "train.batch") e.batch = u();
    else if (key == "train.stage1_epochs") e.stage1_epochs = u();
    else if (key == "train.stage1_lr") e.stage1_lr = d();
    else if (key == "train.epochs") e.stage2_epochs = u();
    else if (key == "train.lr") e.stage2_lr = d();
    else if (key == "train.drop_prob") e.drop_prob = d();
    else if (key == "train.whiten_ridge") e.whiten_ridge = d();
    else if (key == "train.backbone_seed") e.backbone_seed = u();
    else if (key == "train.vision_scenes") e.vision_scenes = u();
    else if (key == "train.vision_epochs") e.vision_epochs = u();
    else if (key == "train.vision_lr") e.vision_lr = d();
    else if (key == "train.vl_samples") e.vl_samples = u();
    else if (key == "train.vl_epochs") e.vl_epochs = u();
    else if (key == "train.vl_lr") e.vl_lr = d();
    else if (key == "data.seed") rc.data_seed = u();
    else if (key == "data.n") e.n_confusion = u();
    else if (key == "data.n_caption") e.n_caption = u();
    else if (key == "data.n_test") e.n_test = u();
    else if (key == "data.grid") rc.grid = u();
    else if (key == "data.n_big") e.scene.n_big = u();
    else if (key == "data.n_small") e.scene.n_small = u();
    else if (key == "eval.keep") {
        rc.keeps.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) rc.keeps.push_back(parse_uint(key, item));
        if (rc.keeps.empty()) throw ConfigError(key + ": empty keep list");
    } else if (key == "eval.layer") e.rank_layer = u();
    else if (key == "eval.hit_layer") rc.hit_layer = u();
    else if (key == "eval.max_new") e.max_new = u();
    else throw ConfigError(key + ": unknown key");
}

/// Cross-checks dims once every setting is applied.
inline void finalize_run_config(RunConfig& rc) {
    auto& e = rc.exp;
    auto& m = e.model;
    if (rc.grid && rc.grid * m.vit.patch != m.vit.height)
        throw ConfigError("data.grid: " + std::to_string(rc.grid) + " cells per side does not match model.image / model.patch");
    e.scene.image = m.vit.height;
    e.scene.patch = m.vit.patch;
    if (m.vit.channels != 3) throw ConfigError("model.channels: scenes are RGB");
    e.scene.validate();
    m.finalize();
    const std::size_t M = m.visual_token_count();
    for (auto k : rc.keeps)
        if (k == 0 || k > M)
            throw ConfigError("eval.keep: " + std::to_string(k) + " outside [1, " + std::to_string(M) + "]");
    if (e.rank_layer >= m.vit.layers) throw ConfigError("eval.layer: beyond the encoder depth");
    if (rc.hit_layer >= m.vit.layers) throw ConfigError("eval.hit_layer: beyond the encoder depth");
    if (e.batch == 0) throw ConfigError("train.batch: must be positive");
    if (!(e.stage2_lr > 0) || !(e.stage1_lr > 0)) throw ConfigError("train.lr: must be positive");
    if (e.drop_prob < 0 || e.drop_prob > 1) throw ConfigError("train.drop_prob: outside [0, 1]");
    if (e.n_confusion == 0) throw ConfigError("data.n: must be at least 1");
    if (e.n_test == 0) throw ConfigError("data.n_test: must be at least 1");
    if (e.max_new == 0) throw ConfigError("eval.max_new: must be positive");
}

/// Parses INI text (sections [model], [train], [data], [eval]) and `section.key=value` overrides.
inline RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
    namespace pt = boost::property_tree;
    RunConfig rc;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& ex) {
        throw ConfigError("config: line " + std::to_string(ex.line()) + ": " + ex.message());
    }
    static const std::set<std::string> sections{"model", "train", "data", "eval"};
    for (auto& [sec, body] : tree) {
        if (!sections.count(sec)) {
            if (body.empty()) throw ConfigError(sec + ": key outside a section");
            throw ConfigError(sec + ": unknown section");
        }
        for (auto& [k, v] : body) apply_setting(rc, sec + "." + k, v.data());
    }
    for (auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(o + ": override must look like section.key=value");
        apply_setting(rc, detail::trim(o.substr(0, eq)), o.substr(eq + 1));
    }
    finalize_run_config(rc);
    return rc;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str(), overrides);
}

inline nlohmann::json to_json(const RunConfig& rc) {
    const auto& e = rc.exp;
    nlohmann::json j;
    j["model"] = to_json(e.model);
    j["scene"] = {e.scene.image, e.scene.patch, e.scene.n_big, e.scene.n_small};
    j["train"] = {{"stage", rc.stage},
                  {"seed", rc.seed},
                  {"batch", e.batch},
                  {"stage1", {e.stage1_epochs, e.stage1_lr}},
                  {"stage2", {e.stage2_epochs, e.stage2_lr}},
                  {"drop_prob", e.drop_prob},
                  {"whiten_ridge", e.whiten_ridge},
                  {"backbone", backbone_key(e)}};
    j["data"] = {{"seed", rc.data_seed}, {"n", e.n_confusion}, {"n_caption", e.n_caption}, {"n_test", e.n_test}};
    j["eval"] = {{"keep", rc.keep_list()}, {"layer", e.rank_layer}, {"hit_layer", rc.hit_layer}, {"max_new", e.max_new}};
    return j;
}

/// FNV-1a over the canonical JSON form; the seed is excluded so it can label the directory separately.
inline std::string config_hash(const RunConfig& rc) {
    auto j = to_json(rc);
    j["train"].erase("seed");
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : j.dump()) h = (h ^ ch) * 1099511628211ull;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 12);
}

inline std::filesystem::path output_root() {
    const char* env = std::getenv("PIPMM_OUT");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("pipmm_runs");
}

inline std::filesystem::path run_dir(const RunConfig& rc) {
    return output_root() / (config_hash(rc) + "-s" + std::to_string(rc.seed));
}

}  // namespace pipmm
