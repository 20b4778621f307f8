#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>
#include <string>
#include <vector>

#include "pipmm/model.hpp"
#include "pipmm/training.hpp"

namespace pipmm {

// Layout: "PIPMM\0" | u16 version | str config-json | u32 n | n x (str name, u8 requires_grad,
// u32 ndim, u64 dims..., f64 data...) | u8 has_opt [opt block] | str rng | u64 step.
// Strings are u32 length + UTF-8 bytes; all integers and floats little-endian.
inline constexpr char checkpoint_magic[6] = {'P', 'I', 'P', 'M', 'M', '\0'};
inline constexpr std::uint16_t checkpoint_version = 1;

namespace detail {

class Writer {
public:
    template <class T>
    void put(T v) {
        auto u = static_cast<std::make_unsigned_t<T>>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_ += static_cast<char>((u >> (8 * i)) & 0xff);
    }
    void put_f64(double d) { put(std::bit_cast<std::uint64_t>(d)); }
    void put_str(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        buf_ += s;
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(const std::string& b) : b_(b) {}
    template <class T>
    T get() {
        need(sizeof(T));
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(b_[off_ + i])) << (8 * i);
        off_ += sizeof(T);
        return static_cast<T>(u);
    }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string get_str() {
        auto n = get<std::uint32_t>();
        need(n);
        std::string s = b_.substr(off_, n);
        off_ += n;
        return s;
    }
    void need(std::size_t n) const {
        if (off_ + n > b_.size()) throw FormatError("checkpoint truncated", off_);
    }
    std::size_t offset() const { return off_; }
    bool done() const { return off_ == b_.size(); }

private:
    const std::string& b_;
    std::size_t off_ = 0;
};

inline void put_tensor(Writer& w, const std::string& name, const Tensor& t) {
    w.put_str(name);
    w.put(static_cast<std::uint8_t>(t.requires_grad() ? 1 : 0));
    w.put(static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double x : t.data()) w.put_f64(x);
}

}  // namespace detail

inline std::string checkpoint_bytes(MultimodalModel& m, const TrainState* st = nullptr) {
    detail::Writer w;
    w.raw(checkpoint_magic, sizeof checkpoint_magic);
    w.put(checkpoint_version);
    w.put_str(to_json(m.config()).dump());
    auto params = m.named_parameters();
    auto bufs = m.named_buffers();
    w.put(static_cast<std::uint32_t>(params.size() + bufs.size()));
    for (auto& p : params) detail::put_tensor(w, p.name, p.tensor);
    for (auto& p : bufs) detail::put_tensor(w, p.name, p.tensor);
    w.put(static_cast<std::uint8_t>(st ? 1 : 0));
    if (st) {
        const auto& o = st->opt;
        w.put(static_cast<std::uint8_t>(o.mode == OptMode::adam ? 1 : 0));
        for (double d : {o.lr, o.beta1, o.beta2, o.eps, o.clip_norm}) w.put_f64(d);
        w.put(static_cast<std::uint64_t>(o.step));
        for (auto* mm : {&o.m, &o.v}) {
            w.put(static_cast<std::uint32_t>(mm->size()));
            for (auto& [name, vec] : *mm) {
                w.put_str(name);
                w.put(static_cast<std::uint64_t>(vec.size()));
                for (double d : vec) w.put_f64(d);
            }
        }
    }
    w.put_str(st ? st->rng.state() : Rng().state());
    w.put(static_cast<std::uint64_t>(st ? st->step : 0));
    return w.bytes();
}

inline void save_checkpoint(MultimodalModel& m, const std::string& path, const TrainState* st = nullptr) {
    auto bytes = checkpoint_bytes(m, st);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint " + path);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + path);
}

/// Parses a whole checkpoint; nothing is returned unless every field validates.
inline MultimodalModel checkpoint_from_bytes(const std::string& bytes, TrainState* st = nullptr) {
    detail::Reader r(bytes);
    r.need(sizeof checkpoint_magic);
    if (std::memcmp(bytes.data(), checkpoint_magic, sizeof checkpoint_magic) != 0)
        throw FormatError("bad checkpoint magic", 0);
    for (std::size_t i = 0; i < sizeof checkpoint_magic; ++i) r.get<char>();
    const std::size_t voff = r.offset();
    auto version = r.get<std::uint16_t>();
    if (version != checkpoint_version)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), voff);
    const std::size_t coff = r.offset();
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(nlohmann::json::parse(r.get_str()));
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(std::string("bad config snapshot: ") + e.what(), coff);
    }
    MultimodalModel m(cfg, 0);
    std::map<std::string, Tensor> slots;
    for (auto& p : m.named_parameters()) slots.emplace(p.name, p.tensor);
    for (auto& p : m.named_buffers()) slots.emplace(p.name, p.tensor);
    const auto count = r.get<std::uint32_t>();
    if (count != slots.size()) throw FormatError("tensor count mismatch", r.offset());
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t off = r.offset();
        auto name = r.get_str();
        auto it = slots.find(name);
        if (it == slots.end()) throw FormatError("unknown tensor '" + name + "'", off);
        const bool rg = r.get<std::uint8_t>() != 0;
        const auto nd = r.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t d = 0; d < nd; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        if (shape != it->second.shape()) throw FormatError("shape mismatch for '" + name + "'", off);
        auto data = it->second.mutable_data();
        r.need(data.size() * 8);
        for (auto& x : data) x = r.get_f64();
        it->second.set_requires_grad(rg);
    }
    TrainState tmp;
    if (r.get<std::uint8_t>()) {
        auto& o = tmp.opt;
        o.mode = r.get<std::uint8_t>() ? OptMode::adam : OptMode::sgd;
        o.lr = r.get_f64();
        o.beta1 = r.get_f64();
        o.beta2 = r.get_f64();
        o.eps = r.get_f64();
        o.clip_norm = r.get_f64();
        o.step = r.get<std::uint64_t>();
        for (auto* mm : {&o.m, &o.v}) {
            const auto n = r.get<std::uint32_t>();
            for (std::uint32_t i = 0; i < n; ++i) {
                auto name = r.get_str();
                const auto len = r.get<std::uint64_t>();
                r.need(len * 8);
                std::vector<double> v(len);
                for (auto& x : v) x = r.get_f64();
                (*mm)[name] = std::move(v);
            }
        }
    }
    tmp.rng.set_state(r.get_str());
    tmp.step = r.get<std::uint64_t>();
    if (!r.done()) throw FormatError("trailing bytes after checkpoint", r.offset());
    if (st) *st = std::move(tmp);
    bool lm_frozen = true;
    for (auto& p : m.group_parameters("lm")) lm_frozen = lm_frozen && !p.tensor.requires_grad();
    m.set_summary_cache(lm_frozen);
    return m;
}

inline MultimodalModel load_checkpoint(const std::string& path, TrainState* st = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes, st);
}

}  // namespace pipmm
