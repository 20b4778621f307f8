#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>

// Thread-local counters for matmul FLOPs and live tensor floats.
namespace pipmm::profile {

struct Counters {
    std::uint64_t flops = 0;
    std::int64_t live = 0;
    std::int64_t peak = 0;
};

inline Counters& counters() {
    thread_local Counters c;
    return c;
}

inline void add_flops(std::uint64_t f) { counters().flops += f; }

inline void on_alloc(std::size_t n) {
    auto& c = counters();
    c.live += static_cast<std::int64_t>(n);
    c.peak = std::max(c.peak, c.live);
}

inline void on_free(std::size_t n) { counters().live -= static_cast<std::int64_t>(n); }

/// Snapshot of FLOPs spent since construction.
class FlopScope {
public:
    FlopScope() : start_(counters().flops) {}
    std::uint64_t elapsed() const { return counters().flops - start_; }

private:
    std::uint64_t start_;
};

/// Tracks the peak of live floats above the level at construction.
class PeakScope {
public:
    PeakScope() : saved_peak_(counters().peak), base_(counters().live) { counters().peak = base_; }
    ~PeakScope() { counters().peak = std::max(saved_peak_, counters().peak); }
    std::int64_t peak_above_base() const { return counters().peak - base_; }

private:
    std::int64_t saved_peak_;
    std::int64_t base_;
};

}  // namespace pipmm::profile
