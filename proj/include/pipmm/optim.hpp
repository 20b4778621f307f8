#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pipmm/tensor.hpp"

namespace pipmm {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

enum class OptMode { sgd, adam };

struct OptimizerState {
    OptMode mode = OptMode::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// Global L2 norm over all present grads.
inline double grad_norm(const std::vector<NamedTensor>& params) {
    double s = 0.0;
    for (auto& p : params)
        if (p.tensor.has_grad())
            for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
}

/// One update over `params`; entries without a grad buffer are left untouched.
inline void optimizer_step(std::vector<NamedTensor>& params, OptimizerState& st) {
    if (!(st.lr > 0.0)) throw ContractError("learning rate must be positive");
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad())
            if (std::isnan(g)) throw NumericError("NaN gradient in parameter '" + p.name + "'");
    }
    double clip = 1.0;
    if (st.clip_norm > 0.0) {
        const double norm = grad_norm(params);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
        if (norm > st.clip_norm) clip = st.clip_norm / norm;
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        auto w = p.tensor.mutable_data();
        auto g = p.tensor.grad();
        if (st.mode == OptMode::sgd) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= st.lr * clip * g[i];
            continue;
        }
        auto& m = st.m[p.name];
        auto& v = st.v[p.name];
        if (m.empty()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        if (m.size() != w.size()) throw ShapeError("moment buffer shape mismatch for '" + p.name + "'");
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] * clip;
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
            w[i] -= st.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
        }
    }
}

}  // namespace pipmm
