#pragma once

#include <string>
#include <vector>

#include "pipmm/optim.hpp"
#include "pipmm/rng.hpp"
#include "pipmm/tensor.hpp"

namespace pipmm {

inline Tensor normal_tensor(Shape shape, Rng& rng, double std) {
    auto t = Tensor::zeros(std::move(shape), true);
    for (auto& x : t.mutable_data()) x = rng.normal(0.0, std);
    return t;
}

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out], unused when has_bias is false
    bool has_bias = true;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, double std = 0.02, bool bias = true)
        : w(normal_tensor({in, out}, rng, std)), b(bias ? Tensor::zeros({out}, true) : Tensor()), has_bias(bias) {}

    std::size_t in() const { return w.shape()[0]; }
    std::size_t out() const { return w.shape()[1]; }

    Tensor operator()(const Tensor& x) const { return has_bias ? add_bias(matmul(x, w), b) : matmul(x, w); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        if (has_bias) f(prefix + ".b", b);
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t d) : gamma(Tensor::filled({d}, 1.0)), beta(Tensor::zeros({d})) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

/// Pre-norm transformer block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'.
/// Keys carry no bias: softmax is invariant to it.
struct Block {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo;
    Linear fc1, fc2;
    std::size_t heads = 1;

    Block() = default;
    Block(std::size_t d, std::size_t n_heads, Rng& rng)
        : ln1(d), ln2(d), wq(d, d, rng), wk(d, d, rng, 0.02, false), wv(d, d, rng), wo(d, d, rng),
          fc1(d, 4 * d, rng), fc2(4 * d, d, rng), heads(n_heads) {
        if (d % n_heads) throw ConfigError("width " + std::to_string(d) + " not divisible by heads " +
                                           std::to_string(n_heads));
    }

    Tensor operator()(const Tensor& z, bool causal, std::vector<double>* probs = nullptr) const {
        auto h = ln1(z);
        auto a = attention(wq(h), wk(h), wv(h), heads, causal, probs);
        auto z1 = add(z, wo(a));
        auto m = fc2(gelu(fc1(ln2(z1))));
        return add(z1, m);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        ln1.visit(prefix + ".ln1", f);
        wq.visit(prefix + ".wq", f);
        wk.visit(prefix + ".wk", f);
        wv.visit(prefix + ".wv", f);
        wo.visit(prefix + ".wo", f);
        ln2.visit(prefix + ".ln2", f);
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

/// Collects (name, tensor) handles from anything with a visit(prefix, f) member.
template <class M>
std::vector<NamedTensor> collect(M& m, const std::string& prefix) {
    std::vector<NamedTensor> out;
    m.visit(prefix, [&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
    return out;
}

/// Replaces every parameter with a fresh copy so the module no longer shares storage.
template <class M>
void deep_copy_params(M& m) {
    m.visit("", [](const std::string&, Tensor& t) { t = t.clone(); });
}

}  // namespace pipmm
