#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pipmm/errors.hpp"
#include "pipmm/profile.hpp"

namespace pipmm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

class Tape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Node(Shape s, std::vector<double> v) : shape(std::move(s)), value(std::move(v)) {
        profile::on_alloc(value.size());
    }
    ~Node() { profile::on_free(value.size() + grad.size()); }
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            profile::on_alloc(value.size() - grad.size());
            grad.assign(value.size(), 0.0);
        }
    }
};

inline Tape*& active_tape() {
    thread_local Tape* tape = nullptr;
    return tape;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    static Tensor filled(Shape shape, double v) {
        auto t = zeros(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return node().shape; }
    std::size_t dim() const { return node().shape.size(); }
    std::size_t numel() const { return node().value.size(); }
    std::size_t rows() const { return node().shape.size() == 1 ? 1 : node().shape[0]; }
    std::size_t cols() const { return node().shape.back(); }

    std::span<const double> data() const { return node().value; }
    // Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data() { return node().value; }
    const std::vector<double>& vec() const { return node().value; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node().value[0];
    }
    double operator[](std::size_t i) const { return node().value[i]; }
    double at(std::size_t r, std::size_t c) const { return node().value[r * cols() + c]; }

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (!node().leaf) throw ContractError("requires_grad can only be set on leaf tensors");
        node().requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !node().grad.empty(); }
    std::span<const double> grad() const { return node().grad; }
    std::span<double> mutable_grad() {
        node().ensure_grad();
        return node().grad;
    }
    void zero_grad() {
        auto& g = node().grad;
        std::fill(g.begin(), g.end(), 0.0);
    }
    void clear_grad() {
        profile::on_free(node().grad.size());
        node().grad.clear();
        node().grad.shrink_to_fit();
    }

    // Fresh leaf holding a copy of the values.
    Tensor clone() const { return Tensor(shape(), node().value, requires_grad()); }
    Tensor detach() const { return Tensor(shape(), node().value, false); }
    Tensor reshape(Shape s) const;

    bool same_node(const Tensor& o) const { return n_ == o.n_; }

    detail::Node& node() const {
        if (!n_) throw ContractError("use of undefined tensor");
        return *n_;
    }
    const std::shared_ptr<detail::Node>& handle() const { return n_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    Tensor(Shape shape, std::vector<double> data, bool requires_grad)
        : n_(std::make_shared<detail::Node>(std::move(shape), std::move(data))) {
        n_->requires_grad = requires_grad;
    }

    std::shared_ptr<detail::Node> n_;
};

/// Ordered record of differentiable ops executed while the tape is active.
/// Construction makes the tape current for this thread; destruction restores the previous one.
class Tape {
public:
    Tape() : prev_(detail::active_tape()) { detail::active_tape() = this; }
    ~Tape() { detail::active_tape() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void record(std::shared_ptr<detail::Node> n) { nodes_.push_back(std::move(n)); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
        auto* target = loss.handle().get();
        std::size_t end = nodes_.size();
        while (end > 0 && nodes_[end - 1].get() != target) --end;
        if (end == 0) throw ContractError("loss is not connected to the active tape");
        for (std::size_t i = 0; i < end; ++i) {
            auto& g = nodes_[i]->grad;
            if (g.size() != nodes_[i]->value.size()) nodes_[i]->ensure_grad();
            std::fill(g.begin(), g.end(), 0.0);
        }
        target->grad[0] = 1.0;
        for (std::size_t i = end; i-- > 0;) {
            auto& n = *nodes_[i];
            if (n.backward_fn) n.backward_fn(n);
        }
    }

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    Tape* prev_;
};

inline void backward(const Tensor& loss) {
    auto* tape = detail::active_tape();
    if (!tape) throw ContractError("backward called without an active tape");
    tape->backward(loss);
}

namespace detail {

inline bool wants_grad(std::initializer_list<const Tensor*> ins) {
    if (!active_tape()) return false;
    for (auto* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Builds the output tensor; attaches inputs + backward closure when any input needs a grad.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> fn) {
    bool any = false;
    if (active_tape())
        for (auto& t : inputs) any = any || t.requires_grad();
    auto out = Tensor::from(std::move(shape), std::move(value));
    if (any) {
        auto& n = out.node();
        n.leaf = false;
        n.requires_grad = true;
        for (auto& t : inputs) n.inputs.push_back(t.handle());
        n.backward_fn = std::move(fn);
        active_tape()->record(out.handle());
    }
    return out;
}

inline std::vector<double>* grad_of(Node& n, std::size_t i) {
    auto& in = *n.inputs[i];
    if (!in.requires_grad) return nullptr;
    in.ensure_grad();
    return &in.grad;
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline std::vector<double> transposed(const double* a, std::size_t r, std::size_t c) {
    std::vector<double> t(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
    return t;
}

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

inline Tensor Tensor::reshape(Shape s) const {
    if (shape_numel(s) != numel())
        throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    return detail::make_result(std::move(s), node().value, {*this}, [](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    });
}

// ---- arithmetic ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    profile::add_flops(2 * m * k * n);
    std::vector<double> c(m * n, 0.0);
    detail::gemm_acc(a.data().data(), b.data().data(), c.data(), m, k, n);
    return detail::make_result({m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& out) {
        const auto& A = out.inputs[0]->value;
        const auto& B = out.inputs[1]->value;
        if (auto* ga = detail::grad_of(out, 0)) {
            auto bt = detail::transposed(B.data(), k, n);
            detail::gemm_acc(out.grad.data(), bt.data(), ga->data(), m, n, k);
        }
        if (auto* gb = detail::grad_of(out, 1)) {
            auto at = detail::transposed(A.data(), m, k);
            detail::gemm_acc(at.data(), out.grad.data(), gb->data(), k, m, n);
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& n) {
        for (std::size_t s = 0; s < 2; ++s)
            if (auto* g = detail::grad_of(n, s))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (auto* g = detail::grad_of(n, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& n) {
        const auto& A = n.inputs[0]->value;
        const auto& B = n.inputs[1]->value;
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * B[i];
        if (auto* g = detail::grad_of(n, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * A[i];
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
    return detail::make_result(a.shape(), std::move(v), {a}, [s](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * s;
    });
}

/// x[r x c] + b[c] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    const std::size_t c = x.cols(), r = x.numel() / c;
    if (b.numel() != c)
        throw ShapeError("bias of shape " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] += b[j];
    return detail::make_result(x.shape(), std::move(v), {x, b}, [r, c](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (auto* g = detail::grad_of(n, 1))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*g)[j] += n.grad[i * c + j];
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return detail::make_result({1}, {s}, {a}, [](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (auto& x : *g) x += n.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Mean over rows: [r x c] -> [c].
inline Tensor mean_rows(const Tensor& x) {
    const std::size_t c = x.cols(), r = x.numel() / c;
    std::vector<double> v(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j] += x[i * c + j];
    for (auto& e : v) e /= static_cast<double>(r);
    return detail::make_result({c}, std::move(v), {x}, [r, c](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += n.grad[j] / static_cast<double>(r);
    });
}

inline Tensor sin(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(a[i]);
    return detail::make_result(a.shape(), std::move(v), {a}, [](detail::Node& n) {
        const auto& A = n.inputs[0]->value;
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * std::cos(A[i]);
    });
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Tensor gelu(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = gelu_scalar(a[i]);
    return detail::make_result(a.shape(), std::move(v), {a}, [](detail::Node& n) {
        const auto& A = n.inputs[0]->value;
        if (auto* g = detail::grad_of(n, 0)) {
            const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
            for (std::size_t i = 0; i < g->size(); ++i) {
                const double x = A[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                (*g)[i] += n.grad[i] * (cdf + x * pdf);
            }
        }
    });
}

inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t c = x.cols(), r = x.numel() / c;
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < r; ++i) {
        const double* in = x.data().data() + i * c;
        double* out = v.data() + i * c;
        double mx = *std::max_element(in, in + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (out[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[j] /= s;
    }
    detail::check_finite(v, "softmax");
    return detail::make_result(x.shape(), std::move(v), {x}, [r, c](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0)) {
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = n.value.data() + i * c;
                const double* gy = n.grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
                for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += y[j] * (gy[j] - dot);
            }
        }
    });
}

/// Row-wise layer norm over the last dimension with population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t d = x.cols(), r = x.numel() / d;
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not fit " + shape_str(x.shape()));
    std::vector<double> xhat(x.numel()), rstd(r), v(x.numel());
    for (std::size_t i = 0; i < r; ++i) {
        const double* in = x.data().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(d);
        if (!(var + eps > 0.0)) throw NumericError("layer_norm: degenerate variance (d=" + std::to_string(d) + ", eps=0)");
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (in[j] - mu) * rstd[i];
            v[i * d + j] = xhat[i * d + j] * gamma[j] + beta[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(v), {x, gamma, beta},
        [r, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& n) {
            const auto& G = n.inputs[1]->value;
            if (auto* gg = detail::grad_of(n, 1))
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < d; ++j) (*gg)[j] += n.grad[i * d + j] * xhat[i * d + j];
            if (auto* gb = detail::grad_of(n, 2))
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < d; ++j) (*gb)[j] += n.grad[i * d + j];
            if (auto* gx = detail::grad_of(n, 0)) {
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t i = 0; i < r; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = n.grad[i * d + j] * G[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = n.grad[i * d + j] * G[j];
                        (*gx)[i * d + j] += rstd[i] * (dxh - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
                    }
                }
            }
        });
}

/// Gather rows of `table` by index; repeated indices accumulate grads.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
    const std::size_t c = table.cols(), r = table.numel() / c;
    std::vector<double> v(idx.size() * c);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= r)
            throw ShapeError("row index " + std::to_string(idx[i]) + " out of range for " + shape_str(table.shape()));
        std::copy_n(table.data().data() + idx[i] * c, c, v.data() + i * c);
    }
    if (idx.empty()) throw ShapeError("gather_rows with no indices");
    return detail::make_result({idx.size(), c}, std::move(v), {table}, [idx, c](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0))
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) (*g)[idx[i] * c + j] += n.grad[i * c + j];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    for (auto& p : parts) {
        if (p.cols() != c)
            throw ShapeError("concat_rows width mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.numel() / c;
    }
    std::vector<double> v;
    v.reserve(total * c);
    for (auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    return detail::make_result({total, c}, std::move(v), parts, [](detail::Node& n) {
        std::size_t off = 0;
        for (std::size_t s = 0; s < n.inputs.size(); ++s) {
            const std::size_t len = n.inputs[s]->value.size();
            if (auto* g = detail::grad_of(n, s))
                for (std::size_t i = 0; i < len; ++i) (*g)[i] += n.grad[off + i];
            off += len;
        }
    });
}

/// Multi-head scaled dot-product attention. q:[tq x D], k,v:[tk x D].
/// With `causal`, query i attends to keys j <= i + (tk - tq).
/// When `probs` is non-null it receives heads x tq x tk attention weights.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal,
                        std::vector<double>* probs = nullptr) {
    if (q.dim() != 2 || k.dim() != 2 || v.dim() != 2 || k.shape() != v.shape() || q.cols() != k.cols())
        throw ShapeError("attention shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
    const std::size_t tq = q.rows(), tk = k.rows(), D = q.cols();
    if (heads == 0 || D % heads) throw ShapeError("width " + std::to_string(D) + " not divisible by heads");
    const std::size_t dh = D / heads;
    const std::size_t offset = tk >= tq ? tk - tq : 0;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    profile::add_flops(4 * tq * tk * D);

    std::vector<double> P(heads * tq * tk, 0.0);
    std::vector<double> out(tq * D, 0.0);
    const double* Q = q.data().data();
    const double* K = k.data().data();
    const double* V = v.data().data();
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < tq; ++i) {
            double* p = P.data() + (h * tq + i) * tk;
            const std::size_t lim = causal ? std::min(tk, i + offset + 1) : tk;
            double mx = -INFINITY;
            for (std::size_t j = 0; j < lim; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += Q[i * D + c0 + e] * K[j * D + c0 + e];
                p[j] = s * sc;
                mx = std::max(mx, p[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < lim; ++j) z += (p[j] = std::exp(p[j] - mx));
            for (std::size_t j = 0; j < lim; ++j) p[j] /= z;
            double* o = out.data() + i * D + c0;
            for (std::size_t j = 0; j < lim; ++j) {
                const double w = p[j];
                const double* vr = V + j * D + c0;
                for (std::size_t e = 0; e < dh; ++e) o[e] += w * vr[e];
            }
        }
    }
    if (probs) *probs = P;
    return detail::make_result(
        {tq, D}, std::move(out), {q, k, v},
        [tq, tk, D, dh, heads, sc, P = std::move(P)](detail::Node& n) {
            const double* Q = n.inputs[0]->value.data();
            const double* K = n.inputs[1]->value.data();
            const double* V = n.inputs[2]->value.data();
            auto* gq = detail::grad_of(n, 0);
            auto* gk = detail::grad_of(n, 1);
            auto* gv = detail::grad_of(n, 2);
            std::vector<double> dp(tk);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < tq; ++i) {
                    const double* p = P.data() + (h * tq + i) * tk;
                    const double* go = n.grad.data() + i * D + c0;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < tk; ++j) {
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) s += go[e] * V[j * D + c0 + e];
                        dp[j] = s;
                        dot += s * p[j];
                        if (gv && p[j] != 0.0)
                            for (std::size_t e = 0; e < dh; ++e) (*gv)[j * D + c0 + e] += p[j] * go[e];
                    }
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (p[j] == 0.0) continue;
                        const double ds = p[j] * (dp[j] - dot) * sc;
                        if (gq)
                            for (std::size_t e = 0; e < dh; ++e) (*gq)[i * D + c0 + e] += ds * K[j * D + c0 + e];
                        if (gk)
                            for (std::size_t e = 0; e < dh; ++e) (*gk)[j * D + c0 + e] += ds * Q[i * D + c0 + e];
                    }
                }
            }
        });
}

/// Sum over (row, target) pairs of -log softmax(logits[row])[target].
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& rows,
                                 const std::vector<std::size_t>& targets) {
    if (rows.size() != targets.size()) throw ContractError("cross_entropy_rows: rows/targets length mismatch");
    if (rows.empty()) throw ContractError("cross_entropy_rows: no target positions");
    const std::size_t c = logits.cols(), r = logits.numel() / c;
    std::vector<double> sm(rows.size() * c);
    double loss = 0.0;
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t] >= r || targets[t] >= c) throw ShapeError("cross_entropy_rows index out of range");
        const double* in = logits.data().data() + rows[t] * c;
        const double mx = *std::max_element(in, in + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - in[targets[t]];
        for (std::size_t j = 0; j < c; ++j) sm[t * c + j] = std::exp(in[j] - lse);
    }
    return detail::make_result({1}, {loss}, {logits}, [rows, targets, c, sm = std::move(sm)](detail::Node& n) {
        if (auto* g = detail::grad_of(n, 0)) {
            const double up = n.grad[0];
            for (std::size_t t = 0; t < rows.size(); ++t) {
                double* gr = g->data() + rows[t] * c;
                for (std::size_t j = 0; j < c; ++j) gr[j] += up * sm[t * c + j];
                gr[targets[t]] -= up;
            }
        }
    });
}

// ---- gradient checking ----

struct FdReport {
    double error = 0.0;  // max relative error over coordinates
    std::size_t param = 0, index = 0;  // where it occurred
    double analytic = 0.0, numeric = 0.0;
};

/// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-12).
/// `f` must build its scalar output from `params` using tensor ops. `order` 2 uses the
/// (f(x+h) - f(x-h)) / 2h stencil, order 4 the five-point central stencil.
inline FdReport finite_diff_report(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                                   const std::function<void(std::vector<std::vector<double>>&)>& tamper = {},
                                   int order = 2) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("finite_diff_check: h outside [1e-7, 1e-3]");
    if (order != 2 && order != 4) throw ContractError("finite_diff_check: order must be 2 or 4");
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        for (auto& p : params) p.zero_grad();
        auto loss = f();
        tape.backward(loss);
        for (auto& p : params) {
            auto g = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                  : std::vector<double>(p.numel(), 0.0);
            analytic.push_back(std::move(g));
        }
    }
    if (tamper) tamper(analytic);
    FdReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            auto at = [&](double dx) {
                data[i] = orig + dx;
                return f().item();
            };
            double num;
            if (order == 2) {
                num = (at(h) - at(-h)) / (2.0 * h);
            } else {
                const double d1 = at(h) - at(-h), d2 = at(2 * h) - at(-2 * h);
                num = (8.0 * d1 - d2) / (12.0 * h);
            }
            data[i] = orig;
            const double a = analytic[pi][i];
            const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-12});
            if (err > rep.error) rep = {err, pi, i, a, num};
        }
    }
    return rep;
}

inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                                const std::function<void(std::vector<std::vector<double>>&)>& tamper = {},
                                int order = 2) {
    return finite_diff_report(f, std::move(params), h, tamper, order).error;
}

}  // namespace pipmm
