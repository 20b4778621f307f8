#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pipmm/nn.hpp"

namespace pipmm {

enum class BridgeKind { linear, mlp };

struct BridgeConfig {
    BridgeKind kind = BridgeKind::mlp;
    std::size_t depth = 4;
    std::size_t d_in = 32;
    std::size_t d_hidden = 32;
    std::size_t d_out = 32;

    std::size_t layers() const { return kind == BridgeKind::linear ? 1 : depth; }

    void validate() const {
        if (kind == BridgeKind::mlp && depth == 0) throw ConfigError("model.bridge_depth: must be at least 1");
        if (d_in == 0 || d_out == 0 || (layers() > 1 && d_hidden == 0)) throw ConfigError("model.bridge: zero width");
    }
};

/// Trainable parameter count of the affine layers.
inline std::size_t count_params(const BridgeConfig& cfg) {
    cfg.validate();
    if (cfg.layers() == 1) return cfg.d_in * cfg.d_out + cfg.d_out;
    std::size_t n = cfg.d_in * cfg.d_hidden + cfg.d_hidden;
    n += (cfg.layers() - 2) * (cfg.d_hidden * cfg.d_hidden + cfg.d_hidden);
    n += cfg.d_hidden * cfg.d_out + cfg.d_out;
    return n;
}

/// T_class = MLP(standardize(H_l)). The standardizer is a frozen mean/whitening pair
/// (identity by default) and holds no trainable parameters.
class Bridge {
public:
    Bridge() = default;
    Bridge(const BridgeConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t k = cfg.layers();
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t in = i == 0 ? cfg.d_in : cfg.d_hidden;
            const std::size_t out = i + 1 == k ? cfg.d_out : cfg.d_hidden;
            layers_.emplace_back(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        }
        mean_ = Tensor::zeros({cfg.d_in});
        whiten_ = Tensor::zeros({cfg.d_in, cfg.d_in});
        for (std::size_t i = 0; i < cfg.d_in; ++i) whiten_.mutable_data()[i * cfg.d_in + i] = 1.0;
    }

    const BridgeConfig& config() const { return cfg_; }
    std::vector<Linear>& layers() { return layers_; }
    const Tensor& whitening() const { return whiten_; }
    const Tensor& input_mean() const { return mean_; }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (auto& l : layers_) n += l.w.numel() + l.b.numel();
        return n;
    }

    Tensor operator()(const Tensor& prompt_vec) const {
        if (prompt_vec.numel() != cfg_.d_in)
            throw ShapeError("prompt vector " + shape_str(prompt_vec.shape()) + " does not match bridge input " +
                             std::to_string(cfg_.d_in));
        for (double x : prompt_vec.data())
            if (!std::isfinite(x)) throw NumericError("t_cls: non-finite prompt vector");
        auto h = matmul(sub(prompt_vec.reshape({1, cfg_.d_in}), mean_.reshape({1, cfg_.d_in})), whiten_);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i](h);
            if (i + 1 < layers_.size()) h = gelu(h);
        }
        return h.reshape({cfg_.d_out});
    }

    /// Fits the standardizer on a set of prompt vectors: W = U diag((e + ridge)^-1/2) U^T of their covariance.
    void fit_whitening(const std::vector<Tensor>& samples, double ridge) {
        if (samples.empty()) throw ContractError("fit_whitening: no samples");
        const auto d = static_cast<Eigen::Index>(cfg_.d_in);
        Eigen::MatrixXd X(static_cast<Eigen::Index>(samples.size()), d);
        for (std::size_t i = 0; i < samples.size(); ++i)
            for (Eigen::Index j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), j) = samples[i][static_cast<std::size_t>(j)];
        Eigen::RowVectorXd mu = X.colwise().mean();
        Eigen::MatrixXd Xc = X.rowwise() - mu;
        Eigen::MatrixXd C = (Xc.transpose() * Xc) / static_cast<double>(samples.size());
        C += ridge * Eigen::MatrixXd::Identity(d, d);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
        Eigen::MatrixXd W = es.eigenvectors() * es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() *
                            es.eigenvectors().transpose();
        auto m = mean_.mutable_data();
        auto w = whiten_.mutable_data();
        for (Eigen::Index i = 0; i < d; ++i) {
            m[static_cast<std::size_t>(i)] = mu(i);
            for (Eigen::Index j = 0; j < d; ++j) w[static_cast<std::size_t>(i * d + j)] = W(i, j);
        }
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit(prefix + ".layers." + std::to_string(i), f);
    }

    template <class F>
    void visit_buffers(const std::string& prefix, F&& f) {
        f(prefix + ".input_mean", mean_);
        f(prefix + ".whitening", whiten_);
    }

private:
    BridgeConfig cfg_;
    std::vector<Linear> layers_;
    Tensor mean_, whiten_;
};

}  // namespace pipmm
