#pragma once

#include <cmath>
#include <vector>

#include "diffscale/errors.hpp"
#include "diffscale/tensor.hpp"

namespace diffscale::optim {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0; // <= 0 disables clipping
};

/// Adam with global gradient-norm clipping.
template <class T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    long long steps() const noexcept { return t_; }

    /// Applies one update; returns the gradient norm before clipping.
    double step(std::vector<ad::Tensor<T>>& params, const std::vector<ad::Tensor<T>>& grads)
    {
        if (params.size() != grads.size()) throw DimensionError("adam: parameter/gradient count mismatch");
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.numel(), 0.0);
                v_.emplace_back(p.numel(), 0.0);
            }
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (grads[i].numel() != params[i].numel()) throw DimensionError("adam: gradient shape mismatch");
            for (T g : grads[i].data) sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericalError("adam: non-finite gradient norm");
        const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& m = m_[i];
            auto& v = v_[i];
            auto& p = params[i].data;
            const auto& g = grads[i].data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = scale * g[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mh = m[j] / bc1, vh = v[j] / bc2;
                p[j] = static_cast<T>(p[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
        return norm;
    }

private:
    AdamConfig cfg_;
    long long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace diffscale::optim
