#pragma once

// Variance-exploding diffusion: sigma(t) = sigma_min (sigma_max / sigma_min)^t,
// driftless (f = 0, s = 1), g(t) = sqrt(2 sigma dsigma/dt).

#include <cmath>
#include <string>

#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/rng.hpp"

namespace diffscale::sde {

class VarianceSchedule {
public:
    VarianceSchedule() = default;
    VarianceSchedule(double sigma_min, double sigma_max, double t_min = 1e-3)
        : sigma_min_(sigma_min), sigma_max_(sigma_max), t_min_(t_min)
    {
        if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
            throw ConfigError("variance schedule requires 0 < sigma_min < sigma_max");
        if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("variance schedule requires t_min in (0, 1)");
    }

    double sigma_min() const noexcept { return sigma_min_; }
    double sigma_max() const noexcept { return sigma_max_; }
    double t_min() const noexcept { return t_min_; }
    double log_ratio() const noexcept { return std::log(sigma_max_ / sigma_min_); }

    double sigma(double t) const
    {
        check(t);
        return sigma_min_ * std::pow(sigma_max_ / sigma_min_, t);
    }

    double diffusion_g(double t) const { return sigma(t) * std::sqrt(2.0 * log_ratio()); }

    /// g(t)^2 = d(sigma^2)/dt.
    double g2(double t) const
    {
        const double s = sigma(t);
        return 2.0 * log_ratio() * s * s;
    }

private:
    static void check(double t)
    {
        if (!(t >= 0.0 && t <= 1.0)) throw DomainError("diffusion time t=" + std::to_string(t) + " outside [0, 1]");
    }

    double sigma_min_ = 0.01;
    double sigma_max_ = 50.0;
    double t_min_ = 1e-3;
};

/// Draw from the transition kernel p(x_t | x_0) = N(x_0, sigma(t)^2 I) with supplied unit noise.
inline Field perturb(const VarianceSchedule& sched, const Field& x0, double t, const Field& z)
{
    require_same_shape(x0, z, "perturb");
    const double s = sched.sigma(t);
    Field out = x0;
    auto o = out.values();
    auto zv = z.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(o[i] + s * zv[i]);
    return out;
}

inline Field prior_sample(const VarianceSchedule& sched, int height, int width, Rng& rng)
{
    Field out(height, width);
    for (auto& v : out.values()) v = static_cast<float>(sched.sigma_max() * rng.normal());
    return out;
}

} // namespace diffscale::sde
