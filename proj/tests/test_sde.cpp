#include <gtest/gtest.h>

#include <cmath>

#include "diffscale/rng.hpp"
#include "diffscale/sde.hpp"

using namespace diffscale;

namespace {

// sigma^2 by a direct product form, independent of the pow-based implementation.
double sigma_oracle(double smin, double smax, double t) { return std::exp(std::log(smin) + t * (std::log(smax) - std::log(smin))); }

double g2_fd(const sde::VarianceSchedule& s, double t, double h = 1e-6)
{
    const double a = sigma_oracle(s.sigma_min(), s.sigma_max(), t + h);
    const double b = sigma_oracle(s.sigma_min(), s.sigma_max(), t - h);
    return (a * a - b * b) / (2 * h);
}

} // namespace

TEST(Sigma, Endpoints)
{
    sde::VarianceSchedule s;
    EXPECT_DOUBLE_EQ(s.sigma(0.0), 0.01);
    EXPECT_NEAR(s.sigma(1.0), 50.0, 1e-12);
}

TEST(Sigma, Midpoint)
{
    sde::VarianceSchedule s;
    EXPECT_NEAR(s.sigma(0.5), std::sqrt(0.01 * 50.0), 1e-12);
    EXPECT_NEAR(s.sigma(0.5), 0.7071068, 1e-6);
}

TEST(Sigma, OutsideUnitIntervalThrows)
{
    sde::VarianceSchedule s;
    EXPECT_THROW(s.sigma(-0.01), DomainError);
    EXPECT_THROW(s.sigma(1.01), DomainError);
    EXPECT_THROW(s.diffusion_g(2.0), DomainError);
}

TEST(Sigma, StrictlyIncreasing)
{
    sde::VarianceSchedule s;
    double prev = s.sigma(0.0);
    for (int i = 1; i <= 1000; ++i) {
        const double cur = s.sigma(i / 1000.0);
        EXPECT_LT(prev, cur);
        prev = cur;
    }
}

TEST(Schedule, InvalidParameters)
{
    EXPECT_THROW(sde::VarianceSchedule(0.0, 1.0), ConfigError);
    EXPECT_THROW(sde::VarianceSchedule(2.0, 1.0), ConfigError);
    EXPECT_THROW(sde::VarianceSchedule(0.01, 50.0, 1.0), ConfigError);
}

TEST(Diffusion, RatioConstant)
{
    sde::VarianceSchedule s;
    const double k = std::sqrt(2.0 * std::log(50.0 / 0.01));
    for (double t : {0.0, 0.1, 0.37, 0.8, 1.0}) EXPECT_NEAR(s.diffusion_g(t) / s.sigma(t), k, 1e-12);
}

TEST(Diffusion, EndpointsMatchFiniteDifference)
{
    sde::VarianceSchedule s;
    EXPECT_NEAR(s.diffusion_g(0.0), 0.041274, 5e-6);
    EXPECT_NEAR(s.diffusion_g(0.0), std::sqrt(g2_fd(s, 0.0)), 1e-6);
    EXPECT_NEAR(s.diffusion_g(1.0), 206.37, 1e-2);
    EXPECT_NEAR(s.diffusion_g(1.0) / std::sqrt(g2_fd(s, 1.0)), 1.0, 1e-6);
}

TEST(Diffusion, G2IsDerivativeOfVariance)
{
    sde::VarianceSchedule s;
    Rng rng(2024);
    for (int i = 0; i < 20; ++i) {
        const double t = rng.uniform(0.01, 0.99);
        EXPECT_NEAR(s.g2(t) / g2_fd(s, t), 1.0, 1e-4) << "t=" << t;
    }
}

TEST(Perturb, ZeroNoiseIsIdentity)
{
    sde::VarianceSchedule s;
    Field x0(3, 4, 2.5f);
    EXPECT_EQ(sde::perturb(s, x0, 0.7, Field(3, 4, 0.0f)), x0);
}

TEST(Perturb, UnitNoiseAddsSigma)
{
    sde::VarianceSchedule s;
    Field out = sde::perturb(s, Field(2, 2, 0.0f), 0.5, Field(2, 2, 1.0f));
    for (float v : out.values()) EXPECT_NEAR(v, 0.7071068, 1e-6);
}

TEST(Perturb, ShapeMismatch)
{
    sde::VarianceSchedule s;
    EXPECT_THROW(sde::perturb(s, Field(2, 2), 0.5, Field(2, 3)), DimensionError);
}

TEST(Perturb, MonteCarloVariance)
{
    sde::VarianceSchedule s;
    for (double t : {0.1, 0.5, 0.9}) {
        Rng rng(derive_seed(77, static_cast<std::uint64_t>(t * 10)));
        Field z(1, 100000);
        rng.fill_normal(z.values());
        Field xt = sde::perturb(s, Field(1, 100000, 0.0f), t, z);
        double m = xt.mean(), v = 0;
        for (float x : xt.values()) v += (x - m) * (x - m);
        v /= static_cast<double>(xt.size() - 1);
        EXPECT_NEAR(v / (s.sigma(t) * s.sigma(t)), 1.0, 0.03) << "t=" << t;
    }
}

TEST(Prior, MomentsOverMillionDraws)
{
    sde::VarianceSchedule s;
    Rng rng(5);
    Field f = sde::prior_sample(s, 1000, 1000, rng);
    const double m = f.mean();
    double v = 0;
    for (float x : f.values()) v += (x - m) * (x - m);
    v /= static_cast<double>(f.size() - 1);
    EXPECT_NEAR(std::sqrt(v), 50.0, 0.5);
    EXPECT_NEAR(m, 0.0, 0.2);
}

TEST(Prior, Deterministic)
{
    sde::VarianceSchedule s;
    Rng a(42), b(42);
    EXPECT_EQ(sde::prior_sample(s, 8, 8, a), sde::prior_sample(s, 8, 8, b));
}
