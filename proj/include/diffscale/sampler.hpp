#pragma once

// Reverse-time integrators for the driftless VE process and ensemble assembly.
//
//   EM:  x <- x - g^2 s dt + g sqrt|dt| z
//   PF:  x <- x - 1/2 g^2 s dt
//   Heun: PF predictor to t_{i+1}, corrector averages both slopes; the final step keeps the predictor.
//
// dt < 0 throughout; the grid is equidistant from 1 down to t_min.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/parallel.hpp"
#include "diffscale/rng.hpp"
#include "diffscale/scorenet.hpp"
#include "diffscale/sde.hpp"

namespace diffscale::sampling {

enum class Method { EulerMaruyama, ProbFlowEuler, Heun2 };

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::EulerMaruyama: return "em";
    case Method::ProbFlowEuler: return "pf";
    case Method::Heun2: return "heun";
    }
    return "?";
}

inline Method parse_method(std::string_view s)
{
    if (s == "em" || s == "euler_maruyama") return Method::EulerMaruyama;
    if (s == "pf" || s == "prob_flow_euler") return Method::ProbFlowEuler;
    if (s == "heun" || s == "heun2") return Method::Heun2;
    throw ConfigError("unknown solver '" + std::string(s) + "' (expected em, pf or heun)");
}

struct SolverSpec {
    Method method = Method::EulerMaruyama;
    int steps = 100;
    std::uint64_t seed = 0;
};

/// t_0 = 1 > t_1 > ... > t_steps = t_min, equidistant.
inline std::vector<double> time_grid(const sde::VarianceSchedule& sched, int steps)
{
    if (steps < 1) throw ConfigError("solver steps must be >= 1, got " + std::to_string(steps));
    std::vector<double> t(static_cast<std::size_t>(steps) + 1);
    const double span = 1.0 - sched.t_min();
    for (int i = 0; i <= steps; ++i) t[static_cast<std::size_t>(i)] = 1.0 - span * i / steps;
    t.back() = sched.t_min();
    return t;
}

/// Score evaluations a solver performs for a given step count.
inline long long expected_nfe(Method m, int steps)
{
    return m == Method::Heun2 ? 2LL * steps - 1 : steps;
}

enum class NoiseMode { Normal, Antithetic, Off };

/// Unit Gaussian draws for one member. Antithetic returns the same draws negated; Off returns zeros.
class NoiseStream {
public:
    explicit NoiseStream(std::uint64_t seed, NoiseMode mode = NoiseMode::Normal)
        : rng_(seed), sign_(mode == NoiseMode::Normal ? 1.0 : mode == NoiseMode::Antithetic ? -1.0 : 0.0)
    {
    }

    void fill(std::span<float> out)
    {
        for (auto& v : out) v = static_cast<float>(sign_ * rng_.normal());
    }

private:
    Rng rng_;
    double sign_;
};

/// Batched score: out[n] = s(x[n], t). All members share t.
using BatchScoreFn = std::function<void(std::span<const Field> x, double t, std::span<Field> out)>;

/// Draws x(1) ~ N(0, sigma_max^2 I) for every member from its own stream.
inline std::vector<Field> draw_prior(const sde::VarianceSchedule& sched, int h, int w, std::span<NoiseStream> noise)
{
    std::vector<Field> x;
    x.reserve(noise.size());
    for (auto& n : noise) {
        Field f(h, w);
        n.fill(f.values());
        for (auto& v : f.values()) v = static_cast<float>(sched.sigma_max() * v);
        x.push_back(std::move(f));
    }
    return x;
}

/// Integrates x in place from t = 1 to t_min. Returns the number of score evaluations.
inline long long integrate(const BatchScoreFn& score, const sde::VarianceSchedule& sched, Method method, int steps,
                           std::vector<Field>& x, std::span<NoiseStream> noise)
{
    if (method == Method::EulerMaruyama && noise.size() != x.size())
        throw UsageError("integrate: one noise stream per member required");
    const auto t = time_grid(sched, steps);
    const std::size_t N = x.size();
    std::vector<Field> s(N), s2(N), pred(N);
    for (std::size_t n = 0; n < N; ++n) s[n] = s2[n] = Field(x[n].height(), x[n].width());
    long long nfe = 0;
    Field z;
    for (int i = 0; i < steps; ++i) {
        const double ti = t[static_cast<std::size_t>(i)], tn = t[static_cast<std::size_t>(i) + 1];
        const double dt = tn - ti;
        const double g2 = sched.g2(ti);
        score(x, ti, s);
        ++nfe;
        switch (method) {
        case Method::EulerMaruyama: {
            const double gs = std::sqrt(g2) * std::sqrt(-dt);
            for (std::size_t n = 0; n < N; ++n) {
                if (!z.same_shape(x[n])) z = Field(x[n].height(), x[n].width());
                noise[n].fill(z.values());
                auto xv = x[n].values();
                auto sv = s[n].values();
                auto zv = z.values();
                for (std::size_t p = 0; p < xv.size(); ++p) xv[p] = static_cast<float>(xv[p] - g2 * sv[p] * dt + gs * zv[p]);
            }
            break;
        }
        case Method::ProbFlowEuler:
            for (std::size_t n = 0; n < N; ++n) {
                auto xv = x[n].values();
                auto sv = s[n].values();
                for (std::size_t p = 0; p < xv.size(); ++p) xv[p] = static_cast<float>(xv[p] - 0.5 * g2 * sv[p] * dt);
            }
            break;
        case Method::Heun2: {
            for (std::size_t n = 0; n < N; ++n) {
                pred[n] = x[n];
                auto pv = pred[n].values();
                auto sv = s[n].values();
                for (std::size_t p = 0; p < pv.size(); ++p) pv[p] = static_cast<float>(pv[p] - 0.5 * g2 * sv[p] * dt);
            }
            if (i + 1 == steps) {
                x.swap(pred);
                break;
            }
            const double g2n = sched.g2(tn);
            score(pred, tn, s2);
            ++nfe;
            for (std::size_t n = 0; n < N; ++n) {
                auto xv = x[n].values();
                auto sv = s[n].values();
                auto s2v = s2[n].values();
                for (std::size_t p = 0; p < xv.size(); ++p)
                    xv[p] = static_cast<float>(xv[p] - 0.25 * (g2 * sv[p] + g2n * s2v[p]) * dt);
            }
            break;
        }
        }
    }
    return nfe;
}

/// Pointwise score s(x, t) lifted to a batch.
template <class PointScore>
BatchScoreFn pointwise(PointScore f)
{
    return [f](std::span<const Field> x, double t, std::span<Field> out) {
        for (std::size_t n = 0; n < x.size(); ++n) {
            auto xv = x[n].values();
            auto ov = out[n].values();
            for (std::size_t p = 0; p < xv.size(); ++p) ov[p] = static_cast<float>(f(static_cast<double>(xv[p]), t));
        }
    };
}

/// Field-valued score s(x, t) lifted to a batch.
template <class FieldScore>
BatchScoreFn fieldwise(FieldScore f)
{
    return [f](std::span<const Field> x, double t, std::span<Field> out) {
        for (std::size_t n = 0; n < x.size(); ++n) out[n] = f(x[n], t);
    };
}

/// One trajectory from the spec's seed: prior and in-loop noise come from the same stream.
inline Field solve(const BatchScoreFn& score, const sde::VarianceSchedule& sched, const SolverSpec& spec, int h, int w,
                   long long* nfe = nullptr, NoiseMode mode = NoiseMode::Normal)
{
    NoiseStream noise(spec.seed, mode);
    auto x = draw_prior(sched, h, w, std::span<NoiseStream>(&noise, 1));
    const long long count = integrate(score, sched, spec.method, spec.steps, x, std::span<NoiseStream>(&noise, 1));
    if (nfe) *nfe = count;
    return std::move(x.front());
}

template <class FieldScore>
Field euler_maruyama_sample(FieldScore&& score, const sde::VarianceSchedule& sched, SolverSpec spec, int h, int w,
                            long long* nfe = nullptr)
{
    spec.method = Method::EulerMaruyama;
    return solve(fieldwise(std::forward<FieldScore>(score)), sched, spec, h, w, nfe);
}

template <class FieldScore>
Field prob_flow_euler_sample(FieldScore&& score, const sde::VarianceSchedule& sched, SolverSpec spec, int h, int w,
                             long long* nfe = nullptr)
{
    spec.method = Method::ProbFlowEuler;
    return solve(fieldwise(std::forward<FieldScore>(score)), sched, spec, h, w, nfe);
}

template <class FieldScore>
Field heun2_sample(FieldScore&& score, const sde::VarianceSchedule& sched, SolverSpec spec, int h, int w,
                   long long* nfe = nullptr)
{
    spec.method = Method::Heun2;
    return solve(fieldwise(std::forward<FieldScore>(score)), sched, spec, h, w, nfe);
}

// ---------------------------------------------------------------- ensembles

struct EnsembleForecast {
    std::vector<Field> members;
    score::Condition condition;
    long long nfe = 0; // per member

    int size() const noexcept { return static_cast<int>(members.size()); }
    Field mean() const
    {
        if (members.empty()) throw UsageError("ensemble mean of an empty ensemble");
        Field out(members.front().height(), members.front().width());
        auto ov = out.values();
        for (std::size_t p = 0; p < ov.size(); ++p) {
            double s = 0.0;
            for (const auto& m : members) s += m.values()[p];
            ov[p] = static_cast<float>(s / static_cast<double>(members.size()));
        }
        return out;
    }
};

struct EnsembleOptions {
    double guidance = 0.0;
    /// Members integrated together per network call; 0 means all K at once.
    int batch = 0;
};

/// One trajectory to integrate: its condition and its noise seed.
struct SampleRequest {
    const score::PreparedCondition* cond = nullptr;
    std::uint64_t seed = 0;
};

/// Guided batch score where every item carries its own condition.
template <class T>
BatchScoreFn request_score(const score::ScoreNetwork<T>& net, std::span<const SampleRequest> req,
                           const score::PreparedCondition& null_cond, double w)
{
    return [&net, req, &null_cond, w](std::span<const Field> x, double t, std::span<Field> out) {
        std::vector<double> ts(x.size(), t);
        std::vector<const score::PreparedCondition*> cs(x.size());
        for (std::size_t n = 0; n < x.size(); ++n) cs[n] = req[n].cond;
        auto eps = net.noise_prediction(x, ts, cs);
        if (w != 0.0) {
            std::vector<const score::PreparedCondition*> ns(x.size(), &null_cond);
            const auto eps_u = net.noise_prediction(x, ts, ns);
            for (std::size_t n = 0; n < x.size(); ++n) {
                auto a = eps[n].values();
                auto b = eps_u[n].values();
                for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>((1.0 + w) * a[i] - w * b[i]);
            }
        }
        const double inv_sigma = 1.0 / net.schedule().sigma(t);
        for (std::size_t n = 0; n < x.size(); ++n) {
            auto ev = eps[n].values();
            auto ov = out[n].values();
            for (std::size_t i = 0; i < ev.size(); ++i) ov[i] = static_cast<float>(-ev[i] * inv_sigma);
        }
    };
}

/// Integrates every request, `batch` at a time (0 = all at once). Output is in physical units.
template <class T>
std::vector<Field> sample_requests(const score::ScoreNetwork<T>& net, std::span<const SampleRequest> req, Method method,
                                   int steps, double guidance = 0.0, int batch = 0, long long* nfe = nullptr)
{
    const auto pn = net.prepare(score::Condition::null_token());
    const int S = net.canvas();
    const std::size_t chunk = batch <= 0 ? req.size() : static_cast<std::size_t>(batch);
    std::vector<Field> out;
    out.reserve(req.size());
    for (std::size_t first = 0; first < req.size(); first += chunk) {
        const auto part = req.subspan(first, std::min(chunk, req.size() - first));
        std::vector<NoiseStream> noise;
        for (const auto& r : part) noise.emplace_back(r.seed);
        auto x = draw_prior(net.schedule(), S, S, noise);
        const long long count = integrate(request_score(net, part, pn, guidance), net.schedule(), method, steps, x, noise);
        if (nfe) *nfe = count;
        for (std::size_t n = 0; n < x.size(); ++n) {
            if (!x[n].all_finite())
                throw NumericalError("sampler produced non-finite values (trajectory " + std::to_string(first + n) + ")");
            out.push_back(net.standardizer().denormalize_target(x[n]));
        }
    }
    return out;
}

/// K reverse runs, member i seeded with derive_seed(spec.seed, i). Output in physical units.
template <class T>
EnsembleForecast sample_ensemble(const score::ScoreNetwork<T>& net, const score::Condition& cond, const SolverSpec& spec,
                                 int K, EnsembleOptions opt = {})
{
    if (K < 1) throw UsageError("ensemble size must be >= 1, got " + std::to_string(K));
    const auto pc = net.prepare(cond);
    std::vector<SampleRequest> req;
    for (int i = 0; i < K; ++i) req.push_back({&pc, derive_seed(spec.seed, static_cast<std::uint64_t>(i))});
    EnsembleForecast ens;
    ens.condition = cond;
    try {
        ens.members = sample_requests(net, req, spec.method, spec.steps, opt.guidance, opt.batch, &ens.nfe);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at alpha " + std::to_string(cond.alpha) + ", lead " +
                             std::to_string(cond.lead));
    }
    return ens;
}

} // namespace diffscale::sampling
