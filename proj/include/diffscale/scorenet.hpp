#pragma once

// Conditional score model s(x_t, t, tau) = -eps_hat(x_t, t, tau) / sigma(t).
//
// eps_hat is a three-level UNet (S -> S/2 -> S/4) with self-attention at the
// coarsest level. The noisy canvas enters scaled by 1/sqrt(1 + sigma^2) and is
// concatenated with the standardized condition channels; diffusion time and
// the (alpha, lead) pair are embedded with Fourier features and injected into
// every residual block.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "diffscale/autodiff.hpp"
#include "diffscale/checkpoint.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/rng.hpp"
#include "diffscale/sde.hpp"

namespace diffscale::score {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

/// Conditioning configurations: which channels accompany the noisy canvas.
enum class ConfigId { LrWsSf, SfLrDf, LrWsSfLrDf };

inline std::string to_string(ConfigId id)
{
    switch (id) {
    case ConfigId::LrWsSf: return "lr-ws+sf";
    case ConfigId::SfLrDf: return "sf+lr-df";
    case ConfigId::LrWsSfLrDf: return "lr-ws+sf+lr-df";
    }
    return "?";
}

inline ConfigId parse_config_id(std::string_view s)
{
    if (s == "lr-ws+sf") return ConfigId::LrWsSf;
    if (s == "sf+lr-df") return ConfigId::SfLrDf;
    if (s == "lr-ws+sf+lr-df") return ConfigId::LrWsSfLrDf;
    throw ConfigError("unknown conditioning configuration '" + std::string(s) +
                      "' (expected lr-ws+sf, sf+lr-df or lr-ws+sf+lr-df)");
}

/// Low-resolution weather variables used by the configurations with dynamic fields.
inline const std::vector<std::string>& dynamic_variables()
{
    static const std::vector<std::string> names{"t2m", "mslp", "u300", "u925", "v300", "v925", "z500"};
    return names;
}

inline bool uses_lowres_ws(ConfigId id) { return id != ConfigId::SfLrDf; }
inline bool uses_dynamic(ConfigId id) { return id != ConfigId::LrWsSf; }

/// Ordered condition channel names for a configuration.
inline std::vector<std::string> condition_channels(ConfigId id)
{
    std::vector<std::string> out;
    if (uses_lowres_ws(id)) out.push_back("lowres_ws");
    out.push_back("orography");
    out.push_back("land_sea");
    if (uses_dynamic(id))
        for (const auto& n : dynamic_variables()) out.push_back(n);
    return out;
}

inline constexpr double kLeadMin = 1.0;
inline constexpr double kLeadMax = 46.0;

/// The guidance bundle: scaling factor, lead time, low-res forecast and prior channels.
struct Condition {
    double alpha = 1.0;
    double lead = 1.0;
    std::optional<Field> lowres_ws;
    std::vector<std::pair<std::string, Field>> priors;
    bool is_null = false;

    static Condition null_token()
    {
        Condition c;
        c.is_null = true;
        return c;
    }
    const Field* prior(const std::string& name) const
    {
        for (const auto& [n, f] : priors)
            if (n == name) return &f;
        return nullptr;
    }
};

inline void check_condition_range(double alpha, double lead)
{
    if (!(alpha >= 1.0) || !std::isfinite(alpha))
        throw DomainError("scaling factor alpha=" + std::to_string(alpha) + " must be >= 1");
    if (!(lead >= kLeadMin && lead <= kLeadMax))
        throw DomainError("lead time " + std::to_string(lead) + " outside [1, 46] days");
}

struct ChannelStats {
    std::string name;
    double mean = 0.0;
    double std = 1.0;
};

/// Per-channel standardization derived from the training split.
struct Standardizer {
    ChannelStats target{"target", 0.0, 1.0};
    std::vector<ChannelStats> channels;

    const ChannelStats& channel(const std::string& name) const
    {
        for (const auto& c : channels)
            if (c.name == name) return c;
        throw ConfigError("no normalization statistics for channel '" + name + "'");
    }
    Field normalize_target(const Field& f) const
    {
        Field out = f;
        for (auto& v : out.values()) v = static_cast<float>((v - target.mean) / target.std);
        return out;
    }
    Field denormalize_target(const Field& f) const
    {
        Field out = f;
        for (auto& v : out.values()) v = static_cast<float>(v * target.std + target.mean);
        return out;
    }
};

struct NetConfig {
    ConfigId config = ConfigId::LrWsSf;
    int canvas = 48;
    std::array<int, 3> widths{32, 64, 128};
    int emb_dim = 128;
    int fourier = 16;
    int groups = 8;
};

/// [sin(w_k u)..., cos(w_k u)...] with w_k = 100^(k/(F-1)), k = 0..F-1.
inline std::vector<double> fourier_features(double u, int F)
{
    std::vector<double> out(static_cast<std::size_t>(2 * F));
    for (int k = 0; k < F; ++k) {
        const double w = F == 1 ? 1.0 : std::pow(100.0, static_cast<double>(k) / (F - 1));
        out[static_cast<std::size_t>(k)] = std::sin(w * u);
        out[static_cast<std::size_t>(F + k)] = std::cos(w * u);
    }
    return out;
}

/// A condition resolved against a network: standardized S x S channels plus raw embedding features.
struct PreparedCondition {
    std::vector<float> channels; // [C_cond, S, S]
    std::vector<double> features; // Fourier features of (alpha, lead)
    bool is_null = false;
};

inline int group_count(int channels, int preferred)
{
    int g = std::min(preferred, channels);
    while (g > 1 && channels % g != 0) --g;
    return std::max(g, 1);
}

template <class T>
class ScoreNetwork {
public:
    ScoreNetwork() = default;

    ScoreNetwork(NetConfig cfg, sde::VarianceSchedule sched, Standardizer stats, std::uint64_t seed)
        : cfg_(cfg), sched_(sched), stats_(std::move(stats))
    {
        validate();
        Rng rng(seed);
        declare_all(&rng);
    }

    const NetConfig& config() const noexcept { return cfg_; }
    const sde::VarianceSchedule& schedule() const noexcept { return sched_; }
    const Standardizer& standardizer() const noexcept { return stats_; }
    int canvas() const noexcept { return cfg_.canvas; }
    int condition_channel_count() const { return static_cast<int>(condition_channels(cfg_.config).size()); }

    std::vector<Tensor<T>>& parameters() noexcept { return params_; }
    const std::vector<Tensor<T>>& parameters() const noexcept { return params_; }
    const std::vector<std::string>& parameter_names() const noexcept { return names_; }
    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }
    Tensor<T>& param(const std::string& name) { return params_.at(index_of(name)); }
    const Tensor<T>& param(const std::string& name) const { return params_.at(index_of(name)); }

    template <class U>
    ScoreNetwork<U> cast() const
    {
        ScoreNetwork<U> out;
        out.cfg_ = cfg_;
        out.sched_ = sched_;
        out.stats_ = stats_;
        out.names_ = names_;
        out.index_ = index_;
        for (const auto& p : params_) out.params_.push_back(p.template cast<U>());
        return out;
    }

    // ------------------------------------------------------------ conditioning

    PreparedCondition prepare(const Condition& cond) const
    {
        const int S = cfg_.canvas;
        const auto names = condition_channels(cfg_.config);
        PreparedCondition pc;
        pc.is_null = cond.is_null;
        pc.channels.assign(names.size() * static_cast<std::size_t>(S) * S, 0.0f);
        pc.features = condition_features(cond.alpha, cond.lead, cond.is_null);
        if (cond.is_null) return pc;
        check_channel_set(cond);
        for (std::size_t c = 0; c < names.size(); ++c) {
            const Field* src = names[c] == "lowres_ws" ? &*cond.lowres_ws : cond.prior(names[c]);
            const Field resized = (src->height() == S && src->width() == S) ? *src : grid::bilinear_resize(*src, S, S);
            const auto& st = stats_.channel(names[c]);
            auto vals = resized.values();
            for (std::size_t i = 0; i < vals.size(); ++i)
                pc.channels[c * static_cast<std::size_t>(S) * S + i] = static_cast<float>((vals[i] - st.mean) / st.std);
        }
        return pc;
    }

    std::vector<double> condition_features(double alpha, double lead, bool is_null) const
    {
        if (is_null) return std::vector<double>(static_cast<std::size_t>(4 * cfg_.fourier), 0.0);
        check_condition_range(alpha, lead);
        auto a = fourier_features((alpha - 1.0) / 3.0, cfg_.fourier);
        const auto l = fourier_features(lead / kLeadMax, cfg_.fourier);
        a.insert(a.end(), l.begin(), l.end());
        return a;
    }

    /// The projected (alpha, lead) embedding, or the learned null token.
    Tensor<T> embed_condition(double alpha, double lead, bool is_null) const
    {
        if (is_null) return param("cemb.null");
        const auto f = condition_features(alpha, lead, false);
        Graph<T> g;
        auto P = bind(g, false);
        Tensor<T> feat(Shape{1, static_cast<int>(f.size())});
        for (std::size_t i = 0; i < f.size(); ++i) feat.data[i] = static_cast<T>(f[i]);
        Var e = condition_projection(g, P, g.constant(std::move(feat)));
        Tensor<T> out = g.value(e);
        out.shape = Shape{cfg_.emb_dim};
        return out;
    }

    // ------------------------------------------------------------ forward

    struct Inputs {
        Tensor<T> x;     // [N, 1 + C_cond, S, S]
        Tensor<T> tfeat; // [N, 2F]
        Tensor<T> cfeat; // [N, 4F]
        Tensor<T> mask;  // [N, E], 1 for conditional rows, 0 for null rows
        Tensor<T> unmask;
        Tensor<T> skip;   // [N, 1, S, S] sigma x / (1 + sigma^2)
        Tensor<T> fscale; // [N, 1, S, S] -1 / sqrt(1 + sigma^2)
    };

    Inputs make_inputs(std::span<const Field> x_t, std::span<const double> t,
                       std::span<const PreparedCondition* const> conds) const
    {
        const int N = static_cast<int>(x_t.size());
        if (N == 0 || t.size() != x_t.size() || conds.size() != x_t.size())
            throw DimensionError("score network: batch components disagree in length");
        const int S = cfg_.canvas, C = 1 + condition_channel_count(), F = cfg_.fourier, E = cfg_.emb_dim;
        const std::size_t plane = static_cast<std::size_t>(S) * S;
        Inputs in{Tensor<T>(Shape{N, C, S, S}), Tensor<T>(Shape{N, 2 * F}), Tensor<T>(Shape{N, 4 * F}),
                  Tensor<T>(Shape{N, E}),       Tensor<T>(Shape{N, E}),     Tensor<T>(Shape{N, 1, S, S}),
                  Tensor<T>(Shape{N, 1, S, S})};
        for (int n = 0; n < N; ++n) {
            const Field& x = x_t[static_cast<std::size_t>(n)];
            if (x.height() != S || x.width() != S)
                throw DimensionError("score network expects a " + std::to_string(S) + "x" + std::to_string(S) +
                                     " canvas, got " + std::to_string(x.height()) + "x" + std::to_string(x.width()));
            const PreparedCondition& pc = *conds[static_cast<std::size_t>(n)];
            if (pc.channels.size() != static_cast<std::size_t>(C - 1) * plane)
                throw DimensionError("prepared condition does not match network channel layout");
            const double tn = t[static_cast<std::size_t>(n)];
            const double sigma = sched_.sigma(tn);
            const double c_in = 1.0 / std::sqrt(1.0 + sigma * sigma);
            T* dst = in.x.data.data() + static_cast<std::size_t>(n) * C * plane;
            auto xv = x.values();
            T* skip = in.skip.data.data() + static_cast<std::size_t>(n) * plane;
            T* fscale = in.fscale.data.data() + static_cast<std::size_t>(n) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] = static_cast<T>(c_in * xv[i]);
                skip[i] = static_cast<T>(sigma * c_in * c_in * xv[i]);
                fscale[i] = static_cast<T>(-c_in);
            }
            for (std::size_t i = 0; i < pc.channels.size(); ++i) dst[plane + i] = static_cast<T>(pc.channels[i]);
            const auto tf = fourier_features(tn, F);
            for (int i = 0; i < 2 * F; ++i) in.tfeat.data[static_cast<std::size_t>(n) * 2 * F + i] = static_cast<T>(tf[static_cast<std::size_t>(i)]);
            for (int i = 0; i < 4 * F; ++i)
                in.cfeat.data[static_cast<std::size_t>(n) * 4 * F + i] = static_cast<T>(pc.features[static_cast<std::size_t>(i)]);
            const T m = pc.is_null ? T(0) : T(1);
            for (int e = 0; e < E; ++e) {
                in.mask.data[static_cast<std::size_t>(n) * E + e] = m;
                in.unmask.data[static_cast<std::size_t>(n) * E + e] = T(1) - m;
            }
        }
        return in;
    }

    /// Leaves for every parameter, borrowed in place.
    std::vector<Var> bind(Graph<T>& g, bool requires_grad) const
    {
        std::vector<Var> p;
        p.reserve(params_.size());
        for (const auto& t : params_) p.push_back(g.borrow(t, requires_grad));
        return p;
    }

    /// Records the noise prediction eps_hat [N, 1, S, S]. A 1x1 head mixes the input skip
    /// sigma x / (1 + sigma^2) with the UNet output F scaled by -1/sqrt(1 + sigma^2); at the initial
    /// head weights (1, 1) this is eps_hat = (x - D) / sigma with D = x / (1 + sigma^2) + sigma F / sqrt(1 + sigma^2).
    Var build(Graph<T>& g, std::span<const Var> P, const Inputs& in) const
    {
        const int N = in.x.dim(0);
        const auto [c0, c1, c2] = cfg_.widths;
        Var tf = g.constant(in.tfeat);
        Var temb = ad::dense(g, ad::silu(g, ad::dense(g, tf, p(P, "temb.l1.w"), p(P, "temb.l1.b"))), p(P, "temb.l2.w"),
                             p(P, "temb.l2.b"));
        Var cproj = condition_projection(g, P, g.constant(in.cfeat));
        Var cnull = ad::broadcast_rows(g, p(P, "cemb.null"), N);
        Var cemb = ad::add(g, ad::mul(g, cproj, g.constant(in.mask)), ad::mul(g, cnull, g.constant(in.unmask)));
        Var emb = ad::silu(g, ad::add(g, temb, cemb));

        Var h = ad::conv2d(g, g.constant(in.x), p(P, "in.w"), p(P, "in.b"));
        Var skip0 = resblock(g, P, "d0", h, emb, c0, c0);
        Var h1 = resblock(g, P, "d1", ad::avg_pool2(g, skip0), emb, c0, c1);
        Var m = resblock(g, P, "mid1", ad::avg_pool2(g, h1), emb, c1, c2);
        m = attention_block(g, P, m, c2);
        m = resblock(g, P, "mid2", m, emb, c2, c2);
        Var u1 = resblock(g, P, "u1", ad::concat_channels(g, ad::upsample2(g, m), h1), emb, c2 + c1, c1);
        Var u0 = resblock(g, P, "u0", ad::concat_channels(g, ad::upsample2(g, u1), skip0), emb, c1 + c0, c0);
        Var out = ad::silu(g, norm(g, P, "out.n", u0, c0));
        Var f = ad::mul(g, ad::conv2d(g, out, p(P, "out.w"), p(P, "out.b")), g.constant(in.fscale));
        return ad::conv2d(g, ad::concat_channels(g, g.constant(in.skip), f), p(P, "head.w"), p(P, "head.b"));
    }

    /// eps_hat for a batch; each item may carry its own time and condition.
    std::vector<Field> noise_prediction(std::span<const Field> x_t, std::span<const double> t,
                                        std::span<const PreparedCondition* const> conds) const
    {
        const Inputs in = make_inputs(x_t, t, conds);
        Graph<T> g;
        const auto P = bind(g, false);
        const Tensor<T>& eps = g.value(build(g, P, in));
        return to_fields(eps);
    }

    /// Scores -eps_hat / sigma(t) for members sharing one time and condition.
    std::vector<Field> score_batch(std::span<const Field> x_t, double t, const PreparedCondition& cond) const
    {
        std::vector<double> ts(x_t.size(), t);
        std::vector<const PreparedCondition*> cs(x_t.size(), &cond);
        auto out = noise_prediction(x_t, ts, cs);
        const double inv_sigma = 1.0 / sched_.sigma(t);
        for (auto& f : out)
            for (auto& v : f.values()) v = static_cast<float>(-v * inv_sigma);
        return out;
    }

    Field score_forward(const Field& x_t, double t, const Condition& cond) const
    {
        const PreparedCondition pc = prepare(cond);
        return score_batch(std::span<const Field>(&x_t, 1), t, pc).front();
    }

    Field noise_forward(const Field& x_t, double t, const Condition& cond) const
    {
        const PreparedCondition pc = prepare(cond);
        const PreparedCondition* cp = &pc;
        return noise_prediction(std::span<const Field>(&x_t, 1), std::span<const double>(&t, 1),
                                std::span<const PreparedCondition* const>(&cp, 1))
            .front();
    }

    // ------------------------------------------------------------ persistence

    ckpt::Checkpoint to_checkpoint() const
    {
        ckpt::Checkpoint ck;
        for (std::size_t i = 0; i < params_.size(); ++i) ck.tensors.push_back({names_[i], params_[i].template cast<float>()});
        auto& m = ck.metadata;
        m["config"] = to_string(cfg_.config);
        m["canvas"] = std::to_string(cfg_.canvas);
        m["widths"] = std::to_string(cfg_.widths[0]) + "," + std::to_string(cfg_.widths[1]) + "," + std::to_string(cfg_.widths[2]);
        m["emb_dim"] = std::to_string(cfg_.emb_dim);
        m["fourier"] = std::to_string(cfg_.fourier);
        m["groups"] = std::to_string(cfg_.groups);
        m["sigma_min"] = fmt_double(sched_.sigma_min());
        m["sigma_max"] = fmt_double(sched_.sigma_max());
        m["t_min"] = fmt_double(sched_.t_min());
        m["norm.target"] = fmt_double(stats_.target.mean) + "," + fmt_double(stats_.target.std);
        for (const auto& c : stats_.channels) m["norm." + c.name] = fmt_double(c.mean) + "," + fmt_double(c.std);
        return ck;
    }

    static ScoreNetwork from_checkpoint(const ckpt::Checkpoint& ck)
    {
        ScoreNetwork net;
        try {
            net.cfg_.config = parse_config_id(ck.meta("config"));
            net.cfg_.canvas = std::stoi(ck.meta("canvas"));
            const auto w = split_doubles(ck.meta("widths"));
            if (w.size() != 3) throw FormatError("checkpoint widths must have three entries");
            net.cfg_.widths = {static_cast<int>(w[0]), static_cast<int>(w[1]), static_cast<int>(w[2])};
            net.cfg_.emb_dim = std::stoi(ck.meta("emb_dim"));
            net.cfg_.fourier = std::stoi(ck.meta("fourier"));
            net.cfg_.groups = std::stoi(ck.meta("groups"));
            net.sched_ = sde::VarianceSchedule(std::stod(ck.meta("sigma_min")), std::stod(ck.meta("sigma_max")),
                                               std::stod(ck.meta("t_min")));
            const auto tgt = split_doubles(ck.meta("norm.target"));
            net.stats_.target = {"target", tgt.at(0), tgt.at(1)};
            for (const auto& name : condition_channels(net.cfg_.config)) {
                const auto v = split_doubles(ck.meta("norm." + name));
                net.stats_.channels.push_back({name, v.at(0), v.at(1)});
            }
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
        }
        net.validate();
        net.declare_all(nullptr);
        for (std::size_t i = 0; i < net.names_.size(); ++i) {
            const auto& t = ck.at(net.names_[i]);
            if (t.shape != net.params_[i].shape)
                throw FormatError("checkpoint tensor '" + net.names_[i] + "' has shape " + ad::shape_str(t.shape) +
                                  ", network expects " + ad::shape_str(net.params_[i].shape));
            net.params_[i] = t.template cast<T>();
        }
        return net;
    }

    static std::string fmt_double(double v)
    {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

private:
    template <class U>
    friend class ScoreNetwork;

    static std::vector<double> split_doubles(const std::string& s)
    {
        std::vector<double> out;
        std::size_t start = 0;
        while (start <= s.size()) {
            const auto comma = s.find(',', start);
            out.push_back(std::stod(s.substr(start, comma - start)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

    void validate() const
    {
        if (cfg_.canvas <= 0 || cfg_.canvas % 4 != 0)
            throw ConfigError("score network canvas " + std::to_string(cfg_.canvas) + " must be a positive multiple of 4");
        for (int w : cfg_.widths)
            if (w <= 0) throw ConfigError("score network widths must be positive");
        if (cfg_.emb_dim <= 0 || cfg_.fourier <= 0 || cfg_.groups <= 0)
            throw ConfigError("score network embedding sizes must be positive");
        if (stats_.channels.size() != condition_channels(cfg_.config).size())
            throw ConfigError("normalization statistics do not match configuration " + to_string(cfg_.config));
    }

    void check_channel_set(const Condition& cond) const
    {
        const auto names = condition_channels(cfg_.config);
        const bool want_lr = uses_lowres_ws(cfg_.config);
        if (want_lr != cond.lowres_ws.has_value())
            throw DimensionError(std::string("condition ") + (want_lr ? "lacks" : "carries") +
                                 " the low-resolution forecast channel for configuration " + to_string(cfg_.config));
        for (const auto& [name, f] : cond.priors) {
            if (std::find(names.begin(), names.end(), name) == names.end() || name == "lowres_ws")
                throw DimensionError("condition channel '" + name + "' is not part of configuration " + to_string(cfg_.config));
        }
        for (const auto& name : names) {
            if (name == "lowres_ws") continue;
            if (!cond.prior(name))
                throw DimensionError("condition lacks channel '" + name + "' required by configuration " + to_string(cfg_.config));
        }
    }

    std::size_t index_of(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("score network has no parameter '" + name + "'");
        return it->second;
    }

    Var p(std::span<const Var> P, const std::string& name) const { return P[index_of(name)]; }

    void declare(const std::string& name, Shape shape, double stddev, double fill, Rng* rng)
    {
        Tensor<T> t(shape, static_cast<T>(fill));
        if (rng && stddev > 0.0)
            for (auto& v : t.data) v = static_cast<T>(stddev * rng->normal());
        index_[name] = names_.size();
        names_.push_back(name);
        params_.push_back(std::move(t));
    }
    void declare_dense(const std::string& name, int in, int out, Rng* rng, double gain = 1.0)
    {
        declare(name + ".w", {out, in}, gain / std::sqrt(static_cast<double>(in)), 0.0, rng);
        declare(name + ".b", {out}, 0.0, 0.0, rng);
    }
    void declare_conv(const std::string& name, int in, int out, int k, Rng* rng, double gain = 1.0)
    {
        declare(name + ".w", {out, in, k, k}, gain / std::sqrt(static_cast<double>(in * k * k)), 0.0, rng);
        declare(name + ".b", {out}, 0.0, 0.0, rng);
    }
    void declare_norm(const std::string& name, int c, Rng* rng)
    {
        declare(name + ".g", {c}, 0.0, 1.0, rng);
        declare(name + ".b", {c}, 0.0, 0.0, rng);
    }
    void declare_resblock(const std::string& name, int cin, int cout, Rng* rng)
    {
        declare_norm(name + ".n1", cin, rng);
        declare_conv(name + ".c1", cin, cout, 3, rng);
        declare_dense(name + ".e", cfg_.emb_dim, cout, rng);
        declare_norm(name + ".n2", cout, rng);
        declare_conv(name + ".c2", cout, cout, 3, rng, 0.5);
        if (cin != cout) declare_conv(name + ".s", cin, cout, 1, rng);
    }

    void declare_all(Rng* rng)
    {
        names_.clear();
        params_.clear();
        index_.clear();
        const int F = cfg_.fourier, E = cfg_.emb_dim;
        const auto [c0, c1, c2] = cfg_.widths;
        declare_dense("temb.l1", 2 * F, E, rng);
        declare_dense("temb.l2", E, E, rng);
        declare_dense("cemb.l1", 4 * F, E, rng);
        declare_dense("cemb.l2", E, E, rng);
        declare("cemb.null", {E}, 1.0, 0.0, rng);
        declare_conv("in", 1 + condition_channel_count(), c0, 3, rng);
        declare_resblock("d0", c0, c0, rng);
        declare_resblock("d1", c0, c1, rng);
        declare_resblock("mid1", c1, c2, rng);
        declare_norm("attn.n", c2, rng);
        declare_conv("attn.q", c2, c2, 1, rng);
        declare_conv("attn.k", c2, c2, 1, rng);
        declare_conv("attn.v", c2, c2, 1, rng);
        declare_conv("attn.o", c2, c2, 1, rng, 0.5);
        declare_resblock("mid2", c2, c2, rng);
        declare_resblock("u1", c2 + c1, c1, rng);
        declare_resblock("u0", c1 + c0, c0, rng);
        declare_norm("out.n", c0, rng);
        declare_conv("out", c0, 1, 3, rng, 0.1);
        declare("head.w", {1, 2, 1, 1}, 0.0, 1.0, rng);
        declare("head.b", {1}, 0.0, 0.0, rng);
    }

    Var norm(Graph<T>& g, std::span<const Var> P, const std::string& name, Var x, int channels) const
    {
        return ad::group_norm(g, x, p(P, name + ".g"), p(P, name + ".b"), group_count(channels, cfg_.groups));
    }

    Var condition_projection(Graph<T>& g, std::span<const Var> P, Var feat) const
    {
        return ad::dense(g, ad::silu(g, ad::dense(g, feat, p(P, "cemb.l1.w"), p(P, "cemb.l1.b"))), p(P, "cemb.l2.w"),
                         p(P, "cemb.l2.b"));
    }

    Var resblock(Graph<T>& g, std::span<const Var> P, const std::string& name, Var x, Var emb, int cin, int cout) const
    {
        Var h = ad::conv2d(g, ad::silu(g, norm(g, P, name + ".n1", x, cin)), p(P, name + ".c1.w"), p(P, name + ".c1.b"));
        h = ad::add_channel_bias(g, h, ad::dense(g, emb, p(P, name + ".e.w"), p(P, name + ".e.b")));
        h = ad::conv2d(g, ad::silu(g, norm(g, P, name + ".n2", h, cout)), p(P, name + ".c2.w"), p(P, name + ".c2.b"));
        Var skip = cin == cout ? x : ad::conv2d(g, x, p(P, name + ".s.w"), p(P, name + ".s.b"));
        return ad::add(g, h, skip);
    }

    Var attention_block(Graph<T>& g, std::span<const Var> P, Var x, int c) const
    {
        Var h = norm(g, P, "attn.n", x, c);
        Var q = ad::conv2d(g, h, p(P, "attn.q.w"), p(P, "attn.q.b"));
        Var k = ad::conv2d(g, h, p(P, "attn.k.w"), p(P, "attn.k.b"));
        Var v = ad::conv2d(g, h, p(P, "attn.v.w"), p(P, "attn.v.b"));
        Var a = ad::attention(g, q, k, v);
        return ad::add(g, x, ad::conv2d(g, a, p(P, "attn.o.w"), p(P, "attn.o.b")));
    }

    std::vector<Field> to_fields(const Tensor<T>& t) const
    {
        const int N = t.dim(0), H = t.dim(2), W = t.dim(3);
        std::vector<Field> out;
        out.reserve(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n) {
            Field f(H, W);
            auto v = f.values();
            for (std::size_t i = 0; i < v.size(); ++i)
                v[i] = static_cast<float>(t.data[static_cast<std::size_t>(n) * H * W + i]);
            out.push_back(std::move(f));
        }
        return out;
    }

    NetConfig cfg_;
    sde::VarianceSchedule sched_;
    Standardizer stats_;
    std::vector<std::string> names_;
    std::vector<Tensor<T>> params_;
    std::map<std::string, std::size_t> index_;
};

/// (1 + w) s(x | cond) - w s(x | null). w = 0 skips the unconditional pass.
template <class T>
std::vector<Field> guided_score_batch(const ScoreNetwork<T>& net, std::span<const Field> x_t, double t,
                                      const PreparedCondition& cond, const PreparedCondition& null_cond, double w)
{
    auto s = net.score_batch(x_t, t, cond);
    if (w == 0.0) return s;
    const auto su = net.score_batch(x_t, t, null_cond);
    for (std::size_t n = 0; n < s.size(); ++n) {
        auto a = s[n].values();
        auto b = su[n].values();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>((1.0 + w) * a[i] - w * b[i]);
    }
    return s;
}

template <class T>
Field guided_score(const ScoreNetwork<T>& net, const Field& x_t, double t, const Condition& cond, double w)
{
    const auto pc = net.prepare(cond);
    const auto pn = net.prepare(Condition::null_token());
    return guided_score_batch(net, std::span<const Field>(&x_t, 1), t, pc, pn, w).front();
}

// ---------------------------------------------------------------- training objective

/// One training example: the pixelated truth at the item's factor and its condition.
struct TrainItem {
    Field target;
    Condition cond;
};

/// Noised inputs for a batch: x_t = normalized target + sigma(t) eps.
template <class T>
struct NoisedBatch {
    std::vector<Field> x0;
    std::vector<Field> x_t;
    std::vector<double> t;
    std::vector<PreparedCondition> conds;
    Tensor<T> eps; // [N, 1, S, S]
    std::size_t null_count = 0;
};

/// Per item: t ~ U[t_min, 1], null with probability p_uncond, eps ~ N(0, I), in that draw order.
template <class T>
NoisedBatch<T> draw_noised_batch(const ScoreNetwork<T>& net, std::span<const TrainItem> batch, Rng& rng, double p_uncond)
{
    if (batch.empty()) throw UsageError("dsm loss: empty batch");
    if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw DomainError("p_uncond must lie in [0, 1)");
    const auto& sched = net.schedule();
    const int S = net.canvas();
    NoisedBatch<T> nb;
    nb.eps = Tensor<T>(Shape{static_cast<int>(batch.size()), 1, S, S});
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const auto& item = batch[n];
        if (item.target.height() != S || item.target.width() != S)
            throw DimensionError("training target must be " + std::to_string(S) + "x" + std::to_string(S));
        const double t = rng.uniform(sched.t_min(), 1.0);
        const bool drop = p_uncond > 0.0 && rng.uniform() < p_uncond;
        Field x0 = net.standardizer().normalize_target(item.target);
        Field xt = x0;
        const double sigma = sched.sigma(t);
        auto xv = xt.values();
        for (std::size_t i = 0; i < plane; ++i) {
            const double e = rng.normal();
            nb.eps.data[n * plane + i] = static_cast<T>(e);
            xv[i] = static_cast<float>(xv[i] + sigma * e);
        }
        nb.conds.push_back(drop ? net.prepare(Condition::null_token()) : net.prepare(item.cond));
        nb.null_count += drop ? 1 : 0;
        nb.x0.push_back(std::move(x0));
        nb.x_t.push_back(std::move(xt));
        nb.t.push_back(t);
    }
    return nb;
}

template <class T>
struct DsmResult {
    double loss = 0.0;
    std::vector<Tensor<T>> grads;
    std::size_t null_count = 0;
};

/// Loss and gradients of a network on an already-noised batch.
template <class T>
DsmResult<T> dsm_loss_on(const ScoreNetwork<T>& net, const NoisedBatch<T>& nb, bool with_grads = true)
{
    std::vector<const PreparedCondition*> cp;
    for (const auto& c : nb.conds) cp.push_back(&c);
    const auto in = net.make_inputs(nb.x_t, nb.t, cp);
    Graph<T> g;
    const auto P = net.bind(g, with_grads);
    Var eps_hat = net.build(g, P, in);
    Var loss = ad::mse(g, eps_hat, g.constant(nb.eps));
    DsmResult<T> r;
    r.loss = static_cast<double>(g.value(loss).data[0]);
    r.null_count = nb.null_count;
    if (with_grads) {
        g.backprop(loss);
        for (Var v : P) r.grads.push_back(g.has_grad(v) ? g.grad(v) : Tensor<T>(g.shape(v)));
    }
    return r;
}

/// Denoising score matching with uniform weight on the eps error.
template <class T>
DsmResult<T> dsm_loss(const ScoreNetwork<T>& net, std::span<const TrainItem> batch, Rng& rng, double p_uncond,
                      bool with_grads = true)
{
    return dsm_loss_on(net, draw_noised_batch(net, batch, rng, p_uncond), with_grads);
}

} // namespace diffscale::score
