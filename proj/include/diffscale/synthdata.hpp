#pragma once

// Synthetic stand-in for the forecast/reanalysis pair.
//
// Truth: a latent Gaussian random field with power spectrum ~ k^-beta, AR(1) in
// time with coefficient rho per day, mapped to wind speed by
//   ws = softplus(m0 + s0 F + 1.0 * land_sea - 0.5 * orography / max(orography)).
// land_sea is 1 over sea.
//
// Forecast for member m at lead l: blur(truth) + gamma(l) common noise + s_e member
// noise + b0 * 2 (land_sea - mean(land_sea)), clipped at 0, block-averaged to L x L.

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/gridio.hpp"
#include "diffscale/parallel.hpp"
#include "diffscale/rng.hpp"
#include "diffscale/scorenet.hpp"

namespace diffscale::synth {

struct WorldConfig {
    int canvas = 48;          // S
    int base = 12;            // L
    double spectral_slope = 3.0;
    double rho = 0.9;
    double error_scale = 0.5; // a, m/s
    double error_tau = 10.0;  // tau_e, days
    double bias_amplitude = 0.3;
    double spread = 0.3;      // s_e
    double mean_level = 6.0;  // m0
    double variability = 2.5; // s0
    int n_train = 600;
    int n_val = 100;
    int n_test = 104;
    int members = 10;
    int leads_per_init = 6;
    int init_spacing = 4; // days between consecutive init times
    std::uint64_t seed = 0;

    void validate() const
    {
        grid::enumerate_factors(base, canvas);
        if (!(spectral_slope > 0.0)) throw ConfigError("world.beta must be positive");
        if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("world.rho must lie in (0, 1)");
        if (!(error_scale >= 0.0) || !(error_tau > 0.0)) throw ConfigError("world.a must be >= 0 and world.tau_e > 0");
        if (!(bias_amplitude >= 0.0) || !(spread >= 0.0)) throw ConfigError("world.b0 and world.s_e must be >= 0");
        if (n_train < 1 || n_val < 0 || n_test < 1) throw ConfigError("split sizes must be positive");
        if (members < 1) throw ConfigError("world.members must be >= 1");
        if (leads_per_init < 1) throw ConfigError("world.leads_per_init must be >= 1");
        if (init_spacing < 1) throw ConfigError("world.init_spacing must be >= 1");
    }
    int total_inits() const { return n_train + n_val + n_test; }
    /// Days of latent history needed to cover every init plus the longest lead.
    int total_days() const { return (total_inits() - 1) * init_spacing + 47 + 1; }
};

inline constexpr double kMaxLead = 46.0;

// ---------------------------------------------------------------- spectral synthesis

/// Radial filter with |H(k)|^2 ~ k^-beta (k = 0 removed), scaled so white unit noise maps to unit variance.
class SpectralFilter {
public:
    SpectralFilter(int size, double beta) : n_(size), gain_(static_cast<std::size_t>(size) * (size / 2 + 1))
    {
        double total = 0.0;
        for (int ky = 0; ky < n_; ++ky)
            for (int kx = 0; kx < n_; ++kx) {
                const double k = wavenumber(kx, ky);
                if (k > 0.0) total += std::pow(k, -beta);
            }
        const double norm = std::sqrt(static_cast<double>(n_) * n_ / total);
        for (int ky = 0; ky < n_; ++ky)
            for (int kx = 0; kx <= n_ / 2; ++kx) {
                const double k = wavenumber(kx, ky);
                gain_[static_cast<std::size_t>(ky) * (n_ / 2 + 1) + kx] = k > 0.0 ? norm * std::pow(k, -beta / 2.0) : 0.0;
            }
        std::lock_guard<std::mutex> lock(plan_mutex());
        std::vector<double> real(static_cast<std::size_t>(n_) * n_);
        std::vector<fftw_complex> spec(gain_.size());
        forward_ = fftw_plan_dft_r2c_2d(n_, n_, real.data(), spec.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
        inverse_ = fftw_plan_dft_c2r_2d(n_, n_, spec.data(), real.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    SpectralFilter(const SpectralFilter&) = delete;
    SpectralFilter& operator=(const SpectralFilter&) = delete;
    ~SpectralFilter()
    {
        std::lock_guard<std::mutex> lock(plan_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
    }

    int size() const noexcept { return n_; }

    /// Integer wavenumber magnitude with frequencies folded into [-n/2, n/2).
    double wavenumber(int kx, int ky) const
    {
        const int fx = kx <= n_ / 2 ? kx : kx - n_;
        const int fy = ky <= n_ / 2 ? ky : ky - n_;
        return std::sqrt(static_cast<double>(fx) * fx + static_cast<double>(fy) * fy);
    }

    /// Filters a white field (row-major, n x n) in place.
    void apply(std::vector<double>& field) const
    {
        if (field.size() != static_cast<std::size_t>(n_) * n_) throw DimensionError("spectral filter: wrong field size");
        std::vector<fftw_complex> spec(gain_.size());
        fftw_execute_dft_r2c(forward_, field.data(), spec.data());
        const double inv = 1.0 / (static_cast<double>(n_) * n_);
        for (std::size_t i = 0; i < spec.size(); ++i) {
            spec[i][0] *= gain_[i] * inv;
            spec[i][1] *= gain_[i] * inv;
        }
        fftw_execute_dft_c2r(inverse_, spec.data(), field.data());
    }

    /// A fresh unit-variance field from the stream.
    Field sample(Rng& rng) const
    {
        std::vector<double> w(static_cast<std::size_t>(n_) * n_);
        for (auto& v : w) v = rng.normal();
        apply(w);
        return to_field(w);
    }

    Field to_field(const std::vector<double>& w) const
    {
        Field f(n_, n_);
        auto fv = f.values();
        for (std::size_t i = 0; i < w.size(); ++i) fv[i] = static_cast<float>(w[i]);
        return f;
    }

private:
    static std::mutex& plan_mutex()
    {
        static std::mutex m;
        return m;
    }

    int n_;
    std::vector<double> gain_;
    fftw_plan forward_ = nullptr;
    fftw_plan inverse_ = nullptr;
};

/// Separable Gaussian blur with reflecting borders; sigma in pixels, sigma <= 0 copies.
inline Field gaussian_blur(const Field& f, double sigma)
{
    if (!(sigma > 0.0)) return f;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double ks = 0.0;
    for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= ks;
    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return i;
    };
    const int H = f.height(), W = f.width();
    Field tmp(H, W), out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * f(y, reflect(x + i, W));
            tmp(y, x) = static_cast<float>(s);
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp(reflect(y + i, H), x);
            out(y, x) = static_cast<float>(s);
        }
    return out;
}

// ---------------------------------------------------------------- static priors

struct StaticFields {
    Field orography; // metres, >= 0
    Field land_sea;  // 1 = sea, 0 = land
};

inline StaticFields gen_static_fields(const WorldConfig& cfg)
{
    cfg.validate();
    const int S = cfg.canvas;
    SpectralFilter smooth(S, 4.0);
    Rng rng(derive_seed(cfg.seed, 1));
    const Field mask_src = smooth.sample(rng);
    const Field relief = smooth.sample(rng);

    std::vector<float> sorted(mask_src.values().begin(), mask_src.values().end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const float median = sorted[sorted.size() / 2];
    Field sea(S, S);
    for (std::size_t i = 0; i < sea.size(); ++i) sea.values()[i] = mask_src.values()[i] < median ? 1.0f : 0.0f;
    StaticFields st;
    st.land_sea = gaussian_blur(sea, 1.0);
    st.orography = Field(S, S);
    for (std::size_t i = 0; i < sea.size(); ++i) {
        const double land = 1.0 - st.land_sea.values()[i];
        st.orography.values()[i] = static_cast<float>(std::max(0.0, 800.0 * (relief.values()[i] + 0.5) * land));
    }
    return st;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

/// Wind speed from a latent field and the static priors.
inline Field latent_to_wind(const Field& latent, const StaticFields& st, const WorldConfig& cfg)
{
    require_same_shape(latent, st.land_sea, "latent_to_wind");
    const float omax = *std::max_element(st.orography.values().begin(), st.orography.values().end());
    const double oscale = omax > 0.0f ? 1.0 / omax : 0.0;
    Field out(latent.height(), latent.width());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double z = cfg.mean_level + cfg.variability * latent.values()[i] + 1.0 * st.land_sea.values()[i] -
                         0.5 * st.orography.values()[i] * oscale;
        out.values()[i] = static_cast<float>(softplus(z));
    }
    return out;
}

/// Daily unit-variance latent fields, AR(1) in time.
inline std::vector<Field> gen_latent_series(const WorldConfig& cfg, int n_days)
{
    if (n_days < 1) throw DomainError("latent series needs at least one day");
    const int S = cfg.canvas;
    SpectralFilter filter(S, cfg.spectral_slope);
    Rng rng(derive_seed(cfg.seed, 2));
    const double innov = std::sqrt(1.0 - cfg.rho * cfg.rho);
    std::vector<double> white(static_cast<std::size_t>(S) * S);
    for (auto& v : white) v = rng.normal();
    std::vector<Field> out;
    out.reserve(static_cast<std::size_t>(n_days));
    for (int d = 0; d < n_days; ++d) {
        if (d > 0)
            for (auto& v : white) v = cfg.rho * v + innov * rng.normal();
        std::vector<double> f = white;
        filter.apply(f);
        out.push_back(filter.to_field(f));
    }
    return out;
}

inline std::vector<Field> gen_truth_series(const WorldConfig& cfg, const StaticFields& st, int n_days)
{
    auto latent = gen_latent_series(cfg, n_days);
    for (auto& f : latent) f = latent_to_wind(f, st, cfg);
    return latent;
}

// ---------------------------------------------------------------- forecasts

/// Error amplitude gamma(l) = a (1 - exp(-l / tau_e)).
inline double error_growth(const WorldConfig& cfg, double lead) { return cfg.error_scale * (1.0 - std::exp(-lead / cfg.error_tau)); }

/// Blur width in fine pixels.
inline double blur_width(double lead) { return 0.5 + 0.1 * lead; }

inline void check_lead(double lead)
{
    if (!(lead >= 1.0 && lead <= kMaxLead))
        throw DomainError("lead time " + std::to_string(lead) + " outside [1, 46] days");
}

/// The additive pieces of a member forecast on the fine grid, before clipping.
struct ForecastParts {
    Field blurred;
    Field common;   // gamma(lead) * shared noise
    Field member;   // s_e * member noise
    Field bias;     // systematic static pattern
};

inline Field bias_pattern(const WorldConfig& cfg, const StaticFields& st)
{
    const double m = st.land_sea.mean();
    Field b(st.land_sea.height(), st.land_sea.width());
    for (std::size_t i = 0; i < b.size(); ++i)
        b.values()[i] = static_cast<float>(cfg.bias_amplitude * (st.land_sea.values()[i] - m) * 2.0);
    return b;
}

/// case_seed identifies (init, lead); the shared noise and each member's noise derive from it.
inline ForecastParts forecast_parts(const Field& truth, double lead, int member, const WorldConfig& cfg,
                                    const StaticFields& st, std::uint64_t case_seed)
{
    check_lead(lead);
    if (member < 0) throw DomainError("member index must be >= 0");
    const int S = cfg.canvas;
    if (truth.height() != S || truth.width() != S) throw DimensionError("forecast_parts: truth must be S x S");
    SpectralFilter smooth(S, 4.0);
    ForecastParts p;
    p.blurred = gaussian_blur(truth, blur_width(lead));
    Rng common_rng(derive_seed(case_seed, 0));
    p.common = smooth.sample(common_rng);
    for (auto& v : p.common.values()) v = static_cast<float>(error_growth(cfg, lead) * v);
    Rng member_rng(derive_seed(case_seed, 1 + static_cast<std::uint64_t>(member)));
    p.member = smooth.sample(member_rng);
    for (auto& v : p.member.values()) v = static_cast<float>(cfg.spread * v);
    p.bias = bias_pattern(cfg, st);
    return p;
}

inline Field degrade_forecast(const Field& truth, double lead, int member, const WorldConfig& cfg, const StaticFields& st,
                              std::uint64_t case_seed)
{
    const auto p = forecast_parts(truth, lead, member, cfg, st, case_seed);
    Field fine(cfg.canvas, cfg.canvas);
    for (std::size_t i = 0; i < fine.size(); ++i) {
        const double v = static_cast<double>(p.blurred.values()[i]) + p.common.values()[i] + p.member.values()[i] +
                         p.bias.values()[i];
        fine.values()[i] = static_cast<float>(std::max(0.0, v));
    }
    return grid::block_coarsen(fine, cfg.base, cfg.base);
}

struct DynamicVariable {
    const char* name;
    double mean;
    double scale;
    double sign; // sign of the coupling to the wind latent
};

inline const std::vector<DynamicVariable>& dynamic_table()
{
    static const std::vector<DynamicVariable> t{
        {"t2m", 283.0, 6.0, -0.5},    {"mslp", 101300.0, 1200.0, -1.0}, {"u300", 15.0, 10.0, 0.6},
        {"u925", 3.0, 5.0, 1.0},      {"v300", 0.0, 8.0, 0.3},          {"v925", 0.0, 4.0, 0.7},
        {"z500", 55000.0, 1500.0, -0.4},
    };
    return t;
}

/// Low-resolution auxiliary variables: each mixes a smoothed valid-time latent with its own GRF.
inline std::vector<Field> dynamic_channels(const Field& valid_latent, double lead, const WorldConfig& cfg,
                                           std::uint64_t case_seed)
{
    check_lead(lead);
    const int S = cfg.canvas;
    SpectralFilter smooth(S, 4.0);
    Field base = gaussian_blur(valid_latent, 2.0);
    double var = 0.0;
    const double m = base.mean();
    for (float v : base.values()) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(base.size()));
    const double c = 0.8 * std::exp(-lead / 20.0);
    std::vector<Field> out;
    const auto& table = dynamic_table();
    for (std::size_t k = 0; k < table.size(); ++k) {
        Rng rng(derive_seed(case_seed, 100 + k));
        Field own = smooth.sample(rng);
        Field f(S, S);
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double z = c * table[k].sign * (base.values()[i] - m) / (sd > 0 ? sd : 1.0) +
                             std::sqrt(1.0 - c * c) * own.values()[i];
            f.values()[i] = static_cast<float>(table[k].mean + table[k].scale * z);
        }
        out.push_back(grid::block_coarsen(f, cfg.base, cfg.base));
    }
    return out;
}

// ---------------------------------------------------------------- dataset

enum class Split { Train, Val, Test };

inline std::string to_string(Split s)
{
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s)
{
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

/// Evaluation lead bins, inclusive day ranges.
inline const std::vector<std::pair<int, int>>& lead_bins()
{
    static const std::vector<std::pair<int, int>> bins{{1, 3}, {4, 6}, {7, 9}, {10, 12}, {13, 15}, {16, 46}};
    return bins;
}

/// One (init, lead) forecast case.
struct CasePlan {
    Split split = Split::Train;
    int init = 0;   // global init index
    double lead = 1.0;
    int slot = 0;   // lead index within the init
};

inline Split split_of(const WorldConfig& cfg, int init)
{
    if (init < cfg.n_train) return Split::Train;
    if (init < cfg.n_train + cfg.n_val) return Split::Val;
    return Split::Test;
}

/// Init times are split into contiguous, disjoint ranges. Training leads are continuous in [1, 46];
/// validation and test use one integer lead per bin.
inline std::vector<CasePlan> plan_dataset(const WorldConfig& cfg)
{
    cfg.validate();
    std::vector<CasePlan> plan;
    for (int init = 0; init < cfg.total_inits(); ++init) {
        const Split sp = split_of(cfg, init);
        Rng rng(derive_seed(cfg.seed, 4, static_cast<std::uint64_t>(init)));
        if (sp == Split::Train) {
            for (int j = 0; j < cfg.leads_per_init; ++j) plan.push_back({sp, init, rng.uniform(1.0, kMaxLead), j});
        } else {
            int j = 0;
            for (const auto& [lo, hi] : lead_bins()) {
                const int lead = lo + static_cast<int>(rng.uniform() * (hi - lo + 1));
                plan.push_back({sp, init, static_cast<double>(std::min(lead, hi)), j++});
            }
        }
    }
    return plan;
}

inline std::uint64_t case_seed(const WorldConfig& cfg, int init, double lead)
{
    return derive_seed(cfg.seed, 3, derive_seed(static_cast<std::uint64_t>(init), std::bit_cast<std::uint64_t>(lead)));
}

/// Generator holding the latent history; every method is a pure function of the config.
class World {
public:
    explicit World(WorldConfig cfg)
        : cfg_(cfg), statics_(gen_static_fields(cfg)), latent_(gen_latent_series(cfg, cfg.total_days()))
    {
    }

    const WorldConfig& config() const noexcept { return cfg_; }
    const StaticFields& statics() const noexcept { return statics_; }
    int days() const noexcept { return static_cast<int>(latent_.size()); }
    double init_day(int init) const { return static_cast<double>(init) * cfg_.init_spacing; }

    /// Latent state at a real-valued day, linearly interpolated between daily fields.
    Field latent(double day) const
    {
        if (!(day >= 0.0 && day <= days() - 1)) throw DomainError("day " + std::to_string(day) + " outside generated history");
        const int d0 = std::min(static_cast<int>(std::floor(day)), days() - 1);
        const int d1 = std::min(d0 + 1, days() - 1);
        const double w = day - d0;
        if (w == 0.0) return latent_[static_cast<std::size_t>(d0)];
        Field out(cfg_.canvas, cfg_.canvas);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values()[i] = static_cast<float>((1.0 - w) * latent_[static_cast<std::size_t>(d0)].values()[i] +
                                                 w * latent_[static_cast<std::size_t>(d1)].values()[i]);
        return out;
    }

    Field truth(int init, double lead) const
    {
        check_lead(lead);
        return latent_to_wind(latent(init_day(init) + lead), statics_, cfg_);
    }

    std::vector<Field> forecast(int init, double lead) const
    {
        const Field t = truth(init, lead);
        const auto seed = case_seed(cfg_, init, lead);
        std::vector<Field> out;
        for (int m = 0; m < cfg_.members; ++m) out.push_back(degrade_forecast(t, lead, m, cfg_, statics_, seed));
        return out;
    }

    std::vector<Field> dynamics(int init, double lead) const
    {
        return dynamic_channels(latent(init_day(init) + lead), lead, cfg_, case_seed(cfg_, init, lead) ^ 0x5bd1e995ull);
    }

private:
    WorldConfig cfg_;
    StaticFields statics_;
    std::vector<Field> latent_;
};

// ---------------------------------------------------------------- manifest

/// One (init, lead, member) record. Paths are relative to the dataset directory.
struct ManifestLine {
    Split split = Split::Train;
    int init = 0;
    double lead = 1.0;
    int member = 0;
    std::string forecast_path;
    std::string truth_path;
    std::string dyn_path; // empty when dynamic channels were not generated
};

inline std::string format_lead(double lead)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", lead);
    return buf;
}

inline std::string format_line(const ManifestLine& l)
{
    std::string s = to_string(l.split) + "," + std::to_string(l.init) + "," + format_lead(l.lead) + "," +
                    std::to_string(l.member) + "," + l.forecast_path + "," + l.truth_path;
    if (!l.dyn_path.empty()) s += "," + l.dyn_path;
    return s;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestLine>& lines)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write manifest '" + path.string() + "'");
    for (const auto& l : lines) out << format_line(l) << '\n';
    if (!out) throw Error("failed writing manifest '" + path.string() + "'");
}

inline std::vector<ManifestLine> read_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw MissingInputError("dataset manifest '" + path.string() + "' not found");
    std::vector<ManifestLine> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) f.push_back(tok);
        if (f.size() != 6 && f.size() != 7)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 or 7 fields");
        ManifestLine l;
        try {
            l.split = parse_split(f[0]);
            l.init = std::stoi(f[1]);
            l.lead = std::stod(f[2]);
            l.member = std::stoi(f[3]);
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed numeric field");
        }
        l.forecast_path = f[4];
        l.truth_path = f[5];
        if (f.size() == 7) l.dyn_path = f[6];
        out.push_back(std::move(l));
    }
    return out;
}

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr const char* kStaticsName = "statics.dsg";

/// Writes every case's truth, member stack and (optionally) dynamic stack plus the manifest and statics.
inline std::vector<ManifestLine> build_dataset(const WorldConfig& cfg, const std::filesystem::path& dir, bool with_dynamics)
{
    const World world(cfg);
    const auto plan = plan_dataset(cfg);
    for (const char* sub : {"train", "val", "test"}) std::filesystem::create_directories(dir / sub);
    gridio::write_grid(dir / kStaticsName, std::vector<Field>{world.statics().orography, world.statics().land_sea});
    std::vector<std::vector<ManifestLine>> per_case(plan.size());
    parallel_for(plan.size(), [&](std::size_t c) {
        const auto& p = plan[c];
        char stem[64];
        std::snprintf(stem, sizeof stem, "%s/%04d_%d", to_string(p.split).c_str(), p.init, p.slot);
        const std::string truth_rel = std::string(stem) + ".truth.dsg";
        const std::string fc_rel = std::string(stem) + ".fc.dsg";
        const std::string dyn_rel = with_dynamics ? std::string(stem) + ".dyn.dsg" : std::string();
        gridio::write_grid(dir / truth_rel, world.truth(p.init, p.lead));
        gridio::write_grid(dir / fc_rel, world.forecast(p.init, p.lead));
        if (with_dynamics) gridio::write_grid(dir / dyn_rel, world.dynamics(p.init, p.lead));
        for (int m = 0; m < cfg.members; ++m) per_case[c].push_back({p.split, p.init, p.lead, m, fc_rel, truth_rel, dyn_rel});
    });
    std::vector<ManifestLine> lines;
    for (auto& v : per_case) lines.insert(lines.end(), v.begin(), v.end());
    write_manifest(dir / kManifestName, lines);
    return lines;
}

// ---------------------------------------------------------------- loading

/// A loaded (init, lead) case with all members.
struct Case {
    Split split = Split::Train;
    int init = 0;
    double lead = 1.0;
    Field truth;                // S x S
    std::vector<Field> members; // L x L each
    std::vector<Field> dynamics; // L x L each, empty if absent

    Field forecast_mean() const
    {
        Field out(members.front().height(), members.front().width());
        for (std::size_t i = 0; i < out.size(); ++i) {
            double s = 0.0;
            for (const auto& m : members) s += m.values()[i];
            out.values()[i] = static_cast<float>(s / static_cast<double>(members.size()));
        }
        return out;
    }
};

struct Dataset {
    StaticFields statics;
    std::vector<Case> cases;

    std::vector<const Case*> split(Split s) const
    {
        std::vector<const Case*> out;
        for (const auto& c : cases)
            if (c.split == s) out.push_back(&c);
        return out;
    }
    bool has_dynamics() const { return !cases.empty() && !cases.front().dynamics.empty(); }
};

inline Dataset load_dataset(const std::filesystem::path& dir)
{
    const auto lines = read_manifest(dir / kManifestName);
    Dataset ds;
    const auto st = gridio::read_grid(dir / kStaticsName);
    if (st.size() != 2) throw FormatError("statics file must hold orography and land_sea");
    ds.statics = {st[0], st[1]};
    std::map<std::string, std::size_t> by_path;
    for (const auto& l : lines) {
        if (by_path.count(l.truth_path)) continue;
        by_path[l.truth_path] = ds.cases.size();
        Case c;
        c.split = l.split;
        c.init = l.init;
        c.lead = l.lead;
        auto truth = gridio::read_grid(dir / l.truth_path);
        c.truth = std::move(truth.at(0));
        c.members = gridio::read_grid(dir / l.forecast_path);
        if (!l.dyn_path.empty()) c.dynamics = gridio::read_grid(dir / l.dyn_path);
        ds.cases.push_back(std::move(c));
    }
    if (ds.cases.empty()) throw MissingInputError("dataset '" + dir.string() + "' has no records");
    return ds;
}

/// The condition for a case: ensemble-mean low-res forecast, statics and dynamic channels as required.
inline score::Condition make_condition(const Case& c, const StaticFields& st, score::ConfigId id, double alpha)
{
    score::Condition cond;
    cond.alpha = alpha;
    cond.lead = c.lead;
    if (score::uses_lowres_ws(id)) cond.lowres_ws = c.forecast_mean();
    cond.priors = {{"orography", st.orography}, {"land_sea", st.land_sea}};
    if (score::uses_dynamic(id)) {
        if (c.dynamics.size() != score::dynamic_variables().size())
            throw MissingInputError("configuration " + score::to_string(id) + " needs dynamic channels; regenerate the dataset");
        for (std::size_t k = 0; k < c.dynamics.size(); ++k) cond.priors.emplace_back(score::dynamic_variables()[k], c.dynamics[k]);
    }
    return cond;
}

} // namespace diffscale::synth
