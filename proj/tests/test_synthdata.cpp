#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "diffscale/synthdata.hpp"

using namespace diffscale;
using namespace diffscale::synth;

namespace {

std::filesystem::path temp_dir(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / "diffscale_test_synth" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

WorldConfig tiny_world(std::uint64_t seed = 7)
{
    WorldConfig c;
    c.seed = seed;
    c.n_train = 4;
    c.n_val = 2;
    c.n_test = 3;
    c.members = 3;
    c.leads_per_init = 2;
    return c;
}

/// Radially binned power of a square field from a direct O(n^4) DFT.
std::vector<double> radial_power(const Field& f)
{
    const int n = f.height();
    const double two_pi = 2.0 * std::acos(-1.0);
    std::vector<double> power(static_cast<std::size_t>(n), 0.0);
    std::vector<int> count(static_cast<std::size_t>(n), 0);
    for (int ky = 0; ky < n; ++ky)
        for (int kx = 0; kx < n; ++kx) {
            std::complex<double> c = 0.0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) c += static_cast<double>(f(y, x)) * std::polar(1.0, -two_pi * (kx * x + ky * y) / n);
            const int fx = kx <= n / 2 ? kx : kx - n;
            const int fy = ky <= n / 2 ? ky : ky - n;
            const int k = static_cast<int>(std::lround(std::sqrt(double(fx * fx + fy * fy))));
            if (k < n) {
                power[static_cast<std::size_t>(k)] += std::norm(c);
                ++count[static_cast<std::size_t>(k)];
            }
        }
    for (int k = 0; k < n; ++k)
        if (count[static_cast<std::size_t>(k)]) power[static_cast<std::size_t>(k)] /= count[static_cast<std::size_t>(k)];
    return power;
}

double pooled_correlation(const std::vector<double>& a, const std::vector<double>& b)
{
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST(Config, RejectsBadCanvas)
{
    WorldConfig c;
    c.canvas = 50;
    EXPECT_THROW(c.validate(), ConfigError);
    c.canvas = 36;
    c.base = 12;
    EXPECT_THROW(c.validate(), ConfigError);
    c = WorldConfig{};
    c.rho = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Statics, LandSeaHalfAndOrographyNonNegative)
{
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        WorldConfig c;
        c.seed = seed;
        const auto st = gen_static_fields(c);
        EXPECT_NEAR(st.land_sea.mean(), 0.5, 0.05);
        for (float v : st.land_sea.values()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
        for (float v : st.orography.values()) EXPECT_GE(v, 0.0f);
        EXPECT_GT(*std::max_element(st.orography.values().begin(), st.orography.values().end()), 0.0f);
    }
}

TEST(Statics, Deterministic)
{
    WorldConfig c;
    c.seed = 11;
    const auto a = gen_static_fields(c);
    const auto b = gen_static_fields(c);
    EXPECT_EQ(a.orography, b.orography);
    EXPECT_EQ(a.land_sea, b.land_sea);
    c.seed = 12;
    EXPECT_NE(gen_static_fields(c).land_sea, a.land_sea);
}

TEST(Latent, UnitVarianceFilter)
{
    SpectralFilter f(48, 3.0);
    Rng rng(3);
    double s2 = 0.0;
    std::size_t n = 0;
    for (int r = 0; r < 200; ++r) {
        const Field x = f.sample(rng);
        for (float v : x.values()) s2 += double(v) * v;
        n += x.size();
    }
    EXPECT_NEAR(s2 / n, 1.0, 0.1);
}

TEST(Latent, LagOneAutocorrelationMatchesRho)
{
    WorldConfig c;
    c.seed = 5;
    const auto series = gen_latent_series(c, 600);
    // Pool the AR(1) estimator over a sparse set of pixels.
    double num = 0.0, den = 0.0;
    for (int p = 0; p < 48 * 48; p += 37) {
        for (std::size_t d = 1; d < series.size(); ++d) {
            num += double(series[d].values()[p]) * series[d - 1].values()[p];
            den += double(series[d - 1].values()[p]) * series[d - 1].values()[p];
        }
    }
    EXPECT_NEAR(num / den, c.rho, 0.05);
}

TEST(Latent, SpectralSlope)
{
    WorldConfig c;
    c.seed = 9;
    const auto series = gen_latent_series(c, 60);
    std::vector<double> power(48, 0.0);
    // Days 10 apart are nearly independent at rho = 0.9.
    for (std::size_t d = 0; d < series.size(); d += 10) {
        const auto p = radial_power(series[d]);
        for (std::size_t k = 0; k < p.size(); ++k) power[k] += p[k];
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int k = 2; k <= 20; ++k) {
        const double x = std::log(double(k)), y = std::log(power[static_cast<std::size_t>(k)]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++m;
    }
    const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    EXPECT_NEAR(slope, -c.spectral_slope, 0.5);
}

TEST(Truth, PositiveAndDeskScale)
{
    WorldConfig c;
    c.seed = 4;
    const auto st = gen_static_fields(c);
    const auto truth = gen_truth_series(c, st, 50);
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : truth)
        for (float v : f.values()) {
            EXPECT_GE(v, 0.0f);
            s += v;
            ++n;
        }
    EXPECT_GT(s / n, 3.0);
    EXPECT_LT(s / n, 10.0);
}

TEST(Truth, RejectsEmptySeries)
{
    WorldConfig c;
    EXPECT_THROW(gen_latent_series(c, 0), DomainError);
}

TEST(Forecast, ErrorGrowthShape)
{
    WorldConfig c;
    EXPECT_NEAR(error_growth(c, 1e-9), 0.0, 1e-9);
    for (int l = 1; l < 46; ++l) EXPECT_LT(error_growth(c, l), error_growth(c, l + 1));
    EXPECT_LT(error_growth(c, 46), c.error_scale);
}

TEST(Forecast, LeadOutOfRange)
{
    WorldConfig c;
    const auto st = gen_static_fields(c);
    const Field truth(48, 48, 5.0f);
    EXPECT_THROW(degrade_forecast(truth, 0.5, 0, c, st, 1), DomainError);
    EXPECT_THROW(degrade_forecast(truth, 46.5, 0, c, st, 1), DomainError);
    EXPECT_NO_THROW(degrade_forecast(truth, 46.0, 0, c, st, 1));
}

TEST(Forecast, ShapeAndPositivity)
{
    WorldConfig c;
    c.seed = 2;
    const auto st = gen_static_fields(c);
    const auto truth = gen_truth_series(c, st, 1).front();
    for (double lead : {1.0, 17.5, 46.0}) {
        const Field f = degrade_forecast(truth, lead, 0, c, st, 99);
        EXPECT_EQ(f.height(), 12);
        EXPECT_EQ(f.width(), 12);
        for (float v : f.values()) EXPECT_GE(v, 0.0f);
    }
}

TEST(Forecast, MembersShareSystematicComponents)
{
    WorldConfig c;
    c.seed = 6;
    const auto st = gen_static_fields(c);
    const auto truth = gen_truth_series(c, st, 1).front();
    const auto a = forecast_parts(truth, 12.0, 0, c, st, 1234);
    const auto b = forecast_parts(truth, 12.0, 1, c, st, 1234);
    EXPECT_EQ(a.bias, b.bias);
    EXPECT_EQ(a.common, b.common);
    EXPECT_EQ(a.blurred, b.blurred);
    EXPECT_NE(a.member, b.member);
    EXPECT_NE(degrade_forecast(truth, 12.0, 0, c, st, 1234), degrade_forecast(truth, 12.0, 1, c, st, 1234));
    const double expected = bias_pattern(c, st).values()[0];
    EXPECT_FLOAT_EQ(a.bias.values()[0], static_cast<float>(expected));
    EXPECT_NEAR(a.bias.mean(), 0.0, 1e-6);
}

TEST(Forecast, BaselineMaeIncreasesAcrossBins)
{
    WorldConfig c;
    c.seed = 21;
    c.n_train = 200;
    c.n_val = 0;
    c.n_test = 1;
    const World world(c);
    std::vector<double> mae;
    for (int b = 0; b < 5; ++b) {
        const auto [lo, hi] = lead_bins()[static_cast<std::size_t>(b)];
        Rng rng(derive_seed(77, static_cast<std::uint64_t>(b)));
        double s = 0.0;
        std::size_t n = 0;
        for (int draw = 0; draw < 200; ++draw) {
            const int init = draw;
            const double lead = lo + std::floor(rng.uniform() * (hi - lo + 1));
            const Field truth = world.truth(init, lead);
            const Field fc = degrade_forecast(truth, lead, draw % c.members, c, world.statics(), case_seed(c, init, lead));
            const Field ref = grid::block_coarsen(truth, c.base, c.base);
            for (std::size_t p = 0; p < fc.size(); ++p) s += std::abs(double(fc.values()[p]) - ref.values()[p]);
            n += fc.size();
        }
        mae.push_back(s / n);
    }
    for (std::size_t b = 1; b < mae.size(); ++b) EXPECT_GT(mae[b], mae[b - 1]) << "bin " << b + 1;
}

TEST(Forecast, CorrelationDecaysWithLead)
{
    WorldConfig c;
    c.seed = 31;
    c.n_train = 120;
    c.n_val = 0;
    c.n_test = 1;
    const World world(c);
    auto corr_at = [&](double lead) {
        std::vector<double> fcv, tv;
        for (int init = 0; init < 120; ++init) {
            const Field truth = world.truth(init, lead);
            const Field fc = world.forecast(init, lead).front();
            const Field ref = grid::block_coarsen(truth, c.base, c.base);
            fcv.insert(fcv.end(), fc.values().begin(), fc.values().end());
            tv.insert(tv.end(), ref.values().begin(), ref.values().end());
        }
        return pooled_correlation(fcv, tv);
    };
    EXPECT_GT(corr_at(1.0), corr_at(30.0));
}

TEST(World, LatentInterpolatesBetweenDays)
{
    const World w(tiny_world());
    const Field a = w.latent(3.0), b = w.latent(4.0), m = w.latent(3.5);
    for (std::size_t p = 0; p < m.size(); p += 101)
        EXPECT_NEAR(m.values()[p], 0.5 * (a.values()[p] + b.values()[p]), 1e-5);
    EXPECT_THROW(w.latent(-0.5), DomainError);
}

TEST(Plan, SplitsAreDisjointAndSized)
{
    WorldConfig c;
    const auto plan = plan_dataset(c);
    std::map<Split, std::set<int>> inits;
    for (const auto& p : plan) {
        inits[p.split].insert(p.init);
        EXPECT_GE(p.lead, 1.0);
        EXPECT_LE(p.lead, 46.0);
        if (p.split != Split::Train) {
            EXPECT_EQ(p.lead, std::floor(p.lead));
            const auto [lo, hi] = lead_bins()[static_cast<std::size_t>(p.slot)];
            EXPECT_GE(p.lead, lo);
            EXPECT_LE(p.lead, hi);
        }
    }
    EXPECT_EQ(inits[Split::Train].size(), 600u);
    EXPECT_EQ(inits[Split::Val].size(), 100u);
    EXPECT_EQ(inits[Split::Test].size(), 104u);
    for (int a : inits[Split::Train]) {
        EXPECT_FALSE(inits[Split::Val].count(a));
        EXPECT_FALSE(inits[Split::Test].count(a));
    }
    for (int a : inits[Split::Val]) EXPECT_FALSE(inits[Split::Test].count(a));
}

TEST(Plan, TrainLeadsAreContinuous)
{
    const auto plan = plan_dataset(WorldConfig{});
    int fractional = 0;
    for (const auto& p : plan)
        if (p.split == Split::Train && p.lead != std::floor(p.lead)) ++fractional;
    EXPECT_GT(fractional, 3000);
}

TEST(Manifest, RoundTripAndErrors)
{
    const auto dir = temp_dir("manifest");
    std::vector<ManifestLine> lines{{Split::Train, 3, 17.25, 2, "train/a.fc.dsg", "train/a.truth.dsg", ""},
                                    {Split::Test, 9, 4.0, 0, "test/b.fc.dsg", "test/b.truth.dsg", "test/b.dyn.dsg"}};
    write_manifest(dir / "m.csv", lines);
    const auto back = read_manifest(dir / "m.csv");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].lead, 17.25);
    EXPECT_EQ(back[1].dyn_path, "test/b.dyn.dsg");
    EXPECT_EQ(format_line(back[0]), format_line(lines[0]));
    EXPECT_THROW(read_manifest(dir / "absent.csv"), MissingInputError);
    std::ofstream(dir / "bad.csv") << "train,1,2\n";
    EXPECT_THROW(read_manifest(dir / "bad.csv"), FormatError);
    std::ofstream(dir / "bad2.csv") << "holdout,1,2,0,a,b\n";
    EXPECT_THROW(read_manifest(dir / "bad2.csv"), FormatError);
}

TEST(Dataset, BuildLoadShapesAndDeterminism)
{
    const auto c = tiny_world();
    const auto d1 = temp_dir("ds1"), d2 = temp_dir("ds2");
    const auto lines = build_dataset(c, d1, true);
    build_dataset(c, d2, true);
    const std::size_t expected_cases = 4 * 2 + (2 + 3) * 6;
    EXPECT_EQ(lines.size(), expected_cases * 3);
    EXPECT_EQ(read_manifest(d1 / kManifestName).size(), lines.size());
    EXPECT_EQ(slurp(d1 / kManifestName), slurp(d2 / kManifestName));
    EXPECT_EQ(slurp(d1 / lines.back().forecast_path), slurp(d2 / lines.back().forecast_path));

    const auto ds = load_dataset(d1);
    EXPECT_EQ(ds.cases.size(), expected_cases);
    EXPECT_TRUE(ds.has_dynamics());
    std::set<int> test_inits;
    for (const auto& cs : ds.cases) {
        EXPECT_EQ(cs.truth.height(), 48);
        EXPECT_EQ(cs.members.size(), 3u);
        for (const auto& m : cs.members) {
            EXPECT_EQ(m.height(), 12);
            EXPECT_EQ(m.width(), 12);
        }
        EXPECT_EQ(cs.dynamics.size(), score::dynamic_variables().size());
        if (cs.split == Split::Test) test_inits.insert(cs.init);
    }
    EXPECT_EQ(test_inits.size(), 3u);

    const World w(c);
    const auto& first = ds.cases.front();
    EXPECT_EQ(first.truth, w.truth(first.init, first.lead));
    EXPECT_EQ(first.members[1], w.forecast(first.init, first.lead)[1]);
}

TEST(Dataset, ConditionAssembly)
{
    const auto c = tiny_world(8);
    const auto dir = temp_dir("cond");
    build_dataset(c, dir, false);
    const auto ds = load_dataset(dir);
    EXPECT_FALSE(ds.has_dynamics());
    const auto& cs = ds.cases.front();
    const auto cond = make_condition(cs, ds.statics, score::ConfigId::LrWsSf, 4.0);
    ASSERT_TRUE(cond.lowres_ws.has_value());
    EXPECT_EQ(*cond.lowres_ws, cs.forecast_mean());
    EXPECT_EQ(cond.priors.size(), 2u);
    EXPECT_THROW(make_condition(cs, ds.statics, score::ConfigId::SfLrDf, 4.0), MissingInputError);
}

TEST(Dataset, MissingDirectory)
{
    EXPECT_THROW(load_dataset(temp_dir("empty")), MissingInputError);
}
