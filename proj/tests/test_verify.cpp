#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "diffscale/rng.hpp"
#include "diffscale/verify.hpp"

using namespace diffscale;
using namespace diffscale::verify;

namespace {

/// Integral of (F(z) - 1{z >= y})^2 over the real line, integrated exactly between breakpoints.
double crps_cdf_integral(std::vector<double> x, double y)
{
    std::sort(x.begin(), x.end());
    std::vector<double> pts = x;
    pts.push_back(y);
    std::sort(pts.begin(), pts.end());
    const double K = static_cast<double>(x.size());
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double a = pts[i], b = pts[i + 1];
        if (b <= a) continue;
        const double mid = 0.5 * (a + b);
        const double F = static_cast<double>(std::count_if(x.begin(), x.end(), [&](double v) { return v <= mid; })) / K;
        const double H = mid >= y ? 1.0 : 0.0;
        total += (F - H) * (F - H) * (b - a);
    }
    return total;
}

Field row(std::initializer_list<float> v) { return Field(1, static_cast<int>(v.size()), std::vector<float>(v)); }

Field random_field(int h, int w, Rng& rng, double mean = 0.0, double sd = 1.0)
{
    Field f(h, w);
    for (auto& v : f.values()) v = static_cast<float>(mean + sd * rng.normal());
    return f;
}

} // namespace

TEST(Bins, Examples)
{
    EXPECT_EQ(assign_bin(5), 1);
    EXPECT_EQ(assign_bin(1), 0);
    EXPECT_EQ(assign_bin(46), 5);
    EXPECT_EQ(assign_bin(15), 4);
    EXPECT_EQ(assign_bin(16), 5);
    EXPECT_THROW(assign_bin(0), DomainError);
    EXPECT_THROW(assign_bin(47), DomainError);
}

TEST(Bins, PartitionAllLeads)
{
    const int expected[] = {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4};
    const BinScheme scheme;
    for (int l = 1; l <= 46; ++l) {
        int covering = 0;
        for (const auto& [lo, hi] : scheme.bins) covering += (l >= lo && l <= hi);
        EXPECT_EQ(covering, 1) << l;
        EXPECT_EQ(assign_bin(l), l <= 15 ? expected[l - 1] : 5) << l;
    }
}

TEST(Crps, HandValues)
{
    const std::vector<double> two{0.0, 1.0};
    EXPECT_NEAR(crps_ensemble(two, 0.5), 0.25, 1e-12);
    EXPECT_NEAR(crps_ensemble(two, 2.0), 1.25, 1e-12);
    EXPECT_NEAR(crps_cdf_integral(two, 2.0), 1.25, 1e-12);
    const std::vector<double> one{3.0};
    EXPECT_DOUBLE_EQ(crps_ensemble(one, 1.5), 1.5);
    const std::vector<double> same{2.0, 2.0, 2.0};
    EXPECT_DOUBLE_EQ(crps_ensemble(same, 2.0), 0.0);
    EXPECT_THROW(crps_ensemble(std::vector<double>{}, 0.0), UsageError);
}

TEST(Crps, MatchesCdfIntegral)
{
    Rng rng(42);
    for (int c = 0; c < 100; ++c) {
        const int K = 1 + static_cast<int>(rng.uniform() * 12);
        std::vector<double> x(static_cast<std::size_t>(K));
        for (auto& v : x) v = rng.normal() * 2.0;
        const double y = rng.normal() * 2.5;
        EXPECT_NEAR(crps_ensemble(x, y), crps_cdf_integral(x, y), 1e-4);
        EXPECT_GE(crps_ensemble(x, y), 0.0);
    }
}

TEST(Crpss, Examples)
{
    EXPECT_DOUBLE_EQ(*crpss(0.4, 0.4), 0.0);
    EXPECT_DOUBLE_EQ(*crpss(0.0, 0.4), 1.0);
    EXPECT_NEAR(*crpss(0.3, 0.4), 0.25, 1e-12);
    EXPECT_FALSE(crpss(0.3, 0.0).has_value());
}

TEST(Pearson, SignsAndDegenerate)
{
    const std::vector<double> a{1, 2, 4, 7}, neg{-1, -2, -4, -7}, flat{3, 3, 3, 3};
    EXPECT_NEAR(*pearson(a, a), 1.0, 1e-12);
    EXPECT_NEAR(*pearson(a, neg), -1.0, 1e-12);
    EXPECT_FALSE(pearson(a, flat).has_value());
    EXPECT_FALSE(pearson(std::vector<double>{1}, std::vector<double>{2}).has_value());
}

TEST(Climatology, MeanAndDegenerate)
{
    std::vector<Field> same(4, row({2.0f, 5.0f}));
    const auto c = build_climatology(same);
    EXPECT_EQ(c.members(), 4u);
    EXPECT_NEAR(c.crps(0, 3.5), 1.5, 1e-12);
    EXPECT_NEAR(c.crps(1, 5.0), 0.0, 1e-12);
    Rng rng(1);
    std::vector<Field> pool;
    for (int i = 0; i < 9; ++i) pool.push_back(random_field(3, 4, rng));
    const auto c2 = build_climatology(pool);
    for (std::size_t p = 0; p < 12; ++p) {
        double s = 0.0;
        for (const auto& f : pool) s += f.values()[p];
        EXPECT_NEAR(c2.mean().values()[p], s / 9.0, 1e-6);
    }
    EXPECT_THROW(build_climatology(std::vector<Field>{row({1.0f})}), UsageError);
}

TEST(Climatology, SelfCrpsIsDispersionOnly)
{
    // Pool {1, 2, 4}; obs 2: skill = (1 + 0 + 2)/3 = 1, dispersion = (1/18)(0+1+3+1+0+2+3+2+0) = 12/18.
    const std::vector<Field> pool{row({1.0f}), row({2.0f}), row({4.0f})};
    const auto c = build_climatology(pool);
    EXPECT_NEAR(c.crps(0, 2.0), 1.0 - 12.0 / 18.0, 1e-12);
}

TEST(Climatology, SortedCrpsMatchesPairwise)
{
    Rng rng(3);
    std::vector<Field> pool;
    for (int i = 0; i < 37; ++i) pool.push_back(random_field(2, 3, rng, 5.0, 2.0));
    const auto c = build_climatology(pool);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t p = static_cast<std::size_t>(trial % 6);
        std::vector<double> x;
        for (const auto& f : pool) x.push_back(f.values()[p]);
        double y = 5.0 + 3.0 * rng.normal();
        if (trial == 7) y = x[3]; // tie with a member
        EXPECT_NEAR(c.crps(p, y), crps_ensemble(x, y), 1e-12);
    }
}

TEST(Maps, ConstantOffset)
{
    Rng rng(5);
    std::vector<Field> train{random_field(2, 2, rng), random_field(2, 2, rng), random_field(2, 2, rng)};
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases;
    for (int i = 0; i < 3; ++i) {
        CaseFields c;
        c.lead_day = 2;
        c.truth = random_field(2, 2, rng);
        Field shifted = c.truth;
        for (auto& v : shifted.values()) v += 0.5f;
        c.model = {shifted, shifted};
        c.baseline = {c.truth};
        cases.push_back(c);
    }
    const auto rep = evaluate_resolution(cases, clim);
    const Cell& model = rep.cell(0, Method::Model);
    const Cell& base = rep.cell(0, Method::Baseline);
    for (std::size_t p = 0; p < 4; ++p) {
        EXPECT_NEAR(model.map(Metric::Bias).values()[p], 0.5, 1e-6);
        EXPECT_NEAR(model.map(Metric::Mae).values()[p], 0.5, 1e-6);
        EXPECT_NEAR(model.map(Metric::Rmse).values()[p], 0.5, 1e-6);
        EXPECT_EQ(base.map(Metric::Bias).values()[p], 0.0f);
        EXPECT_EQ(base.map(Metric::Mae).values()[p], 0.0f);
        EXPECT_EQ(base.map(Metric::Rmse).values()[p], 0.0f);
        EXPECT_NEAR(model.map(Metric::Acc).values()[p], 1.0, 1e-6);
    }
    EXPECT_NEAR(*base.value(Metric::Crpss), 1.0, 1e-12);
    EXPECT_FALSE(rep.cell(1, Method::Model).value(Metric::Mae).has_value());
    EXPECT_EQ(rep.cell(1, Method::Model).cases, 0);
}

TEST(Maps, BruteForcePooling)
{
    Rng rng(11);
    std::vector<Field> train;
    for (int i = 0; i < 5; ++i) train.push_back(random_field(2, 3, rng));
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases;
    for (int i = 0; i < 3; ++i) {
        CaseFields c;
        c.lead_day = 8;
        c.truth = random_field(2, 3, rng);
        c.model = {random_field(2, 3, rng), random_field(2, 3, rng), random_field(2, 3, rng)};
        cases.push_back(c);
    }
    const auto rep = evaluate_resolution(cases, clim);
    const Cell& cell = rep.cell(2, Method::Model);
    double t_bias = 0, t_mae = 0, t_mse = 0, t_rmse = 0;
    for (std::size_t p = 0; p < 6; ++p) {
        double bias = 0, mae = 0, mse = 0;
        for (const auto& c : cases) {
            const double m = (double(c.model[0].values()[p]) + c.model[1].values()[p] + c.model[2].values()[p]) / 3.0;
            const double e = m - c.truth.values()[p];
            bias += e / 3.0;
            mae += std::abs(e) / 3.0;
            mse += e * e / 3.0;
        }
        EXPECT_NEAR(cell.map(Metric::Bias).values()[p], bias, 1e-6);
        EXPECT_NEAR(cell.map(Metric::Mse).values()[p], mse, 1e-6);
        // RMSE^2 == MSE per pixel in double; MAE <= RMSE.
        EXPECT_LE(cell.map(Metric::Mae).values()[p], cell.map(Metric::Rmse).values()[p] + 1e-6);
        t_bias += bias / 6;
        t_mae += mae / 6;
        t_mse += mse / 6;
        t_rmse += std::sqrt(mse) / 6;
    }
    EXPECT_NEAR(*cell.value(Metric::Bias), t_bias, 1e-12);
    EXPECT_NEAR(*cell.value(Metric::Mae), t_mae, 1e-12);
    EXPECT_NEAR(*cell.value(Metric::Mse), t_mse, 1e-12);
    EXPECT_NEAR(*cell.value(Metric::Rmse), t_rmse, 1e-12);
}

TEST(Acc, FourCaseHandExample)
{
    // Climatology mean 0 at both pixels.
    const std::vector<Field> train{row({1.0f, -2.0f}), row({-1.0f, 2.0f})};
    const auto clim = build_climatology(train);
    const float pred0[] = {1, 2, 3, 5}, truth0[] = {2, 1, 4, 4};
    const float pred1[] = {-1, 0, 1, 0}, truth1[] = {1, 0, -1, 0.5f};
    std::vector<CaseFields> cases;
    for (int i = 0; i < 4; ++i) {
        CaseFields c;
        c.lead_day = 20;
        c.truth = row({truth0[i], truth1[i]});
        c.model = {row({pred0[i], pred1[i]})};
        cases.push_back(c);
    }
    const auto rep = evaluate_resolution(cases, clim);
    auto oracle = [](const float* a, const float* b) {
        double ma = 0, mb = 0;
        for (int i = 0; i < 4; ++i) {
            ma += a[i] / 4.0;
            mb += b[i] / 4.0;
        }
        double sab = 0, saa = 0, sbb = 0;
        for (int i = 0; i < 4; ++i) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        return sab / std::sqrt(saa * sbb);
    };
    const double r0 = oracle(pred0, truth0), r1 = oracle(pred1, truth1);
    EXPECT_NEAR(rep.cell(5, Method::Model).map(Metric::Acc).values()[0], r0, 1e-6);
    EXPECT_NEAR(rep.cell(5, Method::Model).map(Metric::Acc).values()[1], r1, 1e-6);
    EXPECT_NEAR(*rep.cell(5, Method::Model).value(Metric::Acc), 0.5 * (r0 + r1), 1e-12);
    // Climatology's own forecast has zero anomaly variance: ACC is missing, not zero.
    EXPECT_TRUE(std::isnan(rep.cell(5, Method::Climatology).map(Metric::Acc).values()[0]));
    EXPECT_FALSE(rep.cell(5, Method::Climatology).value(Metric::Acc).has_value());
}

TEST(Acc, InvariantToConstantShift)
{
    Rng rng(17);
    std::vector<double> a(8), b(8), a2(8), b2(8);
    for (int i = 0; i < 8; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
        a2[i] = a[i] + 3.25;
        b2[i] = b[i] + 3.25;
    }
    EXPECT_NEAR(*pearson(a, b), *pearson(a2, b2), 1e-12);
}

// Two cases, two pixels, K = 2 members, every table cell against a hand-rolled computation.
TEST(Report, TwoCaseTwoPixelBruteForce)
{
    const std::vector<Field> train{row({1.0f, 4.0f}), row({3.0f, 2.0f}), row({2.0f, 9.0f})};
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases(2);
    cases[0].lead_day = 2;
    cases[0].truth = row({2.5f, 3.0f});
    cases[0].model = {row({2.0f, 3.5f}), row({3.0f, 5.0f})};
    cases[0].baseline = {row({1.0f, 6.0f}), row({1.5f, 4.0f})};
    cases[1].lead_day = 3;
    cases[1].truth = row({1.0f, 8.0f});
    cases[1].model = {row({1.25f, 7.0f}), row({0.5f, 7.5f})};
    cases[1].baseline = {row({2.0f, 5.0f}), row({3.0f, 6.5f})};
    const auto rep = evaluate_resolution(cases, clim);

    // Brute force: per pixel, pool the two cases; then average the two pixels.
    const double clim_pool[2][3] = {{1, 3, 2}, {4, 2, 9}};
    const double cm[2] = {2.0, 5.0};
    auto crps_brute = [](const std::vector<double>& x, double y) {
        double s1 = 0, s2 = 0;
        for (double a : x) s1 += std::abs(a - y);
        for (double a : x)
            for (double b : x) s2 += std::abs(a - b);
        return s1 / x.size() - s2 / (2.0 * x.size() * x.size());
    };
    struct Expect {
        double bias, mae, mse, rmse, crps;
        std::optional<double> acc;
    };
    auto brute = [&](Method m) {
        Expect e{0, 0, 0, 0, 0, std::nullopt};
        double acc_sum = 0;
        int acc_n = 0;
        for (int p = 0; p < 2; ++p) {
            double bias = 0, mae = 0, mse = 0, cr = 0;
            std::vector<double> pa, ta;
            for (const auto& c : cases) {
                std::vector<double> ens;
                if (m == Method::Climatology)
                    ens.assign(clim_pool[p], clim_pool[p] + 3);
                else
                    for (const auto& f : (m == Method::Model ? c.model : c.baseline)) ens.push_back(f.values()[p]);
                const double y = c.truth.values()[p];
                const double pred = m == Method::Climatology ? cm[p] : (ens[0] + ens[1]) / 2.0;
                bias += (pred - y) / 2;
                mae += std::abs(pred - y) / 2;
                mse += (pred - y) * (pred - y) / 2;
                cr += crps_brute(ens, y) / 2;
                pa.push_back(pred - cm[p]);
                ta.push_back(y - cm[p]);
            }
            e.bias += bias / 2;
            e.mae += mae / 2;
            e.mse += mse / 2;
            e.rmse += std::sqrt(mse) / 2;
            e.crps += cr / 2;
            const double da = pa[0] - pa[1], dt = ta[0] - ta[1];
            if (da != 0 && dt != 0) {
                acc_sum += (da > 0) == (dt > 0) ? 1.0 : -1.0; // n = 2 correlations are +-1
                ++acc_n;
            }
        }
        if (acc_n) e.acc = acc_sum / acc_n;
        return e;
    };
    const Expect ec = brute(Method::Climatology);
    for (Method m : kMethods) {
        const Expect e = brute(m);
        const Cell& cell = rep.cell(0, m);
        SCOPED_TRACE(to_string(m));
        EXPECT_EQ(cell.cases, 2);
        EXPECT_NEAR(*cell.value(Metric::Bias), e.bias, 1e-12);
        EXPECT_NEAR(*cell.value(Metric::Mae), e.mae, 1e-12);
        EXPECT_NEAR(*cell.value(Metric::Mse), e.mse, 1e-12);
        EXPECT_NEAR(*cell.value(Metric::Rmse), e.rmse, 1e-12);
        EXPECT_NEAR(*cell.value(Metric::Crps), e.crps, 1e-12);
        EXPECT_NEAR(*cell.value(Metric::Crpss), 1.0 - e.crps / ec.crps, 1e-12);
        ASSERT_EQ(cell.value(Metric::Acc).has_value(), e.acc.has_value());
        if (e.acc) {
            EXPECT_NEAR(*cell.value(Metric::Acc), *e.acc, 1e-12);
        }
    }
    EXPECT_NEAR(*rep.cell(0, Method::Climatology).value(Metric::Crpss), 0.0, 1e-15);
}

TEST(Report, PerfectModel)
{
    Rng rng(23);
    std::vector<Field> train;
    for (int i = 0; i < 6; ++i) train.push_back(random_field(3, 3, rng, 5));
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases;
    for (int l = 1; l <= 46; l += 3) {
        CaseFields c;
        c.lead_day = l;
        c.truth = random_field(3, 3, rng, 5);
        c.model.assign(4, c.truth);
        c.baseline = {random_field(3, 3, rng, 5)};
        cases.push_back(c);
    }
    const auto rep = evaluate_resolution(cases, clim);
    for (int b = 0; b < 6; ++b) {
        EXPECT_DOUBLE_EQ(*rep.cell(b, Method::Model).value(Metric::Mae), 0.0);
        EXPECT_DOUBLE_EQ(*rep.cell(b, Method::Model).value(Metric::Crps), 0.0);
        EXPECT_DOUBLE_EQ(*rep.cell(b, Method::Model).value(Metric::Crpss), 1.0);
    }
}

TEST(Report, ModelEqualToClimatologyHasZeroSkill)
{
    Rng rng(29);
    std::vector<Field> train;
    for (int i = 0; i < 5; ++i) train.push_back(random_field(2, 2, rng, 3));
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases;
    for (int i = 0; i < 4; ++i) {
        CaseFields c;
        c.lead_day = 10 + i;
        c.truth = random_field(2, 2, rng, 3);
        c.model = train;
        cases.push_back(c);
    }
    const auto rep = evaluate_resolution(cases, clim);
    EXPECT_NEAR(*rep.cell(3, Method::Model).value(Metric::Crpss), 0.0, 1e-12);
}

TEST(Report, PermutationInvariant)
{
    Rng rng(31);
    std::vector<Field> train;
    for (int i = 0; i < 7; ++i) train.push_back(random_field(3, 3, rng));
    const auto clim = build_climatology(train);
    std::vector<CaseFields> cases;
    for (int i = 0; i < 12; ++i) {
        CaseFields c;
        c.lead_day = 1 + (i * 7) % 46;
        c.truth = random_field(3, 3, rng);
        for (int k = 0; k < 4; ++k) c.model.push_back(random_field(3, 3, rng));
        c.baseline = {random_field(3, 3, rng), random_field(3, 3, rng)};
        cases.push_back(c);
    }
    auto shuffled = cases;
    std::mt19937 g(5);
    std::shuffle(shuffled.begin(), shuffled.end(), g);
    for (auto& c : shuffled) std::shuffle(c.model.begin(), c.model.end(), g);
    const auto a = evaluate_resolution(cases, clim), b = evaluate_resolution(shuffled, clim);
    for (int bin = 0; bin < 6; ++bin)
        for (Method m : kMethods)
            for (Metric k : kMetrics) {
                const auto x = a.cell(bin, m).value(k), y = b.cell(bin, m).value(k);
                ASSERT_EQ(x.has_value(), y.has_value());
                if (x) {
                    EXPECT_NEAR(*x, *y, 1e-12);
                }
            }
}

TEST(Report, RejectsShapeMismatch)
{
    const std::vector<Field> train{Field(2, 2), Field(2, 2, 1.0f)};
    const auto clim = build_climatology(train);
    CaseFields c;
    c.lead_day = 1;
    c.truth = Field(3, 3);
    EXPECT_THROW(evaluate_resolution({c}, clim), DimensionError);
    c.truth = Field(2, 2);
    c.model = {Field(2, 3)};
    EXPECT_THROW(evaluate_resolution({c}, clim), DimensionError);
}

TEST(Run, AllResolutionsAndOutputs)
{
    Rng rng(37);
    const auto fs = grid::enumerate_factors(3, 12);
    std::vector<Field> train;
    for (int i = 0; i < 4; ++i) train.push_back(random_field(12, 12, rng, 5));
    std::vector<RunCase> cases;
    for (int l : {2, 5, 20}) {
        RunCase c;
        c.lead_day = l;
        c.truth = random_field(12, 12, rng, 5);
        c.lowres = {grid::block_coarsen(c.truth, 3, 3), random_field(3, 3, rng, 5)};
        for (int r = 0; r < 4; ++r) c.model.push_back(std::vector<Field>(2, grid::pixelate(c.truth, fs.sizes[static_cast<std::size_t>(r)])));
        cases.push_back(c);
    }
    const auto rep = evaluate_run(cases, train, fs);
    ASSERT_EQ(rep.resolutions.size(), 4u);
    const char* labels[] = {"S", "S/2", "S/3", "S/4"};
    for (int r = 0; r < 4; ++r) {
        EXPECT_EQ(rep.resolutions[static_cast<std::size_t>(r)].label, labels[r]);
        EXPECT_EQ(rep.resolutions[static_cast<std::size_t>(r)].size, fs.sizes[static_cast<std::size_t>(r)]);
        EXPECT_NEAR(*rep.value(labels[r], 0, Method::Model, Metric::Mae), 0.0, 1e-6);
        EXPECT_EQ(rep.resolution(labels[r]).cell(0, Method::Model).map(Metric::Mae).height(),
                  fs.sizes[static_cast<std::size_t>(r)]);
    }
    EXPECT_FALSE(rep.value("S", 2, Method::Model, Metric::Mae).has_value());
    EXPECT_THROW(rep.resolution("S/5"), UsageError);

    const auto dir = std::filesystem::temp_directory_path() / "diffscale_test_verify";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    write_csv(dir / "metrics.csv", rep);
    std::ifstream in(dir / "metrics.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "resolution,bin,method,metric,value");
    int rows = 0, na = 0;
    while (std::getline(in, line)) {
        ++rows;
        if (line.size() >= 3 && line.substr(line.size() - 3) == ",NA") ++na;
    }
    EXPECT_EQ(rows, 4 * 6 * 3 * 7);
    EXPECT_GT(na, 0);
    write_maps(dir / "maps", rep, true);
    EXPECT_TRUE(std::filesystem::exists(dir / "maps" / "S_2_bin1_model_mae.dsg"));
    EXPECT_TRUE(std::filesystem::exists(dir / "maps" / "S_bin1_baseline_crps.pgm"));
    EXPECT_TRUE(std::filesystem::exists(dir / "maps" / "S_bin1_baseline_crps.pgm.txt"));
    EXPECT_FALSE(std::filesystem::exists(dir / "maps" / "S_bin3_model_mae.dsg"));
    const auto back = gridio::read_grid(dir / "maps" / "S_bin1_model_bias.dsg");
    EXPECT_EQ(back.front(), rep.resolution("S").cell(0, Method::Model).map(Metric::Bias));
}
