#pragma once

// Verification: lead-time bins, deterministic and ensemble scores, climatology,
// and the per-(resolution, bin, method) report with spatial maps.
//
// Deterministic scores use the ensemble mean. Table entries are spatial means of
// the per-pixel maps. CRPSS is taken against climatology on the table CRPS values.
// Missing cells are std::nullopt in tables and NaN in maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/gridio.hpp"
#include "diffscale/parallel.hpp"

namespace diffscale::verify {

// ---------------------------------------------------------------- bins

struct BinScheme {
    std::vector<std::pair<int, int>> bins{{1, 3}, {4, 6}, {7, 9}, {10, 12}, {13, 15}, {16, 46}};
    int size() const noexcept { return static_cast<int>(bins.size()); }
    std::string label(int b) const { return "Bin" + std::to_string(b + 1); }
};

/// 0-based bin index of an integer lead day.
inline int assign_bin(int lead_day, const BinScheme& scheme = {})
{
    for (int b = 0; b < scheme.size(); ++b) {
        const auto [lo, hi] = scheme.bins[static_cast<std::size_t>(b)];
        if (lead_day >= lo && lead_day <= hi) return b;
    }
    throw DomainError("lead day " + std::to_string(lead_day) + " outside [1, 46]");
}

// ---------------------------------------------------------------- scalar scores

/// (1/K) sum |x_i - y| - (1/(2K^2)) sum_ij |x_i - x_j|
inline double crps_ensemble(std::span<const double> members, double obs)
{
    if (members.empty()) throw UsageError("crps_ensemble: empty ensemble");
    const double K = static_cast<double>(members.size());
    double skill = 0.0, spread = 0.0;
    for (std::size_t i = 0; i < members.size(); ++i) {
        skill += std::abs(members[i] - obs);
        for (std::size_t j = 0; j < members.size(); ++j) spread += std::abs(members[i] - members[j]);
    }
    return skill / K - spread / (2.0 * K * K);
}

inline std::optional<double> crpss(double crps_model, double crps_ref)
{
    if (!(crps_ref > 0.0) || !std::isfinite(crps_model)) return std::nullopt;
    return 1.0 - crps_model / crps_ref;
}

/// Pearson correlation; nullopt if either side has zero variance or n < 2.
inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
    if (a.size() < 2) return std::nullopt;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------- climatology

/// Per-pixel pool of training truths, kept sorted with prefix sums for O(log N) CRPS.
class Climatology {
public:
    Climatology() = default;

    int height() const noexcept { return h_; }
    int width() const noexcept { return w_; }
    std::size_t members() const noexcept { return n_; }
    const Field& mean() const noexcept { return mean_; }
    /// Per-pixel mean in double precision.
    std::span<const double> mean_values() const noexcept { return mean_d_; }

    /// Sorted pool at one pixel.
    std::span<const double> pool(std::size_t pixel) const { return {sorted_.data() + pixel * n_, n_}; }

    double crps(std::size_t pixel, double obs) const
    {
        const double* x = sorted_.data() + pixel * n_;
        const double* pre = prefix_.data() + pixel * (n_ + 1);
        const std::size_t below = static_cast<std::size_t>(std::lower_bound(x, x + n_, obs) - x);
        const double sum_below = pre[below];
        const double sum_above = pre[n_] - sum_below;
        const double N = static_cast<double>(n_);
        const double skill = (obs * below - sum_below) + (sum_above - obs * (N - below));
        return skill / N - dispersion_[pixel];
    }

    friend Climatology build_climatology(std::span<const Field> truths);

private:
    int h_ = 0, w_ = 0;
    std::size_t n_ = 0;
    std::vector<double> sorted_;     // [pixel][member]
    std::vector<double> prefix_;     // [pixel][member + 1]
    std::vector<double> dispersion_; // (1/(2N^2)) sum_ij |x_i - x_j|
    Field mean_;
    std::vector<double> mean_d_;
};

inline Climatology build_climatology(std::span<const Field> truths)
{
    if (truths.size() < 2) throw UsageError("climatology needs at least 2 training truths, got " + std::to_string(truths.size()));
    for (const auto& t : truths) require_same_shape(t, truths.front(), "build_climatology");
    Climatology c;
    c.h_ = truths.front().height();
    c.w_ = truths.front().width();
    c.n_ = truths.size();
    const std::size_t P = truths.front().size(), N = c.n_;
    c.sorted_.resize(P * N);
    c.prefix_.resize(P * (N + 1));
    c.dispersion_.resize(P);
    c.mean_ = Field(c.h_, c.w_);
    c.mean_d_.resize(P);
    for (std::size_t p = 0; p < P; ++p) {
        double* x = c.sorted_.data() + p * N;
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            x[i] = truths[i].values()[p];
            s += x[i];
        }
        c.mean_d_[p] = s / static_cast<double>(N);
        c.mean_.values()[p] = static_cast<float>(c.mean_d_[p]);
        std::sort(x, x + N);
        double* pre = c.prefix_.data() + p * (N + 1);
        pre[0] = 0.0;
        double weighted = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            pre[i + 1] = pre[i] + x[i];
            weighted += (2.0 * static_cast<double>(i) - static_cast<double>(N) + 1.0) * x[i];
        }
        c.dispersion_[p] = weighted / (static_cast<double>(N) * N);
    }
    return c;
}

// ---------------------------------------------------------------- report

enum class Method { Climatology, Baseline, Model };
inline constexpr std::array<Method, 3> kMethods{Method::Climatology, Method::Baseline, Method::Model};

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::Climatology: return "climatology";
    case Method::Baseline: return "baseline";
    case Method::Model: return "model";
    }
    return "?";
}

enum class Metric { Bias, Mae, Mse, Rmse, Acc, Crps, Crpss };
inline constexpr std::array<Metric, 7> kMetrics{Metric::Bias, Metric::Mae, Metric::Mse, Metric::Rmse,
                                                Metric::Acc,  Metric::Crps, Metric::Crpss};
/// Metrics with a per-pixel map.
inline constexpr std::array<Metric, 6> kMapMetrics{Metric::Bias, Metric::Mae, Metric::Mse,
                                                   Metric::Rmse, Metric::Acc, Metric::Crps};

inline std::string to_string(Metric m)
{
    switch (m) {
    case Metric::Bias: return "bias";
    case Metric::Mae: return "mae";
    case Metric::Mse: return "mse";
    case Metric::Rmse: return "rmse";
    case Metric::Acc: return "acc";
    case Metric::Crps: return "crps";
    case Metric::Crpss: return "crpss";
    }
    return "?";
}

inline bool is_missing(float v) { return std::isnan(v); }
inline constexpr float kMissing = std::numeric_limits<float>::quiet_NaN();

/// One (bin, method) cell at one resolution.
struct Cell {
    int cases = 0;
    std::array<std::optional<double>, kMetrics.size()> table{};
    std::array<Field, kMapMetrics.size()> maps{}; // empty when the cell is missing

    std::optional<double> value(Metric m) const { return table[static_cast<std::size_t>(m)]; }
    const Field& map(Metric m) const
    {
        if (m == Metric::Crpss) throw UsageError("crpss has no spatial map");
        return maps[static_cast<std::size_t>(m)];
    }
};

/// Scores for one resolution: cells[bin][method].
struct ResolutionReport {
    std::string label;
    int size = 0;
    std::vector<std::array<Cell, kMethods.size()>> cells;

    const Cell& cell(int bin, Method m) const { return cells.at(static_cast<std::size_t>(bin))[static_cast<std::size_t>(m)]; }
};

struct MetricReport {
    BinScheme bins;
    std::vector<ResolutionReport> resolutions;

    const ResolutionReport& resolution(const std::string& label) const
    {
        for (const auto& r : resolutions)
            if (r.label == label) return r;
        throw UsageError("no resolution '" + label + "' in report");
    }
    std::optional<double> value(const std::string& res, int bin, Method m, Metric metric) const
    {
        return resolution(res).cell(bin, m).value(metric);
    }
};

/// All fields of one case on a single evaluation grid. Empty ensembles mark a method as absent.
struct CaseFields {
    int lead_day = 1;
    Field truth;
    std::vector<Field> baseline;
    std::vector<Field> model;
};

namespace detail {

inline std::vector<double> ensemble_mean(const std::vector<Field>& members)
{
    std::vector<double> out(members.front().size());
    for (std::size_t p = 0; p < out.size(); ++p) {
        double s = 0.0;
        for (const auto& m : members) s += m.values()[p];
        out[p] = s / static_cast<double>(members.size());
    }
    return out;
}

/// Maps for one (bin, method): preds are deterministic forecasts, crps[c][p] is the per-pixel CRPS.
/// Table entries are spatial means of the double-precision per-pixel values behind the maps.
inline Cell score_cell(const std::vector<const Field*>& truths, const std::vector<std::vector<double>>& preds,
                       const std::vector<std::vector<double>>& crps, const Climatology& clim)
{
    Cell cell;
    const std::size_t C = truths.size();
    cell.cases = static_cast<int>(C);
    if (C == 0) return cell;
    const int h = truths.front()->height(), w = truths.front()->width();
    const std::size_t P = truths.front()->size();
    for (auto& m : cell.maps) m = Field(h, w);
    std::array<double, kMapMetrics.size()> total{};
    std::size_t acc_n = 0;
    std::vector<double> a(C), b(C);
    const double n = static_cast<double>(C);
    for (std::size_t p = 0; p < P; ++p) {
        double bias = 0.0, mae = 0.0, mse = 0.0, cr = 0.0;
        const double cm = clim.mean_values()[p];
        for (std::size_t c = 0; c < C; ++c) {
            const double e = preds[c][p] - truths[c]->values()[p];
            bias += e;
            mae += std::abs(e);
            mse += e * e;
            cr += crps[c][p];
            a[c] = preds[c][p] - cm;
            b[c] = static_cast<double>(truths[c]->values()[p]) - cm;
        }
        const auto acc = pearson(a, b);
        const std::array<double, kMapMetrics.size()> v{bias / n, mae / n, mse / n, std::sqrt(mse / n),
                                                        acc.value_or(0.0), cr / n};
        for (std::size_t k = 0; k < v.size(); ++k) {
            if (k == 4 && !acc) {
                cell.maps[k].values()[p] = kMissing;
                continue;
            }
            cell.maps[k].values()[p] = static_cast<float>(v[k]);
            total[k] += v[k];
        }
        if (acc) ++acc_n;
    }
    const double np = static_cast<double>(P);
    for (std::size_t k = 0; k < kMapMetrics.size(); ++k) {
        const auto metric = static_cast<std::size_t>(kMapMetrics[k]);
        if (k == 4) {
            if (acc_n > 0) cell.table[metric] = total[k] / static_cast<double>(acc_n);
        } else {
            cell.table[metric] = total[k] / np;
        }
    }
    return cell;
}

inline std::vector<double> ensemble_crps(const std::vector<Field>& members, const Field& truth)
{
    std::vector<double> out(truth.size());
    std::vector<double> x(members.size());
    for (std::size_t p = 0; p < truth.size(); ++p) {
        for (std::size_t k = 0; k < members.size(); ++k) x[k] = members[k].values()[p];
        out[p] = crps_ensemble(x, truth.values()[p]);
    }
    return out;
}

} // namespace detail

/// Scores every bin and method on one evaluation grid.
inline ResolutionReport evaluate_resolution(const std::vector<CaseFields>& cases, const Climatology& clim,
                                            const BinScheme& bins = {}, std::string label = "S")
{
    ResolutionReport rep;
    rep.label = std::move(label);
    rep.size = clim.height();
    rep.cells.resize(static_cast<std::size_t>(bins.size()));
    for (const auto& c : cases) {
        if (c.truth.height() != clim.height() || c.truth.width() != clim.width())
            throw DimensionError("evaluate: truth grid does not match climatology grid");
        for (const auto* ens : {&c.baseline, &c.model})
            for (const auto& m : *ens) require_same_shape(m, c.truth, "evaluate: ensemble member");
    }
    std::vector<int> bin_of(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) bin_of[i] = assign_bin(cases[i].lead_day, bins);

    parallel_for(static_cast<std::size_t>(bins.size()) * kMethods.size(), [&](std::size_t job) {
        const int b = static_cast<int>(job / kMethods.size());
        const Method method = kMethods[job % kMethods.size()];
        std::vector<const Field*> truths;
        std::vector<std::vector<double>> preds;
        std::vector<std::vector<double>> crps;
        for (std::size_t i = 0; i < cases.size(); ++i) {
            if (bin_of[i] != b) continue;
            const auto& c = cases[i];
            if (method == Method::Climatology) {
                truths.push_back(&c.truth);
                preds.emplace_back(clim.mean_values().begin(), clim.mean_values().end());
                std::vector<double> cr(c.truth.size());
                for (std::size_t p = 0; p < cr.size(); ++p) cr[p] = clim.crps(p, c.truth.values()[p]);
                crps.push_back(std::move(cr));
            } else {
                const auto& ens = method == Method::Baseline ? c.baseline : c.model;
                if (ens.empty()) continue;
                truths.push_back(&c.truth);
                preds.push_back(detail::ensemble_mean(ens));
                crps.push_back(detail::ensemble_crps(ens, c.truth));
            }
        }
        rep.cells[static_cast<std::size_t>(b)][static_cast<std::size_t>(method)] = detail::score_cell(truths, preds, crps, clim);
    });
    for (auto& row : rep.cells) {
        const auto ref = row[static_cast<std::size_t>(Method::Climatology)].value(Metric::Crps);
        for (auto& cell : row) {
            const auto mine = cell.value(Metric::Crps);
            if (mine && ref) cell.table[static_cast<std::size_t>(Metric::Crpss)] = crpss(*mine, *ref);
        }
    }
    return rep;
}

/// A test case at full resolution: truth S x S, raw low-res members L x L, model ensembles per resolution.
struct RunCase {
    int lead_day = 1;
    Field truth;
    std::vector<Field> lowres;
    /// model[r] holds the S x S members sampled for resolution r (0 = S, 1 = S/2, ...); may be empty.
    std::vector<std::vector<Field>> model;
};

inline std::string resolution_label(int i) { return i == 1 ? "S" : "S/" + std::to_string(i); }

/// Scores at every resolution fraction. Fields are block-averaged onto the S/i grid; the baseline is
/// the bilinear resize of each raw member onto that grid.
inline MetricReport evaluate_run(const std::vector<RunCase>& cases, std::span<const Field> train_truths,
                                 const grid::FactorSet& fs, const BinScheme& bins = {})
{
    MetricReport report;
    report.bins = bins;
    for (std::size_t r = 0; r < fs.sizes.size(); ++r) {
        const int n = fs.sizes[r];
        std::vector<Field> clim_src;
        clim_src.reserve(train_truths.size());
        for (const auto& t : train_truths) clim_src.push_back(grid::block_coarsen(t, n, n));
        const Climatology clim = build_climatology(clim_src);
        std::vector<CaseFields> fields;
        fields.reserve(cases.size());
        for (const auto& c : cases) {
            CaseFields f;
            f.lead_day = c.lead_day;
            f.truth = grid::block_coarsen(c.truth, n, n);
            for (const auto& m : c.lowres) f.baseline.push_back(grid::bilinear_resize(m, n, n));
            if (r < c.model.size())
                for (const auto& m : c.model[r]) f.model.push_back(grid::block_coarsen(m, n, n));
            fields.push_back(std::move(f));
        }
        report.resolutions.push_back(evaluate_resolution(fields, clim, bins, resolution_label(static_cast<int>(r) + 1)));
        report.resolutions.back().size = n;
    }
    return report;
}

// ---------------------------------------------------------------- output

inline std::string format_value(const std::optional<double>& v)
{
    if (!v || !std::isfinite(*v)) return "NA";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
}

inline void write_csv(const std::filesystem::path& path, const MetricReport& rep)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << "resolution,bin,method,metric,value\n";
    for (const auto& r : rep.resolutions)
        for (int b = 0; b < rep.bins.size(); ++b)
            for (Method m : kMethods)
                for (Metric k : kMetrics)
                    out << r.label << ',' << rep.bins.label(b) << ',' << to_string(m) << ',' << to_string(k) << ','
                        << format_value(r.cell(b, m).value(k)) << '\n';
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// 8-bit binary graymap, min-max scaled over non-missing pixels (missing -> 0). The sidecar holds the scale.
inline void write_pgm(const std::filesystem::path& path, const Field& f)
{
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    std::size_t missing = 0;
    for (float v : f.values()) {
        if (is_missing(v)) {
            ++missing;
            continue;
        }
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << "P5\n" << f.width() << ' ' << f.height() << "\n255\n";
    for (float v : f.values()) {
        unsigned char px = 0;
        if (!is_missing(v) && hi > lo) px = static_cast<unsigned char>(std::lround(255.0 * (v - lo) / (hi - lo)));
        out.put(static_cast<char>(px));
    }
    std::ofstream side(path.string() + ".txt");
    char buf[128];
    std::snprintf(buf, sizeof buf, "min=%.9g\nmax=%.9g\nmissing=%zu\n", missing == f.size() ? 0.0 : lo,
                  missing == f.size() ? 0.0 : hi, missing);
    side << buf;
}

inline std::string map_stem(const std::string& res, int bin, Method m, Metric k)
{
    std::string r = res;
    std::replace(r.begin(), r.end(), '/', '_');
    return r + "_bin" + std::to_string(bin + 1) + "_" + to_string(m) + "_" + to_string(k);
}

/// Every non-missing cell map as DSG1, plus PGM images when requested.
inline void write_maps(const std::filesystem::path& dir, const MetricReport& rep, bool images)
{
    std::filesystem::create_directories(dir);
    for (const auto& r : rep.resolutions)
        for (int b = 0; b < rep.bins.size(); ++b)
            for (Method m : kMethods) {
                const Cell& cell = r.cell(b, m);
                if (cell.cases == 0) continue;
                for (Metric k : kMapMetrics) {
                    const auto stem = map_stem(r.label, b, m, k);
                    gridio::write_grid(dir / (stem + ".dsg"), cell.map(k));
                    if (images) write_pgm(dir / (stem + ".pgm"), cell.map(k));
                }
            }
}

} // namespace diffscale::verify
