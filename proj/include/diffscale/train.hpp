#pragma once

// Training loop, dataset-derived normalization, and case-level sampling helpers.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffscale/checkpoint.hpp"
#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/optim.hpp"
#include "diffscale/rng.hpp"
#include "diffscale/sampler.hpp"
#include "diffscale/scorenet.hpp"
#include "diffscale/synthdata.hpp"

namespace diffscale::train {

using Net = score::ScoreNetwork<float>;

namespace detail {

struct Moments {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    void add(const Field& f)
    {
        for (float v : f.values()) {
            sum += v;
            sq += static_cast<double>(v) * v;
        }
        n += f.size();
    }
    score::ChannelStats stats(const std::string& name) const
    {
        const double m = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - m * m);
        return {name, m, var > 1e-12 ? std::sqrt(var) : 1.0};
    }
};

} // namespace detail

/// Per-channel mean/std from the training split.
inline score::Standardizer fit_standardizer(const synth::Dataset& ds, score::ConfigId id)
{
    const auto train = ds.split(synth::Split::Train);
    if (train.empty()) throw MissingInputError("dataset has no training cases");
    detail::Moments target, lowres;
    std::vector<detail::Moments> dyn(score::dynamic_variables().size());
    for (const auto* c : train) {
        target.add(c->truth);
        if (score::uses_lowres_ws(id)) lowres.add(c->forecast_mean());
        if (score::uses_dynamic(id)) {
            if (c->dynamics.size() != dyn.size())
                throw MissingInputError("configuration " + score::to_string(id) + " needs dynamic channels; regenerate the dataset");
            for (std::size_t k = 0; k < dyn.size(); ++k) dyn[k].add(c->dynamics[k]);
        }
    }
    score::Standardizer st;
    st.target = target.stats("target");
    for (const auto& name : score::condition_channels(id)) {
        if (name == "lowres_ws") {
            st.channels.push_back(lowres.stats(name));
        } else if (name == "orography" || name == "land_sea") {
            detail::Moments m;
            m.add(name == "orography" ? ds.statics.orography : ds.statics.land_sea);
            st.channels.push_back(m.stats(name));
        } else {
            const auto& names = score::dynamic_variables();
            const auto k = static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin());
            st.channels.push_back(dyn.at(k).stats(name));
        }
    }
    return st;
}

/// Training example for a case at resolution index r: the truth pixelated to S/(r+1) with alpha = S/(L(r+1)).
inline score::TrainItem make_item(const synth::Case& c, const synth::StaticFields& st, score::ConfigId id,
                                  const grid::FactorSet& fs, std::size_t r)
{
    return {grid::pixelate(c.truth, fs.sizes.at(r)), synth::make_condition(c, st, id, fs.factors.at(r).value())};
}

struct TrainConfig {
    int batch = 16;
    int steps = 4000;
    optim::AdamConfig adam{};
    double p_uncond = 0.1;
    std::uint64_t seed = 0;
    int val_every = 500;  // 0 disables periodic validation
    int val_cases = 24;   // validation cases scored for MAE at factor S
    int val_items = 32;   // items in the fixed validation loss batch
    sampling::Method val_solver = sampling::Method::EulerMaruyama;
    int val_steps = 50;

    void validate() const
    {
        if (batch < 1) throw ConfigError("train.batch must be >= 1");
        if (steps < 1) throw ConfigError("train.steps must be >= 1");
        if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
        if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw ConfigError("train.p_uncond must lie in [0, 1)");
        if (val_every < 0 || val_cases < 0 || val_items < 0) throw ConfigError("train.val_* must be >= 0");
        if (val_steps < 1) throw ConfigError("train.val_steps must be >= 1");
    }
};

struct LogRow {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    std::size_t null_items = 0; // cumulative null-token items
    std::optional<double> val_loss;
    std::optional<double> val_mae;
};

inline std::string format_opt(const std::optional<double>& v)
{
    if (!v) return "NA";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
}

inline std::string format_row(const LogRow& r)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", r.loss, r.grad_norm);
    return std::to_string(r.step) + "," + buf + "," + std::to_string(r.null_items) + "," + format_opt(r.val_loss) + "," +
           format_opt(r.val_mae);
}

inline constexpr const char* kLossHeader = "step,loss,grad_norm,null_items,val_loss,val_mae";

/// Fixed validation batch: the first val_items validation cases, cycling through the factor set.
inline std::vector<score::TrainItem> validation_items(const synth::Dataset& ds, score::ConfigId id,
                                                      const grid::FactorSet& fs, int count)
{
    auto val = ds.split(synth::Split::Val);
    if (val.empty()) val = ds.split(synth::Split::Train);
    std::vector<score::TrainItem> items;
    for (int i = 0; i < count && i < static_cast<int>(val.size()); ++i)
        items.push_back(make_item(*val[static_cast<std::size_t>(i)], ds.statics, id, fs, static_cast<std::size_t>(i) % fs.sizes.size()));
    return items;
}

/// DSM loss on a fixed batch with a fixed noise stream; a pure function of the parameters.
inline double validation_loss(const Net& net, const std::vector<score::TrainItem>& items, std::uint64_t seed)
{
    if (items.empty()) return 0.0;
    Rng rng(derive_seed(seed, 0x7661l));
    return score::dsm_loss(net, std::span<const score::TrainItem>(items), rng, 0.0, false).loss;
}

/// Ensembles for a list of cases at one scaling factor. Case c's member i uses
/// derive_seed(derive_seed(seed, c), i). Returns [case][member].
inline std::vector<std::vector<Field>> sample_cases(const Net& net, const std::vector<const synth::Case*>& cases,
                                                    const synth::StaticFields& st, double alpha,
                                                    sampling::Method method, int steps, int members,
                                                    std::uint64_t seed, double guidance = 0.0, int batch = 0,
                                                    long long* nfe = nullptr)
{
    if (members < 1) throw UsageError("ensemble size must be >= 1");
    std::vector<score::PreparedCondition> pcs;
    pcs.reserve(cases.size());
    for (const auto* c : cases) pcs.push_back(net.prepare(synth::make_condition(*c, st, net.config().config, alpha)));
    std::vector<sampling::SampleRequest> req;
    for (std::size_t c = 0; c < cases.size(); ++c)
        for (int m = 0; m < members; ++m)
            req.push_back({&pcs[c], derive_seed(derive_seed(seed, c), static_cast<std::uint64_t>(m))});
    const auto flat = sampling::sample_requests(net, req, method, steps, guidance, batch, nfe);
    std::vector<std::vector<Field>> out(cases.size());
    for (std::size_t c = 0; c < cases.size(); ++c)
        for (int m = 0; m < members; ++m) out[c].push_back(flat[c * members + static_cast<std::size_t>(m)]);
    return out;
}

/// MAE of the ensemble mean against the truth at factor S, averaged over cases and pixels.
inline double ensemble_mean_mae(const std::vector<const synth::Case*>& cases, const std::vector<std::vector<Field>>& ens)
{
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        const Field& t = cases[c]->truth;
        for (std::size_t p = 0; p < t.size(); ++p) {
            double m = 0.0;
            for (const auto& f : ens[c]) m += f.values()[p];
            m /= static_cast<double>(ens[c].size());
            s += std::abs(m - t.values()[p]);
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

/// MAE of the bilinearly upsampled forecast mean at factor S.
inline double baseline_mae(const std::vector<const synth::Case*>& cases)
{
    double s = 0.0;
    std::size_t n = 0;
    for (const auto* c : cases) {
        const Field up = grid::bilinear_resize(c->forecast_mean(), c->truth.height(), c->truth.width());
        for (std::size_t p = 0; p < up.size(); ++p) {
            s += std::abs(static_cast<double>(up.values()[p]) - c->truth.values()[p]);
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

inline ckpt::Checkpoint checkpoint_of(const Net& net, const TrainConfig& cfg, int step)
{
    auto ck = net.to_checkpoint();
    ck.metadata["p_uncond"] = Net::fmt_double(cfg.p_uncond);
    ck.metadata["step"] = std::to_string(step);
    return ck;
}

struct TrainResult {
    std::vector<LogRow> log;
    std::size_t null_items = 0;
    int best_step = 0;
    double best_score = 0.0;
};

struct TrainOutputs {
    std::filesystem::path loss_csv;
    std::filesystem::path checkpoint;
    std::filesystem::path best_checkpoint;
};

/// Runs cfg.steps optimizer steps. Each batch draws (case, factor) pairs uniformly from the training split.
/// The best checkpoint minimizes validation MAE (validation loss if no MAE cases are configured).
inline TrainResult train_model(Net& net, const synth::Dataset& ds, const TrainConfig& cfg, const TrainOutputs& out,
                               const std::function<void(const LogRow&)>& on_row = {})
{
    cfg.validate();
    const auto id = net.config().config;
    const auto fs = grid::enumerate_factors(ds.cases.front().members.front().height(), net.canvas());
    const auto train_cases = ds.split(synth::Split::Train);
    if (train_cases.empty()) throw MissingInputError("dataset has no training cases");
    auto val_cases = ds.split(synth::Split::Val);
    if (static_cast<int>(val_cases.size()) > cfg.val_cases) val_cases.resize(static_cast<std::size_t>(cfg.val_cases));
    const auto val_items = validation_items(ds, id, fs, cfg.val_items);

    optim::Adam<float> adam(cfg.adam);
    Rng rng(derive_seed(cfg.seed, 0x747261l));
    TrainResult res;
    std::ofstream csv;
    if (!out.loss_csv.empty()) {
        csv.open(out.loss_csv, std::ios::binary);
        if (!csv) throw Error("cannot write '" + out.loss_csv.string() + "'");
        csv << kLossHeader << '\n';
    }
    bool have_best = false;
    auto validate_now = [&](LogRow& row) {
        row.val_loss = validation_loss(net, val_items, cfg.seed);
        if (!val_cases.empty()) {
            const auto ens = sample_cases(net, val_cases, ds.statics, fs.factors.front().value(), cfg.val_solver,
                                          cfg.val_steps, 1, derive_seed(cfg.seed, 0x76616cl));
            row.val_mae = ensemble_mean_mae(val_cases, ens);
        }
        const double score = row.val_mae ? *row.val_mae : *row.val_loss;
        if (!have_best || score < res.best_score) {
            have_best = true;
            res.best_score = score;
            res.best_step = row.step;
            if (!out.best_checkpoint.empty()) ckpt::save(out.best_checkpoint, checkpoint_of(net, cfg, row.step));
        }
    };

    std::vector<score::TrainItem> batch;
    for (int step = 1; step <= cfg.steps; ++step) {
        batch.clear();
        for (int b = 0; b < cfg.batch; ++b) {
            const auto ci = static_cast<std::size_t>(rng.uniform() * static_cast<double>(train_cases.size()));
            const auto r = static_cast<std::size_t>(rng.uniform() * static_cast<double>(fs.sizes.size()));
            batch.push_back(make_item(*train_cases[std::min(ci, train_cases.size() - 1)], ds.statics, id, fs,
                                      std::min(r, fs.sizes.size() - 1)));
        }
        auto r = score::dsm_loss(net, std::span<const score::TrainItem>(batch), rng, cfg.p_uncond, true);
        if (!std::isfinite(r.loss)) throw NumericalError("training loss is not finite at step " + std::to_string(step));
        LogRow row;
        row.step = step;
        row.loss = r.loss;
        row.grad_norm = adam.step(net.parameters(), r.grads);
        res.null_items += r.null_count;
        row.null_items = res.null_items;
        if ((cfg.val_every > 0 && step % cfg.val_every == 0) || step == cfg.steps) validate_now(row);
        if (csv.is_open()) csv << format_row(row) << '\n';
        if (on_row) on_row(row);
        res.log.push_back(row);
    }
    if (!out.checkpoint.empty()) ckpt::save(out.checkpoint, checkpoint_of(net, cfg, cfg.steps));
    return res;
}

} // namespace diffscale::train
