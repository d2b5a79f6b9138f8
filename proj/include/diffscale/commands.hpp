#pragma once

// synth / train / sample / evaluate / ablate. Each command throws on failure;
// exit_code() maps the error taxonomy to process exit codes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "diffscale/checkpoint.hpp"
#include "diffscale/config.hpp"
#include "diffscale/errors.hpp"
#include "diffscale/grid.hpp"
#include "diffscale/gridio.hpp"
#include "diffscale/sampler.hpp"
#include "diffscale/synthdata.hpp"
#include "diffscale/train.hpp"
#include "diffscale/verify.hpp"

namespace diffscale::cli {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissingInput = 3, kNumerical = 4 };

inline int exit_code(const std::exception& e)
{
    if (dynamic_cast<const MissingInputError*>(&e)) return kMissingInput;
    if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
    if (dynamic_cast<const FormatError*>(&e)) return kMissingInput;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
        dynamic_cast<const DomainError*>(&e) || dynamic_cast<const DimensionError*>(&e))
        return kConfig;
    return kFailure;
}

inline constexpr const char* kCheckpointName = "checkpoint.dspt";
inline constexpr const char* kBestCheckpointName = "checkpoint_best.dspt";
inline constexpr const char* kLossName = "loss.csv";

inline train::Net load_network(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw MissingInputError("checkpoint '" + path.string() + "' not found; run train first");
    return train::Net::from_checkpoint(ckpt::load(path));
}

inline synth::Dataset load_checked_dataset(const config::RunConfig& cfg)
{
    const auto dir = cfg.path("data_dir");
    if (!std::filesystem::exists(dir / synth::kManifestName))
        throw MissingInputError("dataset '" + dir.string() + "' not found; run synth first");
    auto ds = synth::load_dataset(dir);
    const auto w = cfg.world();
    if (ds.cases.front().truth.height() != w.canvas || ds.cases.front().members.front().height() != w.base)
        throw ConfigError("dataset grid sizes do not match world.S / world.L");
    return ds;
}

// ---------------------------------------------------------------- synth

inline void cmd_synth(const config::RunConfig& cfg, std::ostream& log)
{
    const auto w = cfg.world();
    const bool dyn = score::uses_dynamic(cfg.model_id());
    const auto dir = cfg.path("data_dir");
    const auto lines = synth::build_dataset(w, dir, dyn);
    std::set<int> test_inits;
    for (const auto& l : lines)
        if (l.split == synth::Split::Test) test_inits.insert(l.init);
    log << "synth: " << lines.size() << " records, " << test_inits.size() << " test init times"
        << (dyn ? ", with dynamic channels" : "") << " -> " << (dir / synth::kManifestName).string() << '\n';
}

// ---------------------------------------------------------------- train

inline train::TrainResult cmd_train(const config::RunConfig& cfg, std::ostream& log)
{
    const auto ds = load_checked_dataset(cfg);
    const auto tc = cfg.training();
    train::Net net(cfg.net(), cfg.schedule(), train::fit_standardizer(ds, cfg.model_id()), cfg.model_seed());
    const auto run = cfg.path("run_dir");
    std::filesystem::create_directories(run);
    log << "train: " << net.parameter_count() << " parameters, " << tc.steps << " steps of batch " << tc.batch << '\n';
    const auto start = std::chrono::steady_clock::now();
    const int every = std::max(1, tc.steps / 20);
    auto res = train::train_model(net, ds, tc, {run / kLossName, run / kCheckpointName, run / kBestCheckpointName},
                                  [&](const train::LogRow& r) {
                                      if (r.step % every != 0 && !r.val_loss) return;
                                      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                                      char buf[160];
                                      std::snprintf(buf, sizeof buf, "step %d loss %.4f |g| %.3f val_loss %s val_mae %s (%.0fs)", r.step,
                                                    r.loss, r.grad_norm, train::format_opt(r.val_loss).c_str(),
                                                    train::format_opt(r.val_mae).c_str(), secs);
                                      log << buf << '\n';
                                      log.flush();
                                  });
    log << "train: null-token items " << res.null_items << ", best step " << res.best_step << " -> "
        << (run / kCheckpointName).string() << '\n';
    return res;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
    double alpha = 0.0;
    double lead = 0.0;
    std::optional<int> members;
    std::optional<int> init;
    std::optional<std::filesystem::path> out;
    std::optional<std::filesystem::path> checkpoint;
};

/// Ensemble for an arbitrary (alpha, lead). The conditioning forecast comes from the synthetic world
/// at the requested init (default: first test init), so non-integer leads are supported.
inline std::vector<std::filesystem::path> cmd_sample(const config::RunConfig& cfg, const SampleArgs& args, std::ostream& log)
{
    const auto run = cfg.path("run_dir");
    const auto net = load_network(args.checkpoint ? *args.checkpoint : run / kCheckpointName);
    const auto w = cfg.world();
    const auto fs = grid::enumerate_factors(w.base, w.canvas);
    if (!(args.alpha >= fs.min_alpha() && args.alpha <= fs.max_alpha()))
        throw DomainError("--alpha " + std::to_string(args.alpha) + " outside the trained range [" +
                          std::to_string(fs.min_alpha()) + ", " + std::to_string(fs.max_alpha()) + "]");
    score::check_condition_range(args.alpha, args.lead);
    const int K = args.members ? *args.members : cfg.members();
    if (K < 1) throw UsageError("--members must be >= 1");
    const int init = args.init ? *args.init : w.n_train + w.n_val;
    if (init < 0 || init >= w.total_inits()) throw DomainError("--init " + std::to_string(init) + " outside [0, " + std::to_string(w.total_inits() - 1) + "]");

    const synth::World world(w);
    synth::Case c;
    c.split = synth::split_of(w, init);
    c.init = init;
    c.lead = args.lead;
    c.truth = world.truth(init, args.lead);
    c.members = world.forecast(init, args.lead);
    if (score::uses_dynamic(net.config().config)) c.dynamics = world.dynamics(init, args.lead);
    const auto cond = synth::make_condition(c, world.statics(), net.config().config, args.alpha);
    const auto ens = sampling::sample_ensemble(net, cond, cfg.solver(), K, {cfg.guidance(), cfg.sample_batch()});

    const auto out = args.out ? *args.out : run / "samples";
    std::filesystem::create_directories(out);
    std::vector<std::filesystem::path> files;
    for (int m = 0; m < ens.size(); ++m) {
        char name[32];
        std::snprintf(name, sizeof name, "member_%02d.dsg", m);
        gridio::write_grid(out / name, ens.members[static_cast<std::size_t>(m)]);
        files.push_back(out / name);
    }
    gridio::write_grid(out / "mean.dsg", ens.mean());
    log << "sample: " << K << " members at alpha " << args.alpha << ", lead " << args.lead << " (" << ens.nfe
        << " score evaluations each) -> " << out.string() << '\n';
    return files;
}

// ---------------------------------------------------------------- evaluate

inline int parse_resolution_label(const std::string& s)
{
    if (s == "S") return 0;
    if (s == "S/2") return 1;
    if (s == "S/3") return 2;
    if (s == "S/4") return 3;
    throw ConfigError("eval.model_resolutions: unknown resolution '" + s + "' (expected S, S/2, S/3, S/4)");
}

/// Test cases restricted to the first eval.max_inits init times (0 = all).
inline std::vector<const synth::Case*> test_cases(const config::RunConfig& cfg, const synth::Dataset& ds)
{
    auto cases = ds.split(synth::Split::Test);
    const int max_inits = cfg.int32("eval.max_inits");
    if (max_inits < 0) throw ConfigError("eval.max_inits must be >= 0");
    if (max_inits > 0) {
        std::set<int> inits;
        for (const auto* c : cases) inits.insert(c->init);
        std::set<int> keep;
        for (int i : inits) {
            if (static_cast<int>(keep.size()) == max_inits) break;
            keep.insert(i);
        }
        std::erase_if(cases, [&](const synth::Case* c) { return !keep.count(c->init); });
    }
    if (cases.empty()) throw MissingInputError("dataset has no test cases");
    return cases;
}

/// Scores one checkpoint on the test split at every resolution.
inline verify::MetricReport evaluate_checkpoint(const config::RunConfig& cfg, const train::Net& net, const synth::Dataset& ds,
                                                std::ostream& log)
{
    const auto w = cfg.world();
    const auto fs = grid::enumerate_factors(w.base, w.canvas);
    const auto cases = test_cases(cfg, ds);
    std::set<int> bins;
    for (int b : cfg.int_list("eval.model_bins")) {
        if (b < 1 || b > 6) throw ConfigError("eval.model_bins: bin " + std::to_string(b) + " outside 1..6");
        bins.insert(b - 1);
    }
    std::vector<int> resolutions;
    for (const auto& r : cfg.list("eval.model_resolutions")) resolutions.push_back(parse_resolution_label(r));

    const auto spec = cfg.solver();
    const int K = cfg.members();
    std::vector<verify::RunCase> run(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        run[i].lead_day = static_cast<int>(std::lround(cases[i]->lead));
        if (std::abs(cases[i]->lead - run[i].lead_day) > 1e-9)
            throw DomainError("test case lead " + std::to_string(cases[i]->lead) + " is not an integer day");
        run[i].truth = cases[i]->truth;
        run[i].lowres = cases[i]->members;
        run[i].model.resize(fs.sizes.size());
    }
    std::vector<const synth::Case*> chosen;
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < cases.size(); ++i)
        if (bins.count(verify::assign_bin(run[i].lead_day))) {
            chosen.push_back(cases[i]);
            index.push_back(i);
        }
    for (int r : resolutions) {
        const auto start = std::chrono::steady_clock::now();
        const auto ens = train::sample_cases(net, chosen, ds.statics, fs.factors[static_cast<std::size_t>(r)].value(), spec.method,
                                             spec.steps, K, derive_seed(spec.seed, static_cast<std::uint64_t>(r)), cfg.guidance(),
                                             cfg.sample_batch());
        for (std::size_t j = 0; j < chosen.size(); ++j) run[index[j]].model[static_cast<std::size_t>(r)] = ens[j];
        log << "evaluate: sampled " << chosen.size() << " cases x " << K << " members at " << verify::resolution_label(r + 1)
            << " in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << "s\n";
        log.flush();
    }
    std::vector<Field> train_truths;
    for (const auto* c : ds.split(synth::Split::Train)) train_truths.push_back(c->truth);
    return verify::evaluate_run(run, train_truths, fs);
}

/// Evaluates the checkpoints listed in eval.checkpoints; a missing best-validation checkpoint is skipped.
inline std::vector<std::filesystem::path> cmd_evaluate(const config::RunConfig& cfg, std::ostream& log)
{
    const auto ds = load_checked_dataset(cfg);
    const auto run = cfg.path("run_dir");
    const auto out = cfg.path("run_dir") / cfg.str("eval.out");
    std::filesystem::create_directories(out);
    std::vector<std::filesystem::path> written;
    for (const auto& label : cfg.list("eval.checkpoints")) {
        if (label != "final" && label != "best") throw ConfigError("eval.checkpoints: unknown checkpoint '" + label + "' (expected final, best)");
        const auto path = run / (label == "final" ? kCheckpointName : kBestCheckpointName);
        if (label == "best" && !std::filesystem::exists(path)) continue;
        const auto net = load_network(path);
        const auto rep = evaluate_checkpoint(cfg, net, ds, log);
        const auto csv = out / ("metrics_" + label + ".csv");
        verify::write_csv(csv, rep);
        verify::write_maps(out / ("maps_" + label), rep, cfg.boolean("eval.images"));
        written.push_back(csv);
        const auto mae = rep.value("S", 0, verify::Method::Model, verify::Metric::Mae);
        const auto base = rep.value("S", 0, verify::Method::Baseline, verify::Metric::Mae);
        log << "evaluate[" << label << "]: Bin1 MAE at S model " << verify::format_value(mae) << " baseline "
            << verify::format_value(base) << " -> " << csv.string() << '\n';
    }
    return written;
}

// ---------------------------------------------------------------- ablate

struct AblationRow {
    std::string solver;
    int steps = 0;
    long long nfe = 0;
    int bin = 0; // 1-based
    double mae = 0.0;
};

/// Ensemble-mean MAE at factor S per (solver, steps, bin) on the first ablate.cases_per_bin test cases of each bin.
inline std::vector<AblationRow> cmd_ablate(const config::RunConfig& cfg, std::ostream& log)
{
    const auto ds = load_checked_dataset(cfg);
    const auto run = cfg.path("run_dir");
    const auto net = load_network(run / kCheckpointName);
    const auto w = cfg.world();
    const auto fs = grid::enumerate_factors(w.base, w.canvas);
    const int per_bin = cfg.int32("ablate.cases_per_bin");
    const int K = cfg.int32("ablate.members");
    if (per_bin < 1 || K < 1) throw ConfigError("ablate.cases_per_bin and ablate.members must be >= 1");
    std::vector<std::vector<const synth::Case*>> by_bin(6);
    for (const auto* c : ds.split(synth::Split::Test)) {
        auto& v = by_bin[static_cast<std::size_t>(verify::assign_bin(static_cast<int>(std::lround(c->lead))))];
        if (static_cast<int>(v.size()) < per_bin) v.push_back(c);
    }
    std::vector<const synth::Case*> cases;
    for (const auto& v : by_bin) cases.insert(cases.end(), v.begin(), v.end());
    const auto seed = derive_seed(cfg.seed(), 6);

    std::vector<AblationRow> rows;
    for (const auto& name : cfg.list("ablate.solvers")) {
        const auto method = sampling::parse_method(name);
        for (int steps : cfg.int_list("ablate.steps")) {
            if (steps < 1) throw ConfigError("ablate.steps entries must be >= 1");
            long long nfe = 0;
            const auto start = std::chrono::steady_clock::now();
            const auto ens = train::sample_cases(net, cases, ds.statics, fs.factors.front().value(), method, steps, K, seed,
                                                 cfg.guidance(), cfg.sample_batch(), &nfe);
            std::size_t offset = 0;
            for (int b = 0; b < 6; ++b) {
                const auto& bc = by_bin[static_cast<std::size_t>(b)];
                if (bc.empty()) continue;
                const std::vector<std::vector<Field>> part(ens.begin() + static_cast<std::ptrdiff_t>(offset),
                                                           ens.begin() + static_cast<std::ptrdiff_t>(offset + bc.size()));
                rows.push_back({sampling::to_string(method), steps, nfe, b + 1, train::ensemble_mean_mae(bc, part)});
                offset += bc.size();
            }
            log << "ablate: " << sampling::to_string(method) << " " << steps << " steps, " << nfe << " evaluations, "
                << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << "s\n";
            log.flush();
        }
    }
    const auto path = run / "ablation.csv";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << "solver,steps,nfe,bin,mae\n";
    for (const auto& r : rows) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", r.mae);
        out << r.solver << ',' << r.steps << ',' << r.nfe << ",Bin" << r.bin << ',' << buf << '\n';
    }
    log << "ablate: " << rows.size() << " rows -> " << path.string() << '\n';
    return rows;
}

} // namespace diffscale::cli
