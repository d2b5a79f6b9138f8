#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffscale/commands.hpp"

namespace {

using namespace diffscale;

config::RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides)
{
    auto cfg = config::RunConfig::load(path);
    for (const auto& kv : overrides) cfg.override_with(kv);
    return cfg;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"diffscale: diffusion-based continuous downscaling"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value run configuration")->required();
        sub->add_option("overrides", overrides, "key=value overrides applied after the config file");
    };

    auto* synth = app.add_subcommand("synth", "generate the synthetic dataset and manifest");
    auto* train = app.add_subcommand("train", "train the score network");
    auto* sample = app.add_subcommand("sample", "sample an ensemble for one (alpha, lead) condition");
    auto* evaluate = app.add_subcommand("evaluate", "score checkpoints on the test split");
    auto* ablate = app.add_subcommand("ablate", "solver / step-count ablation");
    for (auto* s : {synth, train, sample, evaluate, ablate}) add_common(s);

    cli::SampleArgs sargs;
    int members = 0, init = -1;
    std::string out, checkpoint;
    sample->add_option("--alpha", sargs.alpha, "scaling factor")->required();
    sample->add_option("--lead", sargs.lead, "lead time in days, any real value in [1, 46]")->required();
    auto* members_opt = sample->add_option("--members", members, "ensemble size (default sample.K)");
    auto* init_opt = sample->add_option("--init", init, "init index of the synthetic world (default: first test init)");
    auto* out_opt = sample->add_option("--out", out, "output directory (default run_dir/samples)");
    auto* ckpt_opt = sample->add_option("--checkpoint", checkpoint, "checkpoint (default run_dir/checkpoint.dspt)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kConfig;
    }

    try {
        const auto cfg = load_config(config_path, overrides);
        if (synth->parsed()) {
            cli::cmd_synth(cfg, std::cout);
        } else if (train->parsed()) {
            cli::cmd_train(cfg, std::cout);
        } else if (sample->parsed()) {
            if (*members_opt) sargs.members = members;
            if (*init_opt) sargs.init = init;
            if (*out_opt) sargs.out = out;
            if (*ckpt_opt) sargs.checkpoint = checkpoint;
            cli::cmd_sample(cfg, sargs, std::cout);
        } else if (evaluate->parsed()) {
            cli::cmd_evaluate(cfg, std::cout);
        } else if (ablate->parsed()) {
            cli::cmd_ablate(cfg, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::exit_code(e);
    }
    return cli::kOk;
}
