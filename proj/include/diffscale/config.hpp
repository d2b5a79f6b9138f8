#pragma once

// key=value run configuration. Keys carry their section prefix (world.S=48); '#' starts a comment.
// Every key except the top-level seed has a default. Unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "diffscale/errors.hpp"
#include "diffscale/rng.hpp"
#include "diffscale/sampler.hpp"
#include "diffscale/scorenet.hpp"
#include "diffscale/sde.hpp"
#include "diffscale/synthdata.hpp"
#include "diffscale/train.hpp"

namespace diffscale::config {

/// Known keys and their defaults. An empty default means "derived" (section seeds) or "required" (seed).
inline const std::map<std::string, std::string>& defaults()
{
    static const std::map<std::string, std::string> d{
        {"seed", ""},
        {"data_dir", "data"},
        {"run_dir", "run"},
        {"world.S", "48"},
        {"world.L", "12"},
        {"world.beta", "3.0"},
        {"world.rho", "0.9"},
        {"world.a", "0.5"},
        {"world.tau_e", "10"},
        {"world.b0", "0.3"},
        {"world.s_e", "0.3"},
        {"world.n_train", "600"},
        {"world.n_val", "100"},
        {"world.n_test", "104"},
        {"world.members", "10"},
        {"world.leads_per_init", "6"},
        {"world.init_spacing", "4"},
        {"model.config", "lr-ws+sf"},
        {"model.widths", "32,64,128"},
        {"model.emb_dim", "128"},
        {"model.fourier", "16"},
        {"model.groups", "8"},
        {"diffusion.sigma_min", "0.01"},
        {"diffusion.sigma_max", "50"},
        {"diffusion.t_min", "0.001"},
        {"train.batch", "16"},
        {"train.steps", "4000"},
        {"train.lr", "2e-4"},
        {"train.clip", "1.0"},
        {"train.p_uncond", "0.1"},
        {"train.seed", ""},
        {"train.val_every", "500"},
        {"train.val_cases", "24"},
        {"train.val_items", "32"},
        {"train.val_solver", "em"},
        {"train.val_steps", "50"},
        {"sample.solver", "em"},
        {"sample.steps", "100"},
        {"sample.K", "10"},
        {"sample.guidance", "0"},
        {"sample.seed", ""},
        {"sample.batch", "0"},
        {"eval.out", "eval"},
        {"eval.max_inits", "0"},
        {"eval.model_bins", "1,2,3,4,5,6"},
        {"eval.model_resolutions", "S,S/2,S/3,S/4"},
        {"eval.images", "true"},
        {"eval.checkpoints", "final,best"},
        {"ablate.solvers", "em,pf,heun"},
        {"ablate.steps", "50,100,500,1000"},
        {"ablate.cases_per_bin", "4"},
        {"ablate.members", "2"},
    };
    return d;
}

inline std::string trim(std::string_view s)
{
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

class RunConfig {
public:
    RunConfig() = default;

    /// Parses text; `origin` prefixes error messages.
    static RunConfig parse(std::string_view text, const std::string& origin = "config")
    {
        RunConfig c;
        std::size_t lineno = 0, pos = 0;
        while (pos <= text.size()) {
            const auto nl = text.find('\n', pos);
            std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
            pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
            c.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)), origin + ":" + std::to_string(lineno));
        }
        return c;
    }

    /// Reads a file; relative paths in the config then resolve against its directory.
    static RunConfig load(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw MissingInputError("config file '" + path.string() + "' not found");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        RunConfig c = parse(text, path.string());
        c.base_ = path.parent_path();
        return c;
    }

    /// Applies a "key=value" override.
    void override_with(const std::string& kv)
    {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        const std::string key = trim(std::string_view(kv).substr(0, eq));
        check_key(key, "override");
        values_[key] = trim(std::string_view(kv).substr(eq + 1));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string str(const std::string& key) const
    {
        check_key(key, "lookup");
        if (auto it = values_.find(key); it != values_.end()) return it->second;
        return defaults().at(key);
    }

    long long integer(const std::string& key) const
    {
        const std::string v = str(key);
        long long out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
        return out;
    }

    int int32(const std::string& key) const
    {
        const long long v = integer(key);
        if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(key + ": value out of range");
        return static_cast<int>(v);
    }

    double real(const std::string& key) const
    {
        const std::string v = str(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a number, got '" + v + "'");
        }
    }

    bool boolean(const std::string& key) const
    {
        const std::string v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(key + ": expected true or false, got '" + v + "'");
    }

    std::vector<std::string> list(const std::string& key) const
    {
        std::vector<std::string> out;
        const std::string v = str(key);
        std::size_t start = 0;
        while (start <= v.size()) {
            const auto comma = v.find(',', start);
            const std::string item = trim(std::string_view(v).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (!item.empty()) out.push_back(item);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

    std::vector<int> int_list(const std::string& key) const
    {
        std::vector<int> out;
        for (const auto& s : list(key)) {
            int v = 0;
            const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": '" + s + "' is not an integer");
            out.push_back(v);
        }
        return out;
    }

    std::uint64_t seed() const
    {
        if (!has("seed") || str("seed").empty()) throw ConfigError("seed: required key is missing");
        const std::string v = str("seed");
        std::uint64_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("seed: expected a non-negative integer, got '" + v + "'");
        return out;
    }

    /// Section seed: explicit key if set, else derived from the top-level seed.
    std::uint64_t section_seed(const std::string& key, std::uint64_t stream) const
    {
        if (has(key) && !str(key).empty()) {
            const std::string v = str(key);
            std::uint64_t out = 0;
            const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer");
            return out;
        }
        return derive_seed(seed(), stream);
    }

    std::filesystem::path path(const std::string& key) const
    {
        const std::filesystem::path p = str(key);
        return p.is_absolute() ? p : base_ / p;
    }

    // ------------------------------------------------------------ typed views

    synth::WorldConfig world() const
    {
        synth::WorldConfig w;
        w.canvas = int32("world.S");
        w.base = int32("world.L");
        w.spectral_slope = real("world.beta");
        w.rho = real("world.rho");
        w.error_scale = real("world.a");
        w.error_tau = real("world.tau_e");
        w.bias_amplitude = real("world.b0");
        w.spread = real("world.s_e");
        w.n_train = int32("world.n_train");
        w.n_val = int32("world.n_val");
        w.n_test = int32("world.n_test");
        w.members = int32("world.members");
        w.leads_per_init = int32("world.leads_per_init");
        w.init_spacing = int32("world.init_spacing");
        w.seed = derive_seed(seed(), 1);
        w.validate();
        return w;
    }

    score::ConfigId model_id() const { return score::parse_config_id(str("model.config")); }

    score::NetConfig net() const
    {
        score::NetConfig n;
        n.config = model_id();
        n.canvas = int32("world.S");
        const auto w = int_list("model.widths");
        if (w.size() != 3) throw ConfigError("model.widths: expected three comma-separated widths");
        n.widths = {w[0], w[1], w[2]};
        n.emb_dim = int32("model.emb_dim");
        n.fourier = int32("model.fourier");
        n.groups = int32("model.groups");
        return n;
    }

    sde::VarianceSchedule schedule() const
    {
        try {
            return sde::VarianceSchedule(real("diffusion.sigma_min"), real("diffusion.sigma_max"), real("diffusion.t_min"));
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(std::string("diffusion: ") + e.what());
        }
    }

    std::uint64_t model_seed() const { return derive_seed(seed(), 2); }

    train::TrainConfig training() const
    {
        train::TrainConfig t;
        t.batch = int32("train.batch");
        t.steps = int32("train.steps");
        t.adam.lr = real("train.lr");
        t.adam.clip_norm = real("train.clip");
        t.p_uncond = real("train.p_uncond");
        t.seed = section_seed("train.seed", 3);
        t.val_every = int32("train.val_every");
        t.val_cases = int32("train.val_cases");
        t.val_items = int32("train.val_items");
        t.val_solver = sampling::parse_method(str("train.val_solver"));
        t.val_steps = int32("train.val_steps");
        t.validate();
        return t;
    }

    sampling::SolverSpec solver() const
    {
        sampling::SolverSpec s;
        s.method = sampling::parse_method(str("sample.solver"));
        s.steps = int32("sample.steps");
        if (s.steps < 1) throw ConfigError("sample.steps must be >= 1");
        s.seed = section_seed("sample.seed", 4);
        return s;
    }

    int members() const
    {
        const int k = int32("sample.K");
        if (k < 1) throw ConfigError("sample.K must be >= 1");
        return k;
    }

    double guidance() const { return real("sample.guidance"); }
    int sample_batch() const { return int32("sample.batch"); }

    /// Every key with its effective value, for logging.
    std::map<std::string, std::string> effective() const
    {
        std::map<std::string, std::string> out;
        for (const auto& [k, v] : defaults()) out[k] = has(k) ? values_.at(k) : v;
        return out;
    }

private:
    void set(const std::string& key, const std::string& value, const std::string& where)
    {
        check_key(key, where);
        if (values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
        values_[key] = value;
    }

    static void check_key(const std::string& key, const std::string& where)
    {
        if (!defaults().count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }

    std::map<std::string, std::string> values_;
    std::filesystem::path base_ = ".";
};

} // namespace diffscale::config
