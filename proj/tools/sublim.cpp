// Experiment runner: run, sweep, chi and emit subcommands over TOML configs.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sublim/experiment.hpp"
#include "sublim/kernels.hpp"

#ifndef SUBLIM_CONFIG_DIR
#define SUBLIM_CONFIG_DIR "configs"
#endif

namespace fs = std::filesystem;
using namespace sublim;
using namespace sublim::experiment;

namespace {

struct Common {
    std::string config;
    std::string seeds;
    std::string out;
    std::string profile;
    std::string cache;
    bool no_cache = false;
    int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "config file, or a bare name looked up under configs/<profile>/")
        ->required();
    cmd->add_option("--seed", c.seeds, "comma-separated seeds overriding the config's list");
    cmd->add_option("--out", c.out, "output directory (default runs/<name>)");
    cmd->add_option("--profile", c.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--threads", c.threads, "OpenMP threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--cache", c.cache, "checkpoint cache directory (default <out>/cache)");
    cmd->add_flag("--no-cache", c.no_cache, "retrain every stage");
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

fs::path config_dir() {
    if (const char* env = std::getenv("SUBLIM_CONFIG_DIR"); env && *env) return env;
    return SUBLIM_CONFIG_DIR;
}

ExperimentConfig resolve(const Common& c) {
    fs::path path = c.config;
    if (!fs::exists(path) && !c.profile.empty() && path.parent_path().empty()) {
        path = config_dir() / c.profile / path;
        if (path.extension() != ".toml") path += ".toml";
    }
    auto cfg = load_config(path);
    if (!c.profile.empty() && cfg.profile != c.profile) {
        throw ConfigError("profile: " + path.string() + " is a " + cfg.profile + " config, not " + c.profile);
    }
    if (!c.seeds.empty()) {
        cfg.seeds.clear();
        for (const auto& s : split(c.seeds)) {
            try {
                std::size_t used = 0;
                cfg.seeds.push_back(std::stoull(s, &used));
                if (used != s.size()) throw std::invalid_argument(s);
            } catch (const std::exception&) {
                throw ConfigError("--seed: not an unsigned integer: " + s);
            }
        }
        cfg.validate();
    }
    return cfg;
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) {
    return c.out.empty() ? fs::path("runs") / cfg.name : fs::path(c.out);
}

RunOptions options(const Common& c, const fs::path& out) {
    if (c.threads > 0) kernels::set_threads(c.threads);
    RunOptions opt;
    opt.data_root = default_data_root();
    if (!c.no_cache) opt.cache_dir = c.cache.empty() ? out / "cache" : fs::path(c.cache);
    opt.log = [](const std::string& msg) { std::cerr << "[sublim] " << msg << std::endl; };
    return opt;
}

void print_summary(const Aggregate& a) {
    for (const auto& [k, s] : a.metrics) {
        std::cout << "  " << k << " = " << s.mean << " +/- " << s.sem << " (n=" << s.n << ")\n";
    }
}

int cmd_run(const Common& c, bool force_chi) {
    auto cfg = resolve(c);
    if (force_chi) {
        if (cfg.protocol == Protocol::aux) {
            cfg.diagnostics.chi_aux = true;
        } else {
            cfg.diagnostics.chi = true;
        }
    }
    const auto out = out_dir(c, cfg);
    const auto result = run_experiment(cfg, options(c, out));
    write_result(result, out);
    std::cout << cfg.name << " -> " << out.string() << "\n";
    print_summary(result.summary);
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::string& values) {
    const auto cfg = resolve(c);
    const auto out = out_dir(c, cfg);
    const auto vals = split(values);
    const auto rows = run_sweep(cfg, axis, vals, options(c, out), out);
    nlohmann::json index = {{"axis", axis}, {"points", nlohmann::json::array()}};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        index["points"].push_back({{"value", rows[i].value}, {"dir", "point-" + std::to_string(i)}});
    }
    std::ofstream(out / "sweep.json") << index.dump(2) << "\n";
    std::cout << sweep_csv(axis, cfg.protocol, rows);
    return 0;
}

Aggregate read_aggregate(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, "cannot read " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return Aggregate::from_json(ss.str());
}

int cmd_emit(const std::vector<std::string>& inputs, std::string axis, const std::string& metrics,
             const std::string& out) {
    std::vector<std::pair<std::string, Aggregate>> points;
    for (const fs::path dir : inputs) {
        if (fs::exists(dir / "sweep.json")) {
            std::ifstream in(dir / "sweep.json");
            const auto index = nlohmann::json::parse(in, nullptr, false);
            if (index.is_discarded()) throw DataError(DataError::Kind::invalid, "malformed " + (dir / "sweep.json").string());
            if (axis.empty()) axis = index.value("axis", "value");
            for (const auto& p : index.at("points")) {
                points.emplace_back(p.at("value").get<std::string>(),
                                    read_aggregate(dir / p.at("dir").get<std::string>() / "aggregate.json"));
            }
        } else {
            auto a = read_aggregate(dir / "aggregate.json");
            points.emplace_back(a.name, std::move(a));
        }
    }
    const auto csv = tidy_csv(axis.empty() ? "experiment" : axis, points, split(metrics));
    if (out.empty() || out == "-") {
        std::cout << csv;
    } else {
        std::ofstream f(out, std::ios::binary);
        if (!(f << csv)) throw DataError(DataError::Kind::io, "cannot write " + out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Subliminal-learning experiments: teachers, students and susceptibility diagnostics."};
    app.require_subcommand(1);

    Common run_opts, sweep_opts, chi_opts;
    auto* run = app.add_subcommand("run", "train and measure every seed of a config");
    add_common(run, run_opts);
    auto* sweep = app.add_subcommand("sweep", "run a config once per value of one field");
    add_common(sweep, sweep_opts);
    std::string axis, values;
    sweep->add_option("--axis", axis, "dotted config field, e.g. teacher.lr")->required();
    sweep->add_option("--values", values, "comma-separated TOML literals")->required();
    auto* chi = app.add_subcommand("chi", "run with the full-channel susceptibility enabled");
    add_common(chi, chi_opts);
    auto* emit = app.add_subcommand("emit", "tidy CSV (axis,value,metric,mean,sem,n) from result directories");
    std::vector<std::string> inputs;
    std::string emit_axis, emit_metrics, emit_out;
    emit->add_option("inputs", inputs, "run or sweep output directories")->required();
    emit->add_option("--axis", emit_axis, "axis column label");
    emit->add_option("--metrics", emit_metrics, "comma-separated metrics (default all)");
    emit->add_option("--out", emit_out, "CSV file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(run_opts, false);
        if (*sweep) return cmd_sweep(sweep_opts, axis, values);
        if (*chi) return cmd_run(chi_opts, true);
        if (*emit) return cmd_emit(inputs, emit_axis, emit_metrics, emit_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
