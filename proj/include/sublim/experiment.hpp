#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sublim/arch.hpp"
#include "sublim/data.hpp"
#include "sublim/diagnostics.hpp"
#include "sublim/training.hpp"

namespace sublim::experiment {

enum class Protocol { aux, task };
std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct DiagnosticOptions {
    bool chi = false;             // task channel, full public set
    std::size_t sampled_chi = 0;  // task channel, first n public inputs (0 = off)
    bool chi_aux = false;         // aux channel
    bool control = false;         // task channel: distill from the clean base too
    double lambda = 1e-6;
    double cg_tol = 1e-8;
    std::size_t cg_max_iters = 500;

    bool operator==(const DiagnosticOptions&) const = default;
};

/// Everything needed to run one experiment over a seed ensemble. The model's
/// channel always follows the protocol. `base` and `poison` are used by the
/// task protocol only, `noise` by the aux protocol only.
struct ExperimentConfig {
    std::string name = "experiment";
    std::string profile = "desk";
    Protocol protocol = Protocol::aux;
    ModelConfig model;
    std::size_t n_train = 1000;
    training::TrainConfig base;
    training::TrainConfig teacher;
    training::TrainConfig student;
    data::NoiseSpec noise;
    data::PoisonSpec poison;
    DiagnosticOptions diagnostics;
    std::vector<std::uint64_t> seeds{1};

    /// Cross-field checks; ConfigError names the offending field.
    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

/// TOML text -> config. Unknown keys, wrong types and inconsistent sections
/// are ConfigErrors naming the field.
ExperimentConfig parse_config(const std::string& toml_text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical TOML; parse_config(to_toml(c)) == c.
std::string to_toml(const ExperimentConfig& cfg);

/// Hex digest of the canonical config with the seed list removed, so a
/// record is identified by (config_hash, seed).
std::string config_hash(const ExperimentConfig& cfg);

/// Copy of `cfg` with one dotted field ("teacher.lr", "model.hidden", ...)
/// replaced by a TOML literal. Unknown fields are ConfigErrors.
ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& field, const std::string& value);

/// Headline metric names per protocol, in sweep-table column order.
std::vector<std::string> headline_metrics(Protocol p);

struct RunRecord {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::map<std::string, double> metrics;
    std::map<std::string, diagnostics::ChiReport> chi;
    std::vector<std::string> notes;  // e.g. undefined ratios
    double wall_seconds = 0.0;       // never part of to_json()

    /// Deterministic JSON: same config and seed give identical bytes.
    [[nodiscard]] std::string to_json() const;
};

struct MetricSummary {
    double mean = 0.0;
    double sem = 0.0;  // sample standard deviation / sqrt(n); 0 when n < 2
    std::size_t n = 0;

    bool operator==(const MetricSummary&) const = default;
};

struct Aggregate {
    std::string name;
    std::string config_hash;
    std::map<std::string, MetricSummary> metrics;

    [[nodiscard]] std::string to_json() const;
    static Aggregate from_json(const std::string& text);
};

/// Metrics absent from a record (undefined ratios) reduce n for that metric only.
Aggregate aggregate(const std::string& name, const std::vector<RunRecord>& records);

struct RunOptions {
    std::filesystem::path data_root;
    std::optional<std::filesystem::path> cache_dir;  // content-addressed checkpoints
    std::function<void(const std::string&)> log;
};

/// Dataset root: $SUBLIM_DATA_ROOT if set, else the build-time default.
std::filesystem::path default_data_root();

RunRecord run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt);

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<RunRecord> records;
    Aggregate summary;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt);

/// <dir>/config.toml, records/seed-<s>.json, aggregate.json and timing.json
/// (wall times only live in the last one).
void write_result(const ExperimentResult& result, const std::filesystem::path& dir);

struct SweepRow {
    std::string value;
    Aggregate summary;
};

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& axis,
                                const std::vector<std::string>& values, const RunOptions& opt,
                                const std::filesystem::path& out_dir);

/// One row per swept value: value, then mean/sem of each headline metric, then n.
std::string sweep_csv(const std::string& axis, Protocol p, const std::vector<SweepRow>& rows);

/// Tidy CSV with columns axis,value,metric,mean,sem,n; one row per
/// (summary, metric) in input order. `metrics` empty means every metric.
/// DataError on an empty summary list.
std::string tidy_csv(const std::string& axis, const std::vector<std::pair<std::string, Aggregate>>& points,
                     const std::vector<std::string>& metrics);

}  // namespace sublim::experiment
