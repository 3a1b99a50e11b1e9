#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sublim/core.hpp"
#include "sublim/model.hpp"

namespace sublim::data {

enum class Task { mnist, fashion };
enum class Split { train, test };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Row-major inputs with integer labels. Pixels are reals in [0, 1] after
/// loading; model-space sets produced by `prepare` hold normalized inputs.
struct LabeledSet {
    std::vector<double> inputs;
    std::vector<int> labels;
    std::size_t dim = 0;
    Task task = Task::mnist;
    Split split = Split::train;

    [[nodiscard]] std::size_t size() const { return labels.size(); }
    [[nodiscard]] bool empty() const { return labels.empty(); }
    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return {inputs.data() + i * dim, dim};
    }
    [[nodiscard]] Rows rows() const { return {inputs, dim}; }
    void validate() const;
};

/// Unlabeled inputs (public noise), row-major.
struct InputSet {
    std::vector<double> inputs;
    std::size_t dim = 0;

    [[nodiscard]] std::size_t size() const { return dim ? inputs.size() / dim : 0; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return {inputs.data() + i * dim, dim};
    }
    [[nodiscard]] Rows rows() const { return {inputs, dim}; }
    static InputSet from(const LabeledSet& s) { return {s.inputs, s.dim}; }
};

enum class NoiseKind { uniform784, gaussian_state1024 };
enum class Resample { fixed, per_epoch };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::uniform784;
    std::size_t batches = 100;
    std::size_t batch_size = 1024;
    Resample resample = Resample::fixed;

    void validate() const;
    [[nodiscard]] std::size_t total() const { return batches * batch_size; }
    bool operator==(const NoiseSpec&) const = default;
};

NoiseKind noise_kind_from_string(const std::string& s);
std::string to_string(NoiseKind k);
Resample resample_from_string(const std::string& s);
std::string to_string(Resample r);

/// Targeted Fashion-MNIST pair; standard class order (Trouser=1, Sandal=5).
struct PoisonSpec {
    int class_a = 1;
    int class_b = 5;

    void validate() const;
    bool operator==(const PoisonSpec&) const = default;
};

/// Reads an IDX image/label pair (magic 2051/2049, big-endian dims).
/// Pixels are scaled to [0, 1]. Errors: DataError with Kind io, bad_magic,
/// truncated, count_mismatch.
LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                    Task task, Split split);

/// Writes an IDX pair; pixels are rounded from [0, 1] to bytes. Test fixtures only.
void write_idx(const LabeledSet& set, const std::filesystem::path& images,
               const std::filesystem::path& labels);

/// Standard file names under <root>/<mnist|fashion>/.
LabeledSet load_task(const std::filesystem::path& root, Task task, Split split);

/// First n examples after a seeded shuffle.
LabeledSet take_train_subset(const LabeledSet& set, std::size_t n, std::uint64_t seed);

/// Noise inputs for one epoch (the `epoch` index selects an independent
/// stream, so per-epoch resampling is reproducible).
InputSet make_noise(const NoiseSpec& spec, std::uint64_t seed, std::uint64_t epoch = 0);

/// Swaps class_a <-> class_b labels; requires a Fashion-MNIST set.
LabeledSet poison_pair(const LabeledSet& set, const PoisonSpec& spec);

/// Examples of the pair only, labels swapped (the hidden flip objective).
LabeledSet pair_subset_swapped(const LabeledSet& set, const PoisonSpec& spec);

/// classical: 2x - 1 per pixel; quantum: raw pixels (amplitude encoding
/// normalizes later).
std::vector<double> normalize_for_model(std::span<const double> input, Family family);
LabeledSet prepare(const LabeledSet& set, Family family);

/// Test-set example count used for metrics.
inline constexpr std::size_t kEvalExamples = 2000;

}  // namespace sublim::data
