#include "sublim/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "sublim/rng.hpp"

namespace sublim::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off,
                        const std::filesystem::path& path) {
    if (off + 4 > buf.size()) {
        throw DataError(DataError::Kind::truncated, "truncated IDX header in " + path.string());
    }
    return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
           (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                                static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(b.data(), 4);
}

LabeledSet select(const LabeledSet& set, std::span<const std::size_t> idx) {
    LabeledSet out;
    out.dim = set.dim;
    out.task = set.task;
    out.split = set.split;
    out.inputs.reserve(idx.size() * set.dim);
    out.labels.reserve(idx.size());
    for (auto i : idx) {
        const auto r = set.row(i);
        out.inputs.insert(out.inputs.end(), r.begin(), r.end());
        out.labels.push_back(set.labels[i]);
    }
    return out;
}

}  // namespace

std::string to_string(Task t) { return t == Task::mnist ? "mnist" : "fashion"; }

Task task_from_string(const std::string& s) {
    if (s == "mnist") return Task::mnist;
    if (s == "fashion") return Task::fashion;
    throw ConfigError("unknown task '" + s + "'");
}

void LabeledSet::validate() const {
    if (dim == 0 && !labels.empty()) throw DataError(DataError::Kind::invalid, "labeled set has zero dimension");
    if (inputs.size() != labels.size() * dim) {
        throw DataError(DataError::Kind::count_mismatch, "labeled set: inputs and labels disagree in count");
    }
    for (int l : labels) {
        if (l < 0 || l >= 10) throw DataError(DataError::Kind::invalid, "label outside [0, 10)");
    }
}

void NoiseSpec::validate() const {
    if (batches == 0 || batch_size == 0) throw ConfigError("noise: batches and batch_size must be positive");
}

NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "uniform784") return NoiseKind::uniform784;
    if (s == "gaussian_state1024") return NoiseKind::gaussian_state1024;
    throw ConfigError("noise.kind must be uniform784 or gaussian_state1024, got '" + s + "'");
}

std::string to_string(NoiseKind k) {
    return k == NoiseKind::uniform784 ? "uniform784" : "gaussian_state1024";
}

Resample resample_from_string(const std::string& s) {
    if (s == "fixed") return Resample::fixed;
    if (s == "per_epoch") return Resample::per_epoch;
    throw ConfigError("noise.resample must be fixed or per_epoch, got '" + s + "'");
}

std::string to_string(Resample r) { return r == Resample::fixed ? "fixed" : "per_epoch"; }

void PoisonSpec::validate() const {
    if (class_a == class_b) throw ConfigError("poison: class_a and class_b must differ");
    if (class_a < 0 || class_a >= 10 || class_b < 0 || class_b >= 10) {
        throw ConfigError("poison: classes must lie in [0, 10)");
    }
}

LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                    Task task, Split split) {
    const auto ib = slurp(images);
    const auto lb = slurp(labels);
    if (read_be32(ib, 0, images) != kImageMagic) {
        throw DataError(DataError::Kind::bad_magic, "bad IDX image magic in " + images.string());
    }
    if (read_be32(lb, 0, labels) != kLabelMagic) {
        throw DataError(DataError::Kind::bad_magic, "bad IDX label magic in " + labels.string());
    }
    const std::size_t n_img = read_be32(ib, 4, images);
    const std::size_t rows = read_be32(ib, 8, images);
    const std::size_t cols = read_be32(ib, 12, images);
    const std::size_t n_lbl = read_be32(lb, 4, labels);
    if (n_img != n_lbl) {
        throw DataError(DataError::Kind::count_mismatch,
                        "IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                            std::to_string(n_lbl) + " labels");
    }
    const std::size_t dim = rows * cols;
    if (ib.size() < 16 + n_img * dim) {
        throw DataError(DataError::Kind::truncated, "truncated IDX image payload in " + images.string());
    }
    if (lb.size() < 8 + n_lbl) {
        throw DataError(DataError::Kind::truncated, "truncated IDX label payload in " + labels.string());
    }
    LabeledSet set;
    set.dim = dim;
    set.task = task;
    set.split = split;
    set.inputs.resize(n_img * dim);
    for (std::size_t i = 0; i < n_img * dim; ++i) set.inputs[i] = ib[16 + i] / 255.0;
    set.labels.resize(n_lbl);
    for (std::size_t i = 0; i < n_lbl; ++i) set.labels[i] = lb[8 + i];
    set.validate();
    return set;
}

void write_idx(const LabeledSet& set, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
    set.validate();
    const auto side = static_cast<std::uint32_t>(std::lround(std::sqrt(static_cast<double>(set.dim))));
    if (std::size_t{side} * side != set.dim) throw DataError(DataError::Kind::invalid, "write_idx: images must be square");
    std::ofstream im(images, std::ios::binary), lb(labels, std::ios::binary);
    if (!im || !lb) throw DataError(DataError::Kind::io, "write_idx: cannot create output files");
    put_be32(im, kImageMagic);
    put_be32(im, static_cast<std::uint32_t>(set.size()));
    put_be32(im, side);
    put_be32(im, side);
    for (double v : set.inputs) {
        const long b = std::clamp(std::lround(v * 255.0), 0L, 255L);
        im.put(static_cast<char>(b));
    }
    put_be32(lb, kLabelMagic);
    put_be32(lb, static_cast<std::uint32_t>(set.size()));
    for (int l : set.labels) lb.put(static_cast<char>(l));
}

LabeledSet load_task(const std::filesystem::path& root, Task task, Split split) {
    const auto dir = root / to_string(task);
    const std::string prefix = split == Split::train ? "train" : "t10k";
    return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), task, split);
}

LabeledSet take_train_subset(const LabeledSet& set, std::size_t n, std::uint64_t seed) {
    if (n > set.size()) {
        throw ConfigError("take_train_subset: requested " + std::to_string(n) + " of " +
                          std::to_string(set.size()) + " examples");
    }
    std::vector<std::size_t> idx(set.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto gen = make_stream(seed, Stream::subset, static_cast<std::uint64_t>(set.task));
    std::shuffle(idx.begin(), idx.end(), gen);
    idx.resize(n);
    return select(set, idx);
}

InputSet make_noise(const NoiseSpec& spec, std::uint64_t seed, std::uint64_t epoch) {
    spec.validate();
    auto gen = make_stream(seed, Stream::noise, epoch);
    InputSet out;
    if (spec.kind == NoiseKind::uniform784) {
        out.dim = 784;
        out.inputs.resize(spec.total() * out.dim);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (auto& x : out.inputs) x = u(gen);
    } else {
        out.dim = 1024;
        out.inputs.resize(spec.total() * out.dim);
        std::normal_distribution<double> g(0.0, 1.0);
        for (std::size_t r = 0; r < spec.total(); ++r) {
            double* row = out.inputs.data() + r * out.dim;
            double n2 = 0.0;
            for (std::size_t i = 0; i < out.dim; ++i) {
                row[i] = g(gen);
                n2 += row[i] * row[i];
            }
            const double inv = 1.0 / std::sqrt(n2);
            for (std::size_t i = 0; i < out.dim; ++i) row[i] *= inv;
        }
    }
    return out;
}

LabeledSet poison_pair(const LabeledSet& set, const PoisonSpec& spec) {
    spec.validate();
    if (set.task != Task::fashion) throw ConfigError("poison_pair: set must be Fashion-MNIST");
    LabeledSet out = set;
    for (auto& l : out.labels) {
        if (l == spec.class_a) l = spec.class_b;
        else if (l == spec.class_b) l = spec.class_a;
    }
    return out;
}

LabeledSet pair_subset_swapped(const LabeledSet& set, const PoisonSpec& spec) {
    spec.validate();
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.labels[i] == spec.class_a || set.labels[i] == spec.class_b) idx.push_back(i);
    }
    LabeledSet sub = select(set, idx);
    for (auto& l : sub.labels) l = (l == spec.class_a) ? spec.class_b : spec.class_a;
    return sub;
}

std::vector<double> normalize_for_model(std::span<const double> input, Family family) {
    std::vector<double> out(input.begin(), input.end());
    if (family == Family::classical) {
        for (auto& x : out) x = 2.0 * x - 1.0;
    }
    return out;
}

LabeledSet prepare(const LabeledSet& set, Family family) {
    LabeledSet out = set;
    if (family == Family::classical) {
        for (auto& x : out.inputs) x = 2.0 * x - 1.0;
    }
    return out;
}

}  // namespace sublim::data
