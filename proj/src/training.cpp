#include "sublim/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "sublim/kernels.hpp"
#include "sublim/rng.hpp"

namespace sublim::training {

using nlohmann::json;

// --- optimizer ---------------------------------------------------------------

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grad) {
    require_size(grad.size(), params.size(), "adam gradient");
    require_size(s.m.size(), params.size(), "adam state");
    for (std::size_t k = 0; k < grad.size(); ++k) {
        if (!std::isfinite(grad[k])) {
            throw NumericalError("non-finite gradient at parameter " + std::to_string(k) + " (step " +
                                 std::to_string(s.step + 1) + ")");
        }
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * grad[k];
        s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * grad[k] * grad[k];
        params[k] -= s.lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + s.eps);
    }
}

// --- losses ------------------------------------------------------------------

namespace {

void check_block(LogitBlock block, std::size_t n) {
    if (block.begin >= block.end || block.end > n) {
        throw ShapeError("logit block [" + std::to_string(block.begin) + ", " + std::to_string(block.end) +
                         ") does not fit " + std::to_string(n) + " logits");
    }
}

/// Block-restricted log-softmax.
std::vector<double> log_softmax(std::span<const double> z, LogitBlock block) {
    double mx = z[block.begin];
    for (std::size_t i = block.begin; i < block.end; ++i) mx = std::max(mx, z[i]);
    double s = 0.0;
    for (std::size_t i = block.begin; i < block.end; ++i) s += std::exp(z[i] - mx);
    const double lse = mx + std::log(s);
    std::vector<double> out(block.size());
    for (std::size_t i = 0; i < block.size(); ++i) out[i] = z[block.begin + i] - lse;
    return out;
}

}  // namespace

double ce_loss_block(std::span<const double> logits, int label, LogitBlock block,
                     std::span<double> cotangent) {
    check_block(block, logits.size());
    require_size(cotangent.size(), logits.size(), "cotangent");
    if (label < 0 || static_cast<std::size_t>(label) >= block.size()) {
        throw ConfigError("label " + std::to_string(label) + " outside a block of " +
                          std::to_string(block.size()) + " classes");
    }
    const auto ls = log_softmax(logits, block);
    std::fill(cotangent.begin(), cotangent.end(), 0.0);
    for (std::size_t i = 0; i < block.size(); ++i) cotangent[block.begin + i] = std::exp(ls[i]);
    cotangent[block.begin + static_cast<std::size_t>(label)] -= 1.0;
    return -ls[static_cast<std::size_t>(label)];
}

double kl_loss_aux(std::span<const double> student, std::span<const double> teacher, LogitBlock block,
                   std::span<double> cotangent) {
    check_block(block, student.size());
    check_block(block, teacher.size());
    require_size(cotangent.size(), student.size(), "cotangent");
    const auto ls = log_softmax(student, block);
    const auto lt = log_softmax(teacher, block);
    std::fill(cotangent.begin(), cotangent.end(), 0.0);
    double kl = 0.0;
    for (std::size_t i = 0; i < block.size(); ++i) {
        const double pt = std::exp(lt[i]);
        kl += pt * (lt[i] - ls[i]);
        cotangent[block.begin + i] = std::exp(ls[i]) - pt;
    }
    return std::max(kl, 0.0);
}

double mse_loss_public(std::span<const double> student, std::span<const double> teacher,
                       LogitBlock block, std::span<double> cotangent) {
    check_block(block, student.size());
    check_block(block, teacher.size());
    require_size(cotangent.size(), student.size(), "cotangent");
    std::fill(cotangent.begin(), cotangent.end(), 0.0);
    const double n = static_cast<double>(block.size());
    double loss = 0.0;
    for (std::size_t i = block.begin; i < block.end; ++i) {
        const double d = student[i] - teacher[i];
        loss += d * d;
        cotangent[i] = 2.0 * d / n;
    }
    return loss / n;
}

// --- checkpoints -------------------------------------------------------------

std::string to_string(Stage s) {
    switch (s) {
        case Stage::init: return "init";
        case Stage::teacher: return "teacher";
        case Stage::clean_base: return "clean_base";
        case Stage::poison_teacher: return "poison_teacher";
        case Stage::student: return "student";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    for (Stage st : {Stage::init, Stage::teacher, Stage::clean_base, Stage::poison_teacher, Stage::student}) {
        if (to_string(st) == s) return st;
    }
    throw ConfigError("unknown checkpoint stage '" + s + "'");
}

void Checkpoint::validate() const {
    require_size(params.size(), make_model(model)->param_count(), "checkpoint parameters");
}

Checkpoint initial_checkpoint(const ModelConfig& model, std::uint64_t seed) {
    Checkpoint c;
    c.model = model;
    c.stage = Stage::init;
    c.seed = seed;
    c.params = make_model(model)->init_params(seed);
    return c;
}

namespace {

constexpr char kMagic[8] = {'S', 'U', 'B', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

json model_to_json(const ModelConfig& m) {
    return {{"arch", to_string(m.arch)},
            {"channel", to_string(m.channel)},
            {"depth", m.depth},
            {"hidden", m.hidden},
            {"filters", m.filters}};
}

ModelConfig model_from_json(const json& j) {
    ModelConfig m;
    m.arch = arch_from_string(j.at("arch").get<std::string>());
    m.channel = channel_from_string(j.at("channel").get<std::string>());
    m.depth = j.at("depth").get<int>();
    m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    m.filters = j.at("filters").get<std::size_t>();
    return m;
}

void put_u64(std::string& out, std::uint64_t x) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((x >> (8 * b)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t x = 0;
    for (int b = 0; b < 8; ++b) x |= std::uint64_t{static_cast<unsigned char>(in[at + b])} << (8 * b);
    return x;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const json header = {{"model", model_to_json(ckpt.model)},
                         {"stage", to_string(ckpt.stage)},
                         {"seed", ckpt.seed},
                         {"param_count", ckpt.params.size()},
                         {"metrics", ckpt.metrics}};
    const std::string h = header.dump();
    std::string bytes(kMagic, sizeof kMagic);
    put_u64(bytes, kVersion);
    put_u64(bytes, h.size());
    bytes += h;
    for (double x : ckpt.params) put_u64(bytes, std::bit_cast<std::uint64_t>(x));

    // Write-then-rename so concurrent readers never see a partial file.
    auto tmp = path;
    tmp += ".tmp" + std::to_string(fnv1a(h) ^ reinterpret_cast<std::uintptr_t>(&ckpt));
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError(DataError::Kind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError(DataError::Kind::io, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, "cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const auto fail = [&](DataError::Kind k, const std::string& why) {
        return DataError(k, path.string() + ": " + why);
    };
    if (bytes.size() < 24) throw fail(DataError::Kind::truncated, "checkpoint header truncated");
    if (!std::equal(kMagic, kMagic + 8, bytes.begin())) throw fail(DataError::Kind::bad_magic, "not a checkpoint");
    if (get_u64(bytes, 8) != kVersion) throw fail(DataError::Kind::invalid, "unsupported checkpoint version");
    const std::size_t hlen = get_u64(bytes, 16);
    if (bytes.size() < 24 + hlen) throw fail(DataError::Kind::truncated, "checkpoint header truncated");

    Checkpoint c;
    std::size_t n = 0;
    try {
        const json header = json::parse(bytes.substr(24, hlen));
        c.model = model_from_json(header.at("model"));
        c.stage = stage_from_string(header.at("stage").get<std::string>());
        c.seed = header.at("seed").get<std::uint64_t>();
        c.metrics = header.at("metrics").get<std::map<std::string, double>>();
        n = header.at("param_count").get<std::size_t>();
    } catch (const json::exception& e) {
        throw fail(DataError::Kind::invalid, std::string("bad checkpoint header: ") + e.what());
    }
    if (bytes.size() != 24 + hlen + 8 * n) throw fail(DataError::Kind::truncated, "parameter payload size mismatch");
    c.params.resize(n);
    for (std::size_t k = 0; k < n; ++k) c.params[k] = std::bit_cast<double>(get_u64(bytes, 24 + hlen + 8 * k));
    c.validate();
    return c;
}

double drift_norm(const Checkpoint& a, const Checkpoint& b) {
    if (!(a.model == b.model)) throw ShapeError("drift between checkpoints of different models");
    require_size(b.params.size(), a.params.size(), "checkpoint parameters");
    return norm2(difference(a.params, b.params));
}

// --- protocols ---------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

namespace {

using kernels::LossFn;

void check_model(const Model& model, const Checkpoint& c, const char* what) {
    if (make_model(c.model)->describe() != model.describe()) {
        throw ConfigError(std::string(what) + " checkpoint was built for " + c.model.describe() + ", not " +
                          model.describe());
    }
    require_size(c.params.size(), model.param_count(), what);
}

/// Stream selector for minibatch shuffles: distinct per stage, epoch and task.
std::uint64_t shuffle_sub(Stage stage, std::size_t epoch, std::uint64_t lane) {
    return (static_cast<std::uint64_t>(stage) << 40) | (static_cast<std::uint64_t>(epoch) << 4) | lane;
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch, std::mt19937_64 gen) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), gen);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
    }
    return out;
}

/// One mean-reduced Adam step; returns the mean batch loss.
double train_step(const Model& model, ParamVector& params, AdamState& adam, Rows inputs,
                  std::span<const std::size_t> batch, const LossFn& loss) {
    auto lg = kernels::loss_and_grad(model, params, inputs, batch, loss);
    const double inv = 1.0 / static_cast<double>(batch.size());
    const double mean = lg.loss_sum * inv;
    if (!std::isfinite(mean)) throw NumericalError("training diverged: non-finite loss");
    for (auto& g : lg.grad_sum) g *= inv;
    adam_step(adam, params, lg.grad_sum);
    return mean;
}

LossFn ce_on(const data::LabeledSet& set, std::span<const std::size_t> batch, LogitBlock block) {
    return [&set, batch, block](std::size_t pos, std::span<const double> z, std::span<double> c) {
        return ce_loss_block(z, set.labels[batch[pos]], block, c);
    };
}

/// Shared loop of base training and teacher poisoning.
Checkpoint joint_loop(const Model& model, const Checkpoint& start, Stage stage, const data::LabeledSet& mnist,
                      const data::LabeledSet& fashion, const TrainConfig& cfg) {
    cfg.validate();
    if (model.layout().second.size() != 10) throw ConfigError("joint training needs the task logit layout");
    const auto m = data::prepare(mnist, model.family());
    const auto f = data::prepare(fashion, model.family());
    const LogitLayout layout = model.layout();

    Checkpoint out = start;
    out.stage = stage;
    AdamState adam(out.params.size(), cfg.lr);
    double last = 0.0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const auto bm = minibatches(m.size(), cfg.batch_size, make_stream(start.seed, Stream::shuffle, shuffle_sub(stage, e, 0)));
        const auto bf = minibatches(f.size(), cfg.batch_size, make_stream(start.seed, Stream::shuffle, shuffle_sub(stage, e, 1)));
        double sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t i = 0; i < std::max(bm.size(), bf.size()); ++i) {
            if (i < bm.size()) {
                sum += train_step(model, out.params, adam, m.rows(), bm[i], ce_on(m, bm[i], layout.mnist));
                ++steps;
            }
            if (i < bf.size()) {
                sum += train_step(model, out.params, adam, f.rows(), bf[i], ce_on(f, bf[i], layout.second));
                ++steps;
            }
        }
        last = steps ? sum / static_cast<double>(steps) : 0.0;
    }
    out.metrics = {{"final_loss", last}};
    return out;
}

/// Student loop against cached teacher logits; `loss` compares student and
/// teacher logits of one example.
using PairLoss = double (*)(std::span<const double>, std::span<const double>, LogitBlock, std::span<double>);

double distill_epoch(const Model& model, ParamVector& params, AdamState& adam, Rows inputs,
                     const std::vector<double>& targets, LogitBlock block, PairLoss loss,
                     const std::vector<std::vector<std::size_t>>& batches) {
    const std::size_t m = model.logit_count();
    double sum = 0.0;
    for (const auto& b : batches) {
        const LossFn fn = [&](std::size_t pos, std::span<const double> z, std::span<double> c) {
            return loss(z, std::span(targets).subspan(b[pos] * m, m), block, c);
        };
        sum += train_step(model, params, adam, inputs, b, fn);
    }
    return batches.empty() ? 0.0 : sum / static_cast<double>(batches.size());
}

}  // namespace

Checkpoint train_teacher_aux(const Model& model, const Checkpoint& init, const data::LabeledSet& mnist,
                             const TrainConfig& cfg) {
    cfg.validate();
    check_model(model, init, "init");
    if (init.stage != Stage::init) throw ConfigError("teacher training starts from an init checkpoint");
    const auto m = data::prepare(mnist, model.family());
    const LogitBlock block = model.layout().mnist;

    Checkpoint out = init;
    out.stage = Stage::teacher;
    AdamState adam(out.params.size(), cfg.lr);
    double last = 0.0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const auto batches = minibatches(m.size(), cfg.batch_size,
                                         make_stream(init.seed, Stream::shuffle, shuffle_sub(Stage::teacher, e, 0)));
        double sum = 0.0;
        for (const auto& b : batches) sum += train_step(model, out.params, adam, m.rows(), b, ce_on(m, b, block));
        last = sum / static_cast<double>(batches.size());
    }
    out.metrics = {{"final_loss", last}, {"drift_norm", drift_norm(out, init)}};
    return out;
}

Checkpoint distill_aux(const Model& model, const Checkpoint& init, const Checkpoint& teacher,
                       const data::NoiseSpec& noise, const TrainConfig& cfg) {
    cfg.validate();
    noise.validate();
    check_model(model, init, "student init");
    check_model(model, teacher, "teacher");
    if (model.layout() != LogitLayout::auxiliary()) throw ConfigError("aux distillation needs the auxiliary logit layout");
    if (init.seed != teacher.seed) throw ConfigError("student and teacher must share the initialization seed");
    const std::size_t noise_dim = noise.kind == data::NoiseKind::uniform784 ? 784 : 1024;
    if (model.family() == Family::classical && noise_dim != 784) {
        throw ConfigError("classical models take uniform784 noise");
    }
    const LogitBlock block = model.layout().second;

    Checkpoint out = init;
    out.stage = Stage::student;
    AdamState adam(out.params.size(), cfg.lr);
    data::InputSet inputs;
    std::vector<double> targets;
    double last = 0.0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        if (e == 0 || noise.resample == data::Resample::per_epoch) {
            inputs = data::make_noise(noise, init.seed, noise.resample == data::Resample::per_epoch ? e : 0);
            targets = kernels::forward_all(model, teacher.params, inputs.rows());
        }
        const auto batches = minibatches(inputs.size(), cfg.batch_size,
                                         make_stream(init.seed, Stream::shuffle, shuffle_sub(Stage::student, e, 2)));
        last = distill_epoch(model, out.params, adam, inputs.rows(), targets, block, kl_loss_aux, batches);
    }
    out.metrics = {{"final_loss", last}, {"drift_norm", drift_norm(out, init)}};
    return out;
}

Checkpoint train_base_joint(const Model& model, const Checkpoint& init, const data::LabeledSet& mnist,
                            const data::LabeledSet& fashion, const TrainConfig& cfg) {
    check_model(model, init, "init");
    if (init.stage != Stage::init) throw ConfigError("base training starts from an init checkpoint");
    auto out = joint_loop(model, init, Stage::clean_base, mnist, fashion, cfg);
    out.metrics["drift_norm"] = drift_norm(out, init);
    return out;
}

Checkpoint poison_teacher(const Model& model, const Checkpoint& base, const data::LabeledSet& mnist,
                          const data::LabeledSet& fashion, const TrainConfig& cfg) {
    check_model(model, base, "base");
    if (base.stage != Stage::clean_base) throw ConfigError("teacher poisoning starts from the clean base checkpoint");
    auto out = joint_loop(model, base, Stage::poison_teacher, mnist, fashion, cfg);
    out.metrics["drift_norm"] = drift_norm(out, base);
    return out;
}

Checkpoint distill_task(const Model& model, const Checkpoint& base, const Checkpoint& teacher,
                        const data::LabeledSet& mnist, const TrainConfig& cfg) {
    cfg.validate();
    check_model(model, base, "base");
    check_model(model, teacher, "teacher");
    if (base.stage != Stage::clean_base) throw ConfigError("task distillation starts from the clean base checkpoint");
    if (mnist.task != data::Task::mnist) throw ConfigError("the task channel only sees MNIST inputs");
    const auto m = data::prepare(mnist, model.family());
    const auto targets = kernels::forward_all(model, teacher.params, m.rows());
    const LogitBlock block = model.layout().mnist;

    Checkpoint out = base;
    out.stage = Stage::student;
    AdamState adam(out.params.size(), cfg.lr);
    double last = 0.0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const auto batches = minibatches(m.size(), cfg.batch_size,
                                         make_stream(base.seed, Stream::shuffle, shuffle_sub(Stage::student, e, 3)));
        last = distill_epoch(model, out.params, adam, m.rows(), targets, block, mse_loss_public, batches);
    }
    out.metrics = {{"final_loss", last}, {"drift_norm", drift_norm(out, base)}};
    return out;
}

}  // namespace sublim::training
