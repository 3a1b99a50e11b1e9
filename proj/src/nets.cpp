#include "sublim/nets.hpp"

#include <cmath>
#include <random>

#include "sublim/rng.hpp"

namespace sublim::nets {

namespace {

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
// Subgradient at 0 is 0.
inline double relu_mask(double pre) { return pre > 0.0 ? 1.0 : 0.0; }

}  // namespace

void MlpConfig::validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
    for (auto n : layer_sizes) {
        if (n == 0) throw ConfigError("mlp: layer sizes must be positive");
    }
    if (output_size() != 16 && output_size() != 20) throw ConfigError("mlp: output size must be 16 or 20");
}

std::size_t MlpConfig::param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return n;
}

void CnnConfig::validate() const {
    if (filters < 1) throw ConfigError("cnn: need at least one filter");
}

std::size_t param_count(const MlpConfig& cfg) { return cfg.param_count(); }
std::size_t param_count(const CnnConfig& cfg) { return cfg.param_count(); }

ParamVector init_uniform_fan_in(std::span<const std::size_t> fan_ins,
                                std::span<const std::size_t> block_sizes, std::uint64_t seed) {
    require_size(block_sizes.size(), fan_ins.size(), "initializer blocks");
    auto gen = make_stream(seed, Stream::init);
    ParamVector p;
    for (std::size_t b = 0; b < fan_ins.size(); ++b) {
        const double r = 1.0 / std::sqrt(static_cast<double>(fan_ins[b]));
        std::uniform_real_distribution<double> dist(-r, r);
        for (std::size_t i = 0; i < block_sizes[b]; ++i) p.push_back(dist(gen));
    }
    return p;
}

// --- MLP ----------------------------------------------------------------------

MlpModel::MlpModel(MlpConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t l = 0; l + 1 < cfg_.layer_sizes.size(); ++l) {
        offsets_.push_back(n_params_);
        n_params_ += cfg_.layer_sizes[l] * cfg_.layer_sizes[l + 1] + cfg_.layer_sizes[l + 1];
    }
}

LogitLayout MlpModel::layout() const {
    return cfg_.output_size() == 20 ? LogitLayout::task() : LogitLayout::auxiliary();
}

std::string MlpModel::describe() const {
    std::string s = "mlp(";
    for (std::size_t l = 0; l < cfg_.layer_sizes.size(); ++l) {
        if (l) s += "-";
        s += std::to_string(cfg_.layer_sizes[l]);
    }
    return s + ")";
}

// acts[l] holds post-activation outputs of layer l (input for l=0); the final
// entry holds raw logits. Pre-activation sign is recoverable from the
// post-ReLU value because relu(x) > 0 iff x > 0.
MlpModel::Trace MlpModel::run(std::span<const double> input, std::span<const double> params) const {
    const auto& sz = cfg_.layer_sizes;
    require_size(input.size(), sz.front(), "mlp input");
    Trace t;
    t.acts.reserve(sz.size());
    t.acts.emplace_back(input.begin(), input.end());
    const std::size_t n_layers = sz.size() - 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::size_t in = sz[l], out = sz[l + 1];
        const double* w = params.data() + offsets_[l];
        const double* b = w + in * out;
        const auto& x = t.acts.back();
        std::vector<double> y(out);
        for (std::size_t o = 0; o < out; ++o) {
            double s = b[o];
            const double* row = w + o * in;
            for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
            y[o] = (l + 1 < n_layers) ? relu(s) : s;
        }
        t.acts.push_back(std::move(y));
    }
    return t;
}

void MlpModel::backward(const Trace& trace, std::span<const double> params,
                        std::span<const double> cotangent, std::span<double> grad) const {
    const auto& sz = cfg_.layer_sizes;
    const std::size_t n_layers = sz.size() - 1;
    std::vector<double> delta(cotangent.begin(), cotangent.end());
    for (std::size_t l = n_layers; l-- > 0;) {
        const std::size_t in = sz[l], out = sz[l + 1];
        const double* w = params.data() + offsets_[l];
        double* gw = grad.data() + offsets_[l];
        double* gb = gw + in * out;
        const auto& x = trace.acts[l];
        for (std::size_t o = 0; o < out; ++o) {
            const double d = delta[o];
            gb[o] = d;
            double* grow = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) grow[i] = d * x[i];
        }
        if (l == 0) break;
        std::vector<double> prev(in, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
            const double d = delta[o];
            if (d == 0.0) continue;
            const double* row = w + o * in;
            for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
        }
        for (std::size_t i = 0; i < in; ++i) prev[i] *= relu_mask(x[i]);
        delta = std::move(prev);
    }
}

void MlpModel::forward(std::span<const double> input, std::span<const double> params,
                       std::span<double> logits) const {
    check_shapes(params, logits.size());
    const auto t = run(input, params);
    std::copy(t.acts.back().begin(), t.acts.back().end(), logits.begin());
}

void MlpModel::vjp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> cotangent, std::span<double> grad) const {
    check_shapes(params, cotangent.size());
    require_size(grad.size(), n_params_, "gradient output");
    backward(run(input, params), params, cotangent, grad);
}

void MlpModel::value_and_vjp(std::span<const double> input, std::span<const double> params,
                             const CotangentFn& make_cotangent, std::span<double> logits,
                             std::span<double> grad) const {
    check_shapes(params, logits.size());
    require_size(grad.size(), n_params_, "gradient output");
    const auto t = run(input, params);
    std::copy(t.acts.back().begin(), t.acts.back().end(), logits.begin());
    std::vector<double> cot(logits.size(), 0.0);
    make_cotangent(logits, cot);
    backward(t, params, cot, grad);
}

void MlpModel::jvp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> tangent, std::span<double> out) const {
    check_shapes(params, out.size());
    require_size(tangent.size(), n_params_, "tangent");
    const auto& sz = cfg_.layer_sizes;
    const auto t = run(input, params);
    const std::size_t n_layers = sz.size() - 1;
    std::vector<double> dx(sz.front(), 0.0);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::size_t in = sz[l], osz = sz[l + 1];
        const double* w = params.data() + offsets_[l];
        const double* dw = tangent.data() + offsets_[l];
        const double* db = dw + in * osz;
        const auto& x = t.acts[l];
        const auto& y = t.acts[l + 1];
        std::vector<double> dy(osz);
        for (std::size_t o = 0; o < osz; ++o) {
            double s = db[o];
            const double* row = w + o * in;
            const double* drow = dw + o * in;
            for (std::size_t i = 0; i < in; ++i) s += drow[i] * x[i] + row[i] * dx[i];
            dy[o] = (l + 1 < n_layers) ? s * relu_mask(y[o]) : s;
        }
        dx = std::move(dy);
    }
    std::copy(dx.begin(), dx.end(), out.begin());
}

ParamVector MlpModel::init_params(std::uint64_t seed) const {
    std::vector<std::size_t> fan_ins, blocks;
    const auto& sz = cfg_.layer_sizes;
    for (std::size_t l = 0; l + 1 < sz.size(); ++l) {
        fan_ins.push_back(sz[l]);
        blocks.push_back(sz[l] * sz[l + 1] + sz[l + 1]);
    }
    return init_uniform_fan_in(fan_ins, blocks, seed);
}

// --- MicroCNN -----------------------------------------------------------------

CnnModel::CnnModel(CnnConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::string CnnModel::describe() const { return "cnn(f=" + std::to_string(cfg_.filters) + ")"; }

std::vector<double> CnnModel::conv_preacts(std::span<const double> input,
                                           std::span<const double> params) const {
    constexpr auto K = CnnConfig::kKernel, S = CnnConfig::kStride, G = CnnConfig::kGrid,
                   N = CnnConfig::kImage;
    require_size(input.size(), N * N, "cnn input");
    std::vector<double> pre(cfg_.features());
    for (std::size_t f = 0; f < cfg_.filters; ++f) {
        const double* k = params.data() + f * (K * K + 1);
        const double bias = k[K * K];
        for (std::size_t gr = 0; gr < G; ++gr)
            for (std::size_t gc = 0; gc < G; ++gc) {
                double s = bias;
                for (std::size_t r = 0; r < K; ++r)
                    for (std::size_t c = 0; c < K; ++c) s += k[r * K + c] * input[(gr * S + r) * N + gc * S + c];
                pre[(f * G + gr) * G + gc] = s;
            }
    }
    return pre;
}

std::vector<double> CnnModel::features(std::span<const double> input,
                                       std::span<const double> params) const {
    require_size(params.size(), param_count(), "parameter vector");
    auto h = conv_preacts(input, params);
    for (auto& v : h) v = relu(v);
    return h;
}

void CnnModel::forward(std::span<const double> input, std::span<const double> params,
                       std::span<double> logits) const {
    check_shapes(params, logits.size());
    const auto h = features(input, params);
    const std::size_t nf = h.size();
    const double* w = params.data() + cfg_.conv_params();
    const double* b = w + nf * CnnConfig::kOutputs;
    for (std::size_t o = 0; o < CnnConfig::kOutputs; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < nf; ++i) s += w[o * nf + i] * h[i];
        logits[o] = s;
    }
}

void CnnModel::vjp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> cotangent, std::span<double> grad) const {
    constexpr auto K = CnnConfig::kKernel, S = CnnConfig::kStride, G = CnnConfig::kGrid,
                   N = CnnConfig::kImage;
    check_shapes(params, cotangent.size());
    require_size(grad.size(), param_count(), "gradient output");
    const auto pre = conv_preacts(input, params);
    const std::size_t nf = pre.size();
    const double* w = params.data() + cfg_.conv_params();
    double* gw = grad.data() + cfg_.conv_params();
    double* gb = gw + nf * CnnConfig::kOutputs;

    std::vector<double> dh(nf, 0.0);
    for (std::size_t o = 0; o < CnnConfig::kOutputs; ++o) {
        const double d = cotangent[o];
        gb[o] = d;
        for (std::size_t i = 0; i < nf; ++i) {
            gw[o * nf + i] = d * relu(pre[i]);
            dh[i] += w[o * nf + i] * d;
        }
    }
    for (std::size_t f = 0; f < cfg_.filters; ++f) {
        double* gk = grad.data() + f * (K * K + 1);
        std::fill(gk, gk + K * K + 1, 0.0);
        for (std::size_t gr = 0; gr < G; ++gr)
            for (std::size_t gc = 0; gc < G; ++gc) {
                const std::size_t idx = (f * G + gr) * G + gc;
                const double d = dh[idx] * relu_mask(pre[idx]);
                if (d == 0.0) continue;
                gk[K * K] += d;
                for (std::size_t r = 0; r < K; ++r)
                    for (std::size_t c = 0; c < K; ++c) gk[r * K + c] += d * input[(gr * S + r) * N + gc * S + c];
            }
    }
}

void CnnModel::jvp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> tangent, std::span<double> out) const {
    constexpr auto K = CnnConfig::kKernel, S = CnnConfig::kStride, G = CnnConfig::kGrid,
                   N = CnnConfig::kImage;
    check_shapes(params, out.size());
    require_size(tangent.size(), param_count(), "tangent");
    const auto pre = conv_preacts(input, params);
    const std::size_t nf = pre.size();

    std::vector<double> dh(nf, 0.0);
    for (std::size_t f = 0; f < cfg_.filters; ++f) {
        const double* dk = tangent.data() + f * (K * K + 1);
        for (std::size_t gr = 0; gr < G; ++gr)
            for (std::size_t gc = 0; gc < G; ++gc) {
                const std::size_t idx = (f * G + gr) * G + gc;
                if (relu_mask(pre[idx]) == 0.0) continue;
                double s = dk[K * K];
                for (std::size_t r = 0; r < K; ++r)
                    for (std::size_t c = 0; c < K; ++c) s += dk[r * K + c] * input[(gr * S + r) * N + gc * S + c];
                dh[idx] = s;
            }
    }
    const double* w = params.data() + cfg_.conv_params();
    const double* dw = tangent.data() + cfg_.conv_params();
    const double* db = dw + nf * CnnConfig::kOutputs;
    for (std::size_t o = 0; o < CnnConfig::kOutputs; ++o) {
        double s = db[o];
        for (std::size_t i = 0; i < nf; ++i) s += dw[o * nf + i] * relu(pre[i]) + w[o * nf + i] * dh[i];
        out[o] = s;
    }
}

ParamVector CnnModel::init_params(std::uint64_t seed) const {
    constexpr auto K = CnnConfig::kKernel;
    std::vector<std::size_t> fan_ins, blocks;
    for (std::size_t f = 0; f < cfg_.filters; ++f) {
        fan_ins.push_back(K * K);
        blocks.push_back(K * K + 1);
    }
    fan_ins.push_back(cfg_.features());
    blocks.push_back(cfg_.features() * CnnConfig::kOutputs + CnnConfig::kOutputs);
    return init_uniform_fan_in(fan_ins, blocks, seed);
}

}  // namespace sublim::nets
