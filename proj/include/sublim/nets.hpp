#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sublim/model.hpp"

namespace sublim::nets {

/// Fully connected ReLU network. Parameters are laid out layer by layer,
/// each as a row-major (out x in) weight matrix followed by the bias.
struct MlpConfig {
    std::vector<std::size_t> layer_sizes{784, 128, 16};

    void validate() const;
    [[nodiscard]] std::size_t param_count() const;
    [[nodiscard]] std::size_t output_size() const { return layer_sizes.back(); }
};

/// One conv layer (7x7 kernel, stride 7, valid, bias per filter) on a 28x28
/// grid, ReLU, flatten (filter, row, col), dense projection to 20 logits.
/// Parameters: per filter 49 weights + 1 bias, then the (20 x 16f) dense
/// matrix and its 20 biases.
struct CnnConfig {
    std::size_t filters = 1;

    static constexpr std::size_t kImage = 28;
    static constexpr std::size_t kKernel = 7;
    static constexpr std::size_t kStride = 7;
    static constexpr std::size_t kGrid = (kImage - kKernel) / kStride + 1;  // 4
    static constexpr std::size_t kOutputs = 20;

    void validate() const;
    [[nodiscard]] std::size_t conv_params() const { return filters * (kKernel * kKernel + 1); }
    [[nodiscard]] std::size_t features() const { return filters * kGrid * kGrid; }
    [[nodiscard]] std::size_t param_count() const {
        return conv_params() + features() * kOutputs + kOutputs;
    }
};

std::size_t param_count(const MlpConfig& cfg);
std::size_t param_count(const CnnConfig& cfg);

/// Uniform in +-1/sqrt(fan_in) for weights and biases.
ParamVector init_uniform_fan_in(std::span<const std::size_t> fan_ins,
                                std::span<const std::size_t> block_sizes, std::uint64_t seed);

class MlpModel final : public Model {
public:
    using Model::jvp;
    using Model::vjp;

    explicit MlpModel(MlpConfig cfg);

    [[nodiscard]] const MlpConfig& config() const { return cfg_; }
    [[nodiscard]] std::size_t param_count() const override { return n_params_; }
    [[nodiscard]] std::size_t logit_count() const override { return cfg_.output_size(); }
    [[nodiscard]] Family family() const override { return Family::classical; }
    [[nodiscard]] LogitLayout layout() const override;
    [[nodiscard]] std::string describe() const override;

    void forward(std::span<const double> input, std::span<const double> params,
                 std::span<double> logits) const override;
    void vjp(std::span<const double> input, std::span<const double> params,
             std::span<const double> cotangent, std::span<double> grad) const override;
    void jvp(std::span<const double> input, std::span<const double> params,
             std::span<const double> tangent, std::span<double> out) const override;
    void value_and_vjp(std::span<const double> input, std::span<const double> params,
                       const CotangentFn& make_cotangent, std::span<double> logits,
                       std::span<double> grad) const override;

    [[nodiscard]] ParamVector init_params(std::uint64_t seed) const override;

private:
    // Pre-activations and activations of every layer; acts[0] is the input.
    struct Trace {
        std::vector<std::vector<double>> acts;
    };
    Trace run(std::span<const double> input, std::span<const double> params) const;
    void backward(const Trace& trace, std::span<const double> params,
                  std::span<const double> cotangent, std::span<double> grad) const;

    MlpConfig cfg_;
    std::vector<std::size_t> offsets_;  // start of each layer's weights
    std::size_t n_params_ = 0;
};

class CnnModel final : public Model {
public:
    using Model::jvp;
    using Model::vjp;

    explicit CnnModel(CnnConfig cfg);

    [[nodiscard]] const CnnConfig& config() const { return cfg_; }
    [[nodiscard]] std::size_t param_count() const override { return cfg_.param_count(); }
    [[nodiscard]] std::size_t logit_count() const override { return CnnConfig::kOutputs; }
    [[nodiscard]] Family family() const override { return Family::classical; }
    [[nodiscard]] LogitLayout layout() const override { return LogitLayout::task(); }
    [[nodiscard]] std::string describe() const override;

    void forward(std::span<const double> input, std::span<const double> params,
                 std::span<double> logits) const override;
    void vjp(std::span<const double> input, std::span<const double> params,
             std::span<const double> cotangent, std::span<double> grad) const override;
    void jvp(std::span<const double> input, std::span<const double> params,
             std::span<const double> tangent, std::span<double> out) const override;

    /// Post-ReLU conv features (filter-major), exposed for tests.
    [[nodiscard]] std::vector<double> features(std::span<const double> input,
                                               std::span<const double> params) const;

    [[nodiscard]] ParamVector init_params(std::uint64_t seed) const override;

private:
    std::vector<double> conv_preacts(std::span<const double> input,
                                     std::span<const double> params) const;
    CnnConfig cfg_;
};

}  // namespace sublim::nets
