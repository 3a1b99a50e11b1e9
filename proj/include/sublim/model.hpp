#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>

#include "sublim/core.hpp"

namespace sublim {

/// Model families differ in how raw pixels are mapped to model inputs.
enum class Family { classical, quantum };

/// Differentiable map from (input, parameters) to a logit vector.
///
/// Every implementation is a pure function of its arguments and may be called
/// concurrently from several threads. `vjp` returns J^T c and `jvp` returns J t
/// where J = d logits / d params at (input, params); the two satisfy
/// <c, J t> = <J^T c, t> to rounding.
class Model {
public:
    /// Fills `cotangent` (dL/dlogits) given the logits of one example.
    using CotangentFn =
        std::function<void(std::span<const double> logits, std::span<double> cotangent)>;

    virtual ~Model() = default;

    [[nodiscard]] virtual std::size_t param_count() const = 0;
    [[nodiscard]] virtual std::size_t logit_count() const = 0;
    [[nodiscard]] virtual Family family() const = 0;
    [[nodiscard]] virtual LogitLayout layout() const = 0;
    [[nodiscard]] virtual std::string describe() const = 0;

    virtual void forward(std::span<const double> input, std::span<const double> params,
                         std::span<double> logits) const = 0;
    virtual void vjp(std::span<const double> input, std::span<const double> params,
                     std::span<const double> cotangent, std::span<double> grad) const = 0;
    virtual void jvp(std::span<const double> input, std::span<const double> params,
                     std::span<const double> tangent, std::span<double> out) const = 0;

    /// One forward pass, then a VJP with the cotangent produced from the logits.
    /// `logits` receives the forward output.
    virtual void value_and_vjp(std::span<const double> input, std::span<const double> params,
                               const CotangentFn& make_cotangent, std::span<double> logits,
                               std::span<double> grad) const;

    /// out = J_b^T J_b t, where J_b keeps only the rows of `block`.
    virtual void gauss_newton(std::span<const double> input, std::span<const double> params,
                              LogitBlock block, std::span<const double> tangent,
                              std::span<double> out) const;

    [[nodiscard]] virtual ParamVector init_params(std::uint64_t seed) const = 0;

    // Allocating conveniences.
    [[nodiscard]] std::vector<double> logits(std::span<const double> input,
                                             std::span<const double> params) const;
    [[nodiscard]] ParamVector vjp(std::span<const double> input, std::span<const double> params,
                                  std::span<const double> cotangent) const;
    [[nodiscard]] std::vector<double> jvp(std::span<const double> input,
                                          std::span<const double> params,
                                          std::span<const double> tangent) const;

protected:
    void check_shapes(std::span<const double> params, std::size_t logits_len) const {
        require_size(params.size(), param_count(), "parameter vector");
        require_size(logits_len, logit_count(), "logit vector");
    }
};

/// Row-major Jacobian of all logits, built column by column from JVPs.
/// Only meant for small models in tests and the dense oracle.
std::vector<double> materialize_jacobian(const Model& model, std::span<const double> input,
                                         std::span<const double> params);

}  // namespace sublim
