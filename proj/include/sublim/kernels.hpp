#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sublim/core.hpp"
#include "sublim/model.hpp"

/// Batch-level kernels over examples.
///
/// Each kernel has a serial reference path and an OpenMP path. The OpenMP path
/// evaluates examples concurrently into a slab buffer and then reduces the slab
/// in example order, so both paths produce bit-identical results for any
/// thread count.
namespace sublim::kernels {

enum class Exec { serial, parallel };

/// Per-example loss. Receives the example's position in the batch and its
/// logits, fills the logit cotangent, returns the loss.
using LossFn = std::function<double(std::size_t pos, std::span<const double> logits,
                                    std::span<double> cotangent)>;

struct LossGrad {
    double loss_sum = 0.0;
    ParamVector grad_sum;
};

/// Sum over `examples` (indices into `inputs`) of loss and parameter gradient.
LossGrad loss_and_grad(const Model& model, std::span<const double> params, Rows inputs,
                       std::span<const std::size_t> examples, const LossFn& loss,
                       Exec exec = Exec::parallel);

/// out = sum_x J_b(x)^T J_b(x) v over every row of `inputs`.
void gauss_newton_sum(const Model& model, std::span<const double> params, Rows inputs,
                      LogitBlock block, std::span<const double> v, std::span<double> out,
                      Exec exec = Exec::parallel);

/// Row-major (n x logit_count) logits of every input.
std::vector<double> forward_all(const Model& model, std::span<const double> params, Rows inputs,
                                Exec exec = Exec::parallel);

/// Threads available to the parallel path (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace sublim::kernels
