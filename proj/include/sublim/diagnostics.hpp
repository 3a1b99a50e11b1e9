#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sublim/data.hpp"
#include "sublim/model.hpp"

namespace sublim::diagnostics {

// --- behavioral metrics ------------------------------------------------------
// Sets are raw pixel sets; they are mapped to model inputs internally.

/// Fraction of examples whose argmax over `block` equals the label.
/// Ties go to the lowest index.
double accuracy(const Model& model, std::span<const double> params, const data::LabeledSet& set,
                LogitBlock block);

/// Over all test examples of the pair's two classes, the fraction predicted
/// (argmax over the Fashion-MNIST block) as the other class of the pair.
double pooled_flip_rate(const Model& model, std::span<const double> params, const data::LabeledSet& fashion,
                        const data::PoisonSpec& pair);

/// student / teacher; NumericalError when the teacher metric is at or below `floor`.
double transmission_ratio(double student_metric, double teacher_metric, double floor = 1e-6);

// --- hidden directions -------------------------------------------------------

enum class Objective { pair_flip_loss_grad, mnist_gain_grad };
std::string to_string(Objective o);

struct HiddenDirection {
    ParamVector g;
    Objective objective = Objective::pair_flip_loss_grad;
};

/// Gradient of the mean cross-entropy of `pair_swapped` (pair examples with
/// swapped labels) over the Fashion-MNIST block, at `params`.
HiddenDirection flip_gradient(const Model& model, std::span<const double> params,
                              const data::LabeledSet& pair_swapped);

/// Gradient of the mean MNIST cross-entropy over the MNIST block, at `params`.
HiddenDirection mnist_gain_gradient(const Model& model, std::span<const double> params,
                                    const data::LabeledSet& mnist);

// --- ridge reconstruction ----------------------------------------------------

struct CgOptions {
    double lambda = 1e-6;
    double tol = 1e-8;
    std::size_t max_iters = 500;
};

struct CgResult {
    ParamVector x;
    std::size_t iters = 0;
    double residual = 0.0;  // final ||b - A x|| / ||b||, recomputed explicitly
    bool converged = false;
};

/// Conjugate gradient for (G + lambda I) x = b, where `apply_g(v, out)` sets out = G v
/// for a symmetric positive semi-definite G.
CgResult conjugate_gradient(const std::function<void(std::span<const double>, std::span<double>)>& apply_g,
                            std::span<const double> b, const CgOptions& opt);

struct ChiReport {
    ParamVector delta_theta_pub;
    double chi = 0.0;
    double norm_visibility = 0.0;
    std::size_t cg_iters = 0;
    double cg_residual = 0.0;
    bool cg_converged = false;
    double lambda = 0.0;
    std::size_t probe_size = 0;

    /// All fields; the reconstructed vector is included only on request.
    [[nodiscard]] std::string to_json(bool with_vector = false) const;
};

/// Solves (J^T J + lambda I) dtheta_pub = J^T J drift with J the Jacobian of
/// `block` over every row of `public_inputs` (model-space inputs) at `params`.
/// JᵀJ·v is formed matrix-free from per-example JVP/VJP pairs.
ChiReport public_reconstruction(const Model& model, std::span<const double> params, Rows public_inputs,
                                LogitBlock block, std::span<const double> drift, const CgOptions& opt);

/// chi = <g, dtheta_pub> / <g, drift>. NumericalError if the denominator is
/// below 1e-12 |g| |drift|.
double susceptibility_chi(const ChiReport& report, const HiddenDirection& g, std::span<const double> drift);

/// |dtheta_pub| / |drift|; NumericalError on zero drift.
double norm_visibility(const ChiReport& report, std::span<const double> drift);

/// Auxiliary-channel analogue: J over the auxiliary logits on `noise` at
/// theta_0, drift theta_T - theta_0, hidden direction the MNIST cross-entropy
/// gradient at theta_0. Returns the report with chi and visibility filled.
ChiReport chi_aux(const Model& model, std::span<const double> theta0, std::span<const double> theta_t,
                  Rows noise, const data::LabeledSet& mnist, const CgOptions& opt);

/// Task-channel chi at the clean base: public MNIST inputs, drift
/// theta_poison - theta_clean, hidden direction the pair flip gradient.
ChiReport chi_task(const Model& model, std::span<const double> theta_clean,
                   std::span<const double> theta_poison, const data::LabeledSet& public_mnist,
                   const data::LabeledSet& pair_swapped, const CgOptions& opt);

// --- dense oracle ------------------------------------------------------------

/// Primal form (J^T J + lambda I)^{-1} J^T J d, solved as the equivalent
/// stacked least-squares problem by Householder QR.
/// `jac` is row-major (rows x p).
ParamVector dense_ridge_oracle(std::span<const double> jac, std::size_t rows, std::span<const double> drift,
                               double lambda);

/// Dual form J^T (J J^T + lambda I)^{-1} J d.
ParamVector dense_ridge_dual(std::span<const double> jac, std::size_t rows, std::span<const double> drift,
                             double lambda);

}  // namespace sublim::diagnostics
