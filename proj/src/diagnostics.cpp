#include "sublim/diagnostics.hpp"

#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <json.hpp>

#include "sublim/kernels.hpp"
#include "sublim/training.hpp"

namespace sublim::diagnostics {

namespace {

std::size_t argmax(std::span<const double> z, LogitBlock block) {
    std::size_t best = block.begin;
    for (std::size_t i = block.begin + 1; i < block.end; ++i) {
        if (z[i] > z[best]) best = i;
    }
    return best - block.begin;
}

std::vector<int> predict(const Model& model, std::span<const double> params, const data::LabeledSet& set,
                         LogitBlock block) {
    const auto prepared = data::prepare(set, model.family());
    const auto z = kernels::forward_all(model, params, prepared.rows());
    const std::size_t m = model.logit_count();
    std::vector<int> out(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        out[i] = static_cast<int>(argmax(std::span(z).subspan(i * m, m), block));
    }
    return out;
}

HiddenDirection mean_ce_gradient(const Model& model, std::span<const double> params, const data::LabeledSet& set,
                                 LogitBlock block, Objective objective) {
    if (set.empty()) throw DataError(DataError::Kind::invalid, "hidden direction over an empty set");
    const auto prepared = data::prepare(set, model.family());
    std::vector<std::size_t> all(prepared.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const kernels::LossFn loss = [&](std::size_t pos, std::span<const double> z, std::span<double> c) {
        return training::ce_loss_block(z, prepared.labels[pos], block, c);
    };
    auto lg = kernels::loss_and_grad(model, params, prepared.rows(), all, loss);
    for (auto& g : lg.grad_sum) g /= static_cast<double>(all.size());
    return {std::move(lg.grad_sum), objective};
}

}  // namespace

double accuracy(const Model& model, std::span<const double> params, const data::LabeledSet& set, LogitBlock block) {
    if (set.empty()) throw DataError(DataError::Kind::invalid, "accuracy over an empty set");
    const auto pred = predict(model, params, set, block);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double pooled_flip_rate(const Model& model, std::span<const double> params, const data::LabeledSet& fashion,
                        const data::PoisonSpec& pair) {
    pair.validate();
    data::LabeledSet sub;
    sub.dim = fashion.dim;
    sub.task = fashion.task;
    sub.split = fashion.split;
    bool seen_a = false, seen_b = false;
    for (std::size_t i = 0; i < fashion.size(); ++i) {
        const int l = fashion.labels[i];
        if (l != pair.class_a && l != pair.class_b) continue;
        seen_a |= l == pair.class_a;
        seen_b |= l == pair.class_b;
        sub.labels.push_back(l);
        const auto r = fashion.row(i);
        sub.inputs.insert(sub.inputs.end(), r.begin(), r.end());
    }
    if (!seen_a || !seen_b) throw DataError(DataError::Kind::invalid, "flip rate: pair classes absent from the set");
    const auto pred = predict(model, params, sub, model.layout().second);
    std::size_t flips = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int swapped = sub.labels[i] == pair.class_a ? pair.class_b : pair.class_a;
        flips += pred[i] == swapped;
    }
    return static_cast<double>(flips) / static_cast<double>(pred.size());
}

double transmission_ratio(double student_metric, double teacher_metric, double floor) {
    if (!(teacher_metric > floor)) {
        throw NumericalError("transmission ratio undefined: teacher metric " + std::to_string(teacher_metric) +
                             " is at or below " + std::to_string(floor));
    }
    return student_metric / teacher_metric;
}

std::string to_string(Objective o) {
    return o == Objective::pair_flip_loss_grad ? "pair_flip_loss_grad" : "mnist_gain_grad";
}

HiddenDirection flip_gradient(const Model& model, std::span<const double> params,
                              const data::LabeledSet& pair_swapped) {
    return mean_ce_gradient(model, params, pair_swapped, model.layout().second, Objective::pair_flip_loss_grad);
}

HiddenDirection mnist_gain_gradient(const Model& model, std::span<const double> params,
                                    const data::LabeledSet& mnist) {
    return mean_ce_gradient(model, params, mnist, model.layout().mnist, Objective::mnist_gain_grad);
}

CgResult conjugate_gradient(const std::function<void(std::span<const double>, std::span<double>)>& apply_g,
                            std::span<const double> b, const CgOptions& opt) {
    if (!(opt.lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
    const std::size_t n = b.size();
    auto apply = [&](std::span<const double> v, std::span<double> out) {
        apply_g(v, out);
        axpy(opt.lambda, v, out);
    };

    CgResult res;
    res.x.assign(n, 0.0);
    const double bnorm = norm2(b);
    if (bnorm == 0.0) {
        res.converged = true;
        return res;
    }
    std::vector<double> r(b.begin(), b.end()), p = r, ap(n);
    double rr = dot(r, r);
    while (res.iters < opt.max_iters && std::sqrt(rr) > opt.tol * bnorm) {
        apply(p, ap);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) throw NumericalError("conjugate gradient lost positive definiteness");
        const double alpha = rr / pap;
        axpy(alpha, p, res.x);
        axpy(-alpha, ap, r);
        const double rr_new = dot(r, r);
        const double beta = rr_new / rr;
        for (std::size_t k = 0; k < n; ++k) p[k] = r[k] + beta * p[k];
        rr = rr_new;
        ++res.iters;
    }
    // The recursive residual drifts; report the true one.
    apply(res.x, ap);
    for (std::size_t k = 0; k < n; ++k) r[k] = b[k] - ap[k];
    res.residual = norm2(r) / bnorm;
    res.converged = std::sqrt(rr) <= opt.tol * bnorm;
    return res;
}

std::string ChiReport::to_json(bool with_vector) const {
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    nlohmann::json j = {{"chi", num(chi)},
                        {"norm_visibility", num(norm_visibility)},
                        {"cg_iters", cg_iters},
                        {"cg_residual", num(cg_residual)},
                        {"cg_converged", cg_converged},
                        {"lambda", lambda},
                        {"probe_size", probe_size}};
    if (with_vector) j["delta_theta_pub"] = delta_theta_pub;
    return j.dump();
}

ChiReport public_reconstruction(const Model& model, std::span<const double> params, Rows public_inputs,
                                LogitBlock block, std::span<const double> drift, const CgOptions& opt) {
    require_size(drift.size(), model.param_count(), "drift");
    if (block.end > model.logit_count() || block.size() == 0) throw ShapeError("public block outside the model's logits");
    for (double d : drift) {
        if (!std::isfinite(d)) throw NumericalError("non-finite drift");
    }
    auto gram = [&](std::span<const double> v, std::span<double> out) {
        kernels::gauss_newton_sum(model, params, public_inputs, block, v, out);
    };
    ParamVector rhs(drift.size());
    gram(drift, rhs);
    auto cg = conjugate_gradient(gram, rhs, opt);

    ChiReport rep;
    rep.delta_theta_pub = std::move(cg.x);
    rep.cg_iters = cg.iters;
    rep.cg_residual = cg.residual;
    rep.cg_converged = cg.converged;
    rep.lambda = opt.lambda;
    rep.probe_size = public_inputs.size();
    return rep;
}

double susceptibility_chi(const ChiReport& report, const HiddenDirection& g, std::span<const double> drift) {
    require_size(g.g.size(), drift.size(), "hidden direction");
    require_size(report.delta_theta_pub.size(), drift.size(), "reconstruction");
    const double den = dot(g.g, drift);
    const double scale = norm2(g.g) * norm2(drift);
    if (!(std::abs(den) > 1e-12 * scale) || scale == 0.0) {
        throw NumericalError("chi undefined: <g, drift> = " + std::to_string(den) + " with |g||drift| = " +
                             std::to_string(scale));
    }
    return dot(g.g, report.delta_theta_pub) / den;
}

double norm_visibility(const ChiReport& report, std::span<const double> drift) {
    const double d = norm2(drift);
    if (d == 0.0) throw NumericalError("norm visibility undefined for zero drift");
    return norm2(report.delta_theta_pub) / d;
}

namespace {

ChiReport finish(ChiReport rep, const HiddenDirection& g, std::span<const double> drift) {
    rep.chi = susceptibility_chi(rep, g, drift);
    rep.norm_visibility = norm_visibility(rep, drift);
    return rep;
}

}  // namespace

ChiReport chi_aux(const Model& model, std::span<const double> theta0, std::span<const double> theta_t, Rows noise,
                  const data::LabeledSet& mnist, const CgOptions& opt) {
    const auto drift = difference(theta_t, theta0);
    auto rep = public_reconstruction(model, theta0, noise, model.layout().second, drift, opt);
    return finish(std::move(rep), mnist_gain_gradient(model, theta0, mnist), drift);
}

ChiReport chi_task(const Model& model, std::span<const double> theta_clean, std::span<const double> theta_poison,
                   const data::LabeledSet& public_mnist, const data::LabeledSet& pair_swapped, const CgOptions& opt) {
    const auto drift = difference(theta_poison, theta_clean);
    const auto pub = data::prepare(public_mnist, model.family());
    auto rep = public_reconstruction(model, theta_clean, pub.rows(), model.layout().mnist, drift, opt);
    return finish(std::move(rep), flip_gradient(model, theta_clean, pair_swapped), drift);
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(std::span<const double> jac, std::size_t rows, std::size_t cols) {
    require_size(jac.size(), rows * cols, "dense jacobian");
    return {jac.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

}  // namespace

ParamVector dense_ridge_oracle(std::span<const double> jac, std::size_t rows, std::span<const double> drift,
                               double lambda) {
    // Same minimizer as the normal equation, but through the stacked
    // least-squares system [J; sqrt(lambda) I] x = [J d; 0], which avoids
    // squaring the condition number of J.
    if (!(lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
    const auto p = static_cast<Eigen::Index>(drift.size());
    const auto r = static_cast<Eigen::Index>(rows);
    const auto J = as_matrix(jac, rows, drift.size());
    const Eigen::Map<const Eigen::VectorXd> d(drift.data(), p);
    Eigen::MatrixXd a(r + p, p);
    a.topRows(r) = J;
    a.bottomRows(p) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(p, p);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(r + p);
    b.head(r) = J * d;
    const Eigen::VectorXd x = a.householderQr().solve(b);
    return {x.data(), x.data() + p};
}

ParamVector dense_ridge_dual(std::span<const double> jac, std::size_t rows, std::span<const double> drift,
                             double lambda) {
    const auto p = static_cast<Eigen::Index>(drift.size());
    const auto J = as_matrix(jac, rows, drift.size());
    const Eigen::Map<const Eigen::VectorXd> d(drift.data(), p);
    Eigen::MatrixXd k = J * J.transpose();
    k.diagonal().array() += lambda;
    const Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) throw NumericalError("dense dual system is not positive definite");
    const Eigen::VectorXd x = J.transpose() * llt.solve(J * d);
    return {x.data(), x.data() + p};
}

}  // namespace sublim::diagnostics
