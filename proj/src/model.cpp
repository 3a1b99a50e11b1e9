#include "sublim/model.hpp"

#include <cmath>
#include <numeric>

namespace sublim {

double dot(std::span<const double> a, std::span<const double> b) {
    require_size(b.size(), a.size(), "dot operand");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    require_size(y.size(), x.size(), "axpy operand");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

ParamVector difference(std::span<const double> a, std::span<const double> b) {
    require_size(b.size(), a.size(), "difference operand");
    ParamVector d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

void Model::value_and_vjp(std::span<const double> input, std::span<const double> params,
                          const CotangentFn& make_cotangent, std::span<double> logits,
                          std::span<double> grad) const {
    forward(input, params, logits);
    std::vector<double> cot(logit_count(), 0.0);
    make_cotangent(logits, cot);
    vjp(input, params, cot, grad);
}

void Model::gauss_newton(std::span<const double> input, std::span<const double> params,
                         LogitBlock block, std::span<const double> tangent,
                         std::span<double> out) const {
    std::vector<double> jt(logit_count());
    jvp(input, params, tangent, jt);
    for (std::size_t i = 0; i < jt.size(); ++i) {
        if (!block.contains(i)) jt[i] = 0.0;
    }
    vjp(input, params, jt, out);
}

std::vector<double> Model::logits(std::span<const double> input,
                                  std::span<const double> params) const {
    std::vector<double> z(logit_count());
    forward(input, params, z);
    return z;
}

ParamVector Model::vjp(std::span<const double> input, std::span<const double> params,
                       std::span<const double> cotangent) const {
    ParamVector g(param_count());
    vjp(input, params, cotangent, g);
    return g;
}

std::vector<double> Model::jvp(std::span<const double> input, std::span<const double> params,
                               std::span<const double> tangent) const {
    std::vector<double> out(logit_count());
    jvp(input, params, tangent, out);
    return out;
}

std::vector<double> materialize_jacobian(const Model& model, std::span<const double> input,
                                         std::span<const double> params) {
    const std::size_t m = model.logit_count();
    const std::size_t p = model.param_count();
    std::vector<double> jac(m * p);
    ParamVector e(p, 0.0);
    std::vector<double> col(m);
    for (std::size_t k = 0; k < p; ++k) {
        e[k] = 1.0;
        model.jvp(input, params, e, col);
        e[k] = 0.0;
        for (std::size_t i = 0; i < m; ++i) jac[i * p + k] = col[i];
    }
    return jac;
}

}  // namespace sublim
