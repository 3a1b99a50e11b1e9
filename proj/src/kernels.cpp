#include "sublim/kernels.hpp"

#include <algorithm>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sublim::kernels {

namespace {

// Examples evaluated per slab; bounds the buffer to kSlab * param_count doubles.
constexpr std::size_t kSlab = 64;

/// Runs body(i) for i in [0, n) on the OpenMP team, rethrowing the first
/// exception on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
#pragma omp critical(sublim_kernel_error)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
}

void add_into(std::span<double> acc, std::span<const double> x) {
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += x[k];
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

LossGrad loss_and_grad(const Model& model, std::span<const double> params, Rows inputs,
                       std::span<const std::size_t> examples, const LossFn& loss, Exec exec) {
    const std::size_t p = model.param_count();
    const std::size_t m = model.logit_count();
    LossGrad out{0.0, ParamVector(p, 0.0)};

    auto one = [&](std::size_t pos, std::span<double> logits, std::span<double> grad) {
        double value = 0.0;
        model.value_and_vjp(
            inputs.row(examples[pos]), params,
            [&](std::span<const double> z, std::span<double> cot) { value = loss(pos, z, cot); }, logits,
            grad);
        return value;
    };

    if (exec == Exec::serial) {
        std::vector<double> logits(m);
        ParamVector grad(p);
        for (std::size_t pos = 0; pos < examples.size(); ++pos) {
            out.loss_sum += one(pos, logits, grad);
            add_into(out.grad_sum, grad);
        }
        return out;
    }

    const std::size_t slab = std::min(kSlab, examples.size());
    std::vector<double> grads(slab * p), logits(slab * m), values(slab);
    for (std::size_t start = 0; start < examples.size(); start += slab) {
        const std::size_t count = std::min(slab, examples.size() - start);
        parallel_for(count, [&](std::size_t j) {
            values[j] = one(start + j, std::span(logits).subspan(j * m, m),
                            std::span(grads).subspan(j * p, p));
        });
        for (std::size_t j = 0; j < count; ++j) {
            out.loss_sum += values[j];
            add_into(out.grad_sum, std::span<const double>(grads).subspan(j * p, p));
        }
    }
    return out;
}

void gauss_newton_sum(const Model& model, std::span<const double> params, Rows inputs,
                      LogitBlock block, std::span<const double> v, std::span<double> out,
                      Exec exec) {
    const std::size_t p = model.param_count();
    require_size(v.size(), p, "gauss-newton tangent");
    require_size(out.size(), p, "gauss-newton output");
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t n = inputs.size();

    if (exec == Exec::serial) {
        ParamVector tmp(p);
        for (std::size_t i = 0; i < n; ++i) {
            model.gauss_newton(inputs.row(i), params, block, v, tmp);
            add_into(out, tmp);
        }
        return;
    }

    const std::size_t slab = std::min(kSlab, n);
    std::vector<double> buf(slab * p);
    for (std::size_t start = 0; start < n; start += slab) {
        const std::size_t count = std::min(slab, n - start);
        parallel_for(count, [&](std::size_t j) {
            model.gauss_newton(inputs.row(start + j), params, block, v, std::span(buf).subspan(j * p, p));
        });
        for (std::size_t j = 0; j < count; ++j) add_into(out, std::span<const double>(buf).subspan(j * p, p));
    }
}

std::vector<double> forward_all(const Model& model, std::span<const double> params, Rows inputs,
                                Exec exec) {
    const std::size_t m = model.logit_count();
    const std::size_t n = inputs.size();
    std::vector<double> z(n * m);
    auto one = [&](std::size_t i) { model.forward(inputs.row(i), params, std::span(z).subspan(i * m, m)); };
    if (exec == Exec::serial) {
        for (std::size_t i = 0; i < n; ++i) one(i);
    } else {
        parallel_for(n, one);
    }
    return z;
}

}  // namespace sublim::kernels
