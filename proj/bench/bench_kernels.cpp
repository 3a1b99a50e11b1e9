// Serial reference path vs OpenMP path of the batch kernels.
//
//   sublim_bench [--benchmark_filter=...]
//
// Thread count follows OMP_NUM_THREADS. Both paths return bit-identical
// results, so only wall time differs.

#include <numeric>
#include <random>

#include <benchmark/benchmark.h>

#include "sublim/arch.hpp"
#include "sublim/kernels.hpp"

using namespace sublim;
using kernels::Exec;

namespace {

constexpr std::size_t kBatch = 64;

struct Fixture {
    std::unique_ptr<Model> model;
    std::vector<double> inputs;
    ParamVector params;
    std::vector<std::size_t> examples;
    std::vector<double> tangent;

    explicit Fixture(const ModelConfig& cfg) : model(make_model(cfg)) {
        std::mt19937_64 gen(7);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        inputs.resize(kBatch * 784);
        for (auto& x : inputs) x = u(gen);
        params = model->init_params(1);
        examples.resize(kBatch);
        std::iota(examples.begin(), examples.end(), 0);
        tangent.resize(params.size());
        for (auto& x : tangent) x = u(gen) - 0.5;
    }
    Rows rows() const { return {inputs, 784}; }
};

const Fixture& fixture(int which) {
    static const Fixture mlp({Arch::mlp, Channel::task, 0, {32}, 0});
    static const Fixture cnn({Arch::cnn, Channel::task, 0, {}, 2});
    static const Fixture qnn({Arch::qnn, Channel::task, 2, {}, 0});
    return which == 0 ? mlp : which == 1 ? cnn : qnn;
}

const char* label(int which) { return which == 0 ? "mlp-32" : which == 1 ? "cnn-2" : "qnn-D2"; }

Exec exec_of(const benchmark::State& s) { return s.range(1) ? Exec::parallel : Exec::serial; }

void set_label(benchmark::State& s) {
    s.SetLabel(std::string(label(static_cast<int>(s.range(0)))) + (s.range(1) ? " omp" : " serial"));
    s.SetItemsProcessed(static_cast<std::int64_t>(s.iterations() * kBatch));
}

void BM_forward_all(benchmark::State& s) {
    const auto& f = fixture(static_cast<int>(s.range(0)));
    for (auto _ : s) benchmark::DoNotOptimize(kernels::forward_all(*f.model, f.params, f.rows(), exec_of(s)));
    set_label(s);
}

void BM_loss_and_grad(benchmark::State& s) {
    const auto& f = fixture(static_cast<int>(s.range(0)));
    const kernels::LossFn loss = [](std::size_t, std::span<const double> z, std::span<double> c) {
        double sum = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            sum += 0.5 * z[i] * z[i];
            c[i] = z[i];
        }
        return sum;
    };
    for (auto _ : s) {
        benchmark::DoNotOptimize(kernels::loss_and_grad(*f.model, f.params, f.rows(), f.examples, loss, exec_of(s)));
    }
    set_label(s);
}

void BM_gauss_newton_sum(benchmark::State& s) {
    const auto& f = fixture(static_cast<int>(s.range(0)));
    std::vector<double> out(f.params.size());
    for (auto _ : s) {
        kernels::gauss_newton_sum(*f.model, f.params, f.rows(), {0, 10}, f.tangent, out, exec_of(s));
        benchmark::DoNotOptimize(out.data());
    }
    set_label(s);
}

void args(benchmark::internal::Benchmark* b) {
    for (int m = 0; m < 3; ++m) {
        for (int par = 0; par < 2; ++par) b->Args({m, par});
    }
    b->Unit(benchmark::kMillisecond)->UseRealTime();
}

}  // namespace

BENCHMARK(BM_forward_all)->Apply(args);
BENCHMARK(BM_loss_and_grad)->Apply(args);
BENCHMARK(BM_gauss_newton_sum)->Apply(args);

BENCHMARK_MAIN();
