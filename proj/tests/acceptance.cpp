// Acceptance run: one PASS/FAIL line per criterion 1-9.
//
//   acceptance [--criteria 1,2,...] [--cache DIR]
//
// Exit status is 0 only if every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "sublim/arch.hpp"
#include "sublim/diagnostics.hpp"
#include "sublim/experiment.hpp"
#include "sublim/nets.hpp"
#include "sublim/qsim.hpp"
#include "support.hpp"
#include "toy_model.hpp"

#ifndef SUBLIM_CONFIG_DIR
#define SUBLIM_CONFIG_DIR "configs"
#endif

namespace fs = std::filesystem;
using namespace sublim;
using sublim::testing::LinearToy;
using sublim::testing::random_normal;
using sublim::testing::random_vector;
using sublim::testing::rel_error;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

std::string fmt(double x, int digits = 4) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*g", digits, x);
    return buf;
}

// --- 1 ---------------------------------------------------------------------

void parameter_counts(Outcome& o) {
    struct Row {
        ModelConfig cfg;
        std::size_t want;
    };
    const std::vector<Row> rows{
        {{Arch::qnn, Channel::aux, 2, {}, 0}, 270},
        {{Arch::qnn, Channel::aux, 4, {}, 0}, 540},
        {{Arch::cnn, Channel::task, 0, {}, 1}, 390},
        {{Arch::cnn, Channel::task, 0, {}, 2}, 760},
        {{Arch::mlp, Channel::task, 0, {4}, 0}, 3240},
        {{Arch::mlp, Channel::task, 0, {128}, 0}, 103060},
        {{Arch::mlp, Channel::aux, 0, {128}, 0}, 102544},
    };
    for (const auto& r : rows) {
        const auto model = make_model(r.cfg);
        const auto got = model->param_count();
        const auto init = model->init_params(1).size();
        o.detail << " " << r.cfg.describe() << "=" << got;
        o.require(got == r.want && init == r.want, r.cfg.describe() + " expected " + std::to_string(r.want));
    }
}

// --- 2 ---------------------------------------------------------------------

/// Full central-difference Jacobian, row-major (logits x params).
std::vector<double> fd_jacobian(const Model& m, std::span<const double> x, std::span<const double> p, double h) {
    const std::size_t n = m.logit_count(), np = p.size();
    std::vector<double> jac(n * np);
    std::vector<double> q(p.begin(), p.end());
    for (std::size_t k = 0; k < np; ++k) {
        const double keep = q[k];
        q[k] = keep + h;
        const auto zp = m.logits(x, q);
        q[k] = keep - h;
        const auto zm = m.logits(x, q);
        q[k] = keep;
        for (std::size_t i = 0; i < n; ++i) jac[i * np + k] = (zp[i] - zm[i]) / (2 * h);
    }
    return jac;
}

void differentiation(Outcome& o) {
    const auto qnn = make_model({Arch::qnn, Channel::task, 2, {}, 0});
    const auto mlp = make_model({Arch::mlp, Channel::task, 0, {4}, 0});
    double worst_fd = 0.0, worst_adj = 0.0;
    for (const Model* m : {qnn.get(), mlp.get()}) {
        const std::size_t np = m->param_count(), n = m->logit_count();
        for (std::uint64_t point = 0; point < 5; ++point) {
            const std::uint64_t s = 100 * point + (m == qnn.get() ? 1 : 2);
            // QNN inputs are raw images (amplitude-encoded inside); MLP inputs are pixels in [0, 1].
            const auto x = random_vector(784, s, 0.0, 1.0);
            const auto p = m == qnn.get() ? random_vector(np, s + 1, -std::numbers::pi, std::numbers::pi)
                                          : m->init_params(s + 1);
            const auto jac = fd_jacobian(*m, x, p, 1e-5);

            const auto c = random_normal(n, s + 2);
            const auto t = random_normal(np, s + 3);
            std::vector<double> jtc(np, 0.0), jt(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < np; ++k) {
                    jtc[k] += jac[i * np + k] * c[i];
                    jt[i] += jac[i * np + k] * t[k];
                }
            }
            const auto vjp = m->vjp(x, p, c);
            const auto jvp = m->jvp(x, p, t);
            worst_fd = std::max({worst_fd, rel_error(vjp, jtc), rel_error(jvp, jt)});
            const double lhs = dot(c, jvp), rhs = dot(vjp, t);
            worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
        }
    }
    o.detail << " max fd rel err " << fmt(worst_fd, 3) << ", max adjoint err " << fmt(worst_adj, 3);
    o.require(worst_fd <= 1e-5, "finite differences");
    o.require(worst_adj <= 1e-10, "adjoint identity");
}

// --- 3 and 4 ---------------------------------------------------------------

struct Toy {
    LinearToy model;
    std::vector<double> inputs;
    std::vector<double> jac;
    std::size_t rows;

    Toy(std::size_t p, std::size_t m, std::size_t examples, std::vector<double> j)
        : model(p, m, LogitLayout{{0, m}, {m, m}}), jac(std::move(j)), rows(examples * m) {
        for (std::size_t e = 0; e < examples; ++e) {
            const auto r = model.row(std::span(jac).subspan(e * m * p, m * p));
            inputs.insert(inputs.end(), r.begin(), r.end());
        }
    }
    diagnostics::ChiReport solve(std::span<const double> d, const diagnostics::CgOptions& opt) const {
        return diagnostics::public_reconstruction(model, ParamVector(model.param_count(), 0.0),
                                                  Rows{inputs, model.input_dim()}, {0, model.logit_count()}, d,
                                                  opt);
    }
};

void ridge_cg(Outcome& o) {
    std::mt19937_64 gen(3);
    double worst_primal = 0.0, worst_dual = 0.0;
    for (int t = 0; t < 20; ++t) {
        const std::size_t p = std::uniform_int_distribution<std::size_t>(2, 50)(gen);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 4)(gen);
        const std::size_t examples = std::uniform_int_distribution<std::size_t>(1, 40 / m)(gen);
        const Toy toy(p, m, examples, random_normal(examples * m * p, 500 + t));
        const auto d = random_normal(p, 600 + t);
        const double lambda = t % 2 ? 1e-6 : 1e-2;
        const auto rep = toy.solve(d, {lambda, 1e-13, 5000});
        worst_primal = std::max(worst_primal, rel_error(rep.delta_theta_pub,
                                                        diagnostics::dense_ridge_oracle(toy.jac, toy.rows, d, lambda)));
        worst_dual = std::max(worst_dual, rel_error(rep.delta_theta_pub,
                                                    diagnostics::dense_ridge_dual(toy.jac, toy.rows, d, lambda)));
    }
    double worst_filter = 0.0;
    for (int t = 0; t < 3; ++t) {
        const std::size_t p = 10 + 10 * t;
        std::vector<double> jac(p * p, 0.0), s(p);
        for (std::size_t i = 0; i < p; ++i) {
            s[i] = std::exp(std::uniform_real_distribution<double>(-4.0, 2.0)(gen));
            jac[i * p + i] = s[i];
        }
        const Toy toy(p, p, 1, jac);
        const auto d = random_normal(p, 700 + t);
        const double lambda = 1e-3;
        const auto rep = toy.solve(d, {lambda, 1e-15, 1000});
        for (std::size_t i = 0; i < p; ++i) {
            const double f = s[i] * s[i] / (s[i] * s[i] + lambda);
            worst_filter = std::max(worst_filter, std::abs(rep.delta_theta_pub[i] - f * d[i]));
        }
    }
    o.detail << " cg vs primal " << fmt(worst_primal, 3) << ", cg vs dual " << fmt(worst_dual, 3)
             << ", filter law " << fmt(worst_filter, 3);
    o.require(worst_primal <= 1e-6, "cg vs primal oracle");
    o.require(worst_dual <= 1e-6, "cg vs dual form");
    o.require(worst_filter <= 1e-10, "filter law");
}

void chi_properties(Outcome& o) {
    using diagnostics::HiddenDirection;
    const std::size_t p = 12;
    // 24 rows of a random Jacobian: full column rank.
    const Toy full(p, 4, 6, random_normal(24 * p, 801));
    const auto d = random_normal(p, 802);
    const HiddenDirection g{random_normal(p, 803), diagnostics::Objective::pair_flip_loss_grad};

    const auto rep = full.solve(d, {1e-10, 1e-15, 1000});
    const double chi_full = diagnostics::susceptibility_chi(rep, g, d);

    const auto ridge = full.solve(d, {0.5, 1e-14, 1000});
    const double chi = diagnostics::susceptibility_chi(ridge, g, d);
    double scale_err = 0.0;
    for (double c : {-7.0, 1e-3, 42.0}) {
        HiddenDirection gc = g;
        for (auto& x : gc.g) x *= c;
        scale_err = std::max(scale_err, std::abs(diagnostics::susceptibility_chi(ridge, gc, d) - chi));
    }

    // Drift on a coordinate every public row ignores.
    auto jac = random_normal(3 * 2 * p, 804);
    for (std::size_t r = 0; r < 6; ++r) jac[r * p + 7] = 0.0;
    const Toy blind(p, 2, 3, jac);
    std::vector<double> e7(p, 0.0);
    e7[7] = 1.0;
    const auto nrep = blind.solve(e7, {1e-10, 1e-15, 1000});
    HiddenDirection g7 = g;
    g7.g[7] = 1.0;
    const double chi_null = diagnostics::susceptibility_chi(nrep, g7, e7);

    o.detail << " chi(full)=" << fmt(chi_full, 10) << " chi(null)=" << fmt(chi_null, 3) << " scale err "
             << fmt(scale_err, 3);
    o.require(std::abs(chi_full - 1.0) <= 1e-6, "full visibility");
    o.require(std::abs(chi_null) <= 1e-6, "null-space drift");
    o.require(scale_err <= 1e-12, "scale invariance");
}

// --- 5 ---------------------------------------------------------------------

void simulator(Outcome& o) {
    std::mt19937_64 gen(5);
    double worst_norm = 0.0, worst_marg = 0.0, worst_id = 0.0;
    for (int c = 0; c < 100; ++c) {
        const int depth = std::uniform_int_distribution<int>(1, 6)(gen);
        const auto cfg = c % 2 ? qsim::QnnConfig::auxiliary(depth) : qsim::QnnConfig::task(depth);
        const auto img = random_vector(784, 900 + c, 0.0, 1.0);
        auto s = qsim::amplitude_encode(img, cfg.num_qubits);
        const auto before = s;
        qsim::apply_brickwork(s, random_vector(cfg.param_count(), 1900 + c, -std::numbers::pi, std::numbers::pi), cfg);
        worst_norm = std::max(worst_norm, std::abs(s.norm() - 1.0));
        const auto marg = qsim::marginal_probs(s, cfg);
        double total = 0.0;
        for (double q : marg) total += q;
        worst_marg = std::max(worst_marg, std::abs(total - 1.0));

        auto id = before;
        qsim::apply_brickwork(id, ParamVector(cfg.param_count(), 0.0), cfg);
        for (std::size_t i = 0; i < id.dim(); ++i) worst_id = std::max(worst_id, std::abs(id[i] - before[i]));
    }
    o.detail << " norm err " << fmt(worst_norm, 3) << ", marginal sum err " << fmt(worst_marg, 3)
             << ", identity err " << fmt(worst_id, 3);
    o.require(worst_norm <= 1e-12, "state norm");
    o.require(worst_marg <= 1e-12, "marginal normalization");
    o.require(worst_id <= 1e-15, "zero-parameter identity");
}

// --- 6 to 9: desk-scale experiments ---------------------------------------------

class Desk {
public:
    explicit Desk(std::optional<fs::path> cache) {
        opt_.data_root = experiment::default_data_root();
        opt_.cache_dir = std::move(cache);
        opt_.log = [](const std::string& msg) { std::cerr << "  [run] " << msg << std::endl; };
    }

    static experiment::ExperimentConfig config(const std::string& name) {
        return experiment::load_config(fs::path(SUBLIM_CONFIG_DIR) / "desk" / (name + ".toml"));
    }

    /// Full run of a shipped desk config, memoized.
    const experiment::ExperimentResult& full(const std::string& name) {
        auto it = done_.find(name);
        if (it == done_.end()) it = done_.emplace(name, experiment::run_experiment(config(name), opt_)).first;
        return it->second;
    }

    /// The shipped config without susceptibility solves (training stages come from the cache).
    const experiment::ExperimentResult& training_only(const std::string& name) {
        if (auto it = done_.find(name); it != done_.end()) return it->second;
        auto cfg = config(name);
        cfg.diagnostics.chi = false;
        cfg.diagnostics.sampled_chi = 0;
        cfg.diagnostics.chi_aux = false;
        return done_.emplace(name + "/training", experiment::run_experiment(cfg, opt_)).first->second;
    }

    experiment::RunOptions uncached() const {
        auto o = opt_;
        o.cache_dir.reset();
        return o;
    }

private:
    experiment::RunOptions opt_;
    std::map<std::string, experiment::ExperimentResult> done_;
};

double mean_of(const experiment::ExperimentResult& r, const std::string& metric) {
    const auto it = r.summary.metrics.find(metric);
    if (it == r.summary.metrics.end() || it->second.n == 0) return std::nan("");
    return it->second.mean;
}

std::string with_sem(const experiment::ExperimentResult& r, const std::string& metric) {
    const auto it = r.summary.metrics.find(metric);
    if (it == r.summary.metrics.end()) return "n/a";
    return fmt(it->second.mean) + "+/-" + fmt(it->second.sem, 2);
}

void aux_channel(Outcome& o, Desk& desk) {
    const auto& r = desk.full("aux_mlp");
    const double teacher = mean_of(r, "teacher_accuracy"), ratio = mean_of(r, "transmission");
    o.detail << " teacher accuracy " << with_sem(r, "teacher_accuracy") << ", transmission "
             << with_sem(r, "transmission") << " (seeds " << r.records.size() << ")";
    o.require(teacher >= 0.80, "teacher accuracy >= 0.80");
    o.require(ratio >= 0.75, "transmission >= 0.75");
}

void task_ordering(Outcome& o, Desk& desk) {
    const auto& cnn = desk.full("task_cnn");
    const auto& mlp = desk.full("task_mlp");
    const auto& qnn = desk.full("task_qnn");
    for (const auto& [label, r] : {std::pair{"cnn", &cnn}, std::pair{"mlp", &mlp}, std::pair{"qnn", &qnn}}) {
        o.detail << " " << label << ": chi " << with_sem(*r, "chi") << ", transmission "
                 << with_sem(*r, "transmission") << ";";
    }
    const double c_cnn = mean_of(cnn, "chi"), c_mlp = mean_of(mlp, "chi"), c_qnn = mean_of(qnn, "chi");
    const double t_cnn = mean_of(cnn, "transmission"), t_mlp = mean_of(mlp, "transmission"),
                 t_qnn = mean_of(qnn, "transmission");
    o.require(c_cnn < c_mlp && c_mlp < c_qnn, "chi ordering CNN < MLP < QNN");
    o.require(c_cnn < 0.15, "chi(CNN) < 0.15");
    o.require(t_cnn <= t_mlp && t_mlp < t_qnn, "transmission ordering CNN <= MLP < QNN");
}

void clean_baselines(Outcome& o, Desk& desk) {
    for (const char* name : {"task_cnn", "task_mlp", "task_qnn"}) {
        const auto& r = desk.training_only(name);
        double base = 0.0, control = 0.0;
        for (const auto& rec : r.records) {
            base = std::max(base, rec.metrics.at("base_flip"));
            control = std::max(control, rec.metrics.at("control_student_flip"));
        }
        o.detail << " " << name << ": max base flip " << fmt(base, 3) << ", max control student flip "
                 << fmt(control, 3) << ";";
        o.require(base <= 0.05, std::string(name) + " base flip");
        o.require(control <= 0.05, std::string(name) + " control student flip");
    }
}

void determinism(Outcome& o, Desk& desk) {
    auto aux = Desk::config("aux_mlp");
    aux.seeds = {1, 2};
    auto task = Desk::config("task_cnn");
    task.seeds = {1};
    task.diagnostics.chi = false;
    task.diagnostics.sampled_chi = 16;
    for (const auto& cfg : {aux, task}) {
        const auto a = experiment::run_experiment(cfg, desk.uncached());
        const auto b = experiment::run_experiment(cfg, desk.uncached());
        bool same = a.summary.to_json() == b.summary.to_json();
        for (std::size_t i = 0; i < a.records.size(); ++i) same = same && a.records[i].to_json() == b.records[i].to_json();
        o.detail << " " << cfg.name << (same ? " identical" : " differs") << ";";
        o.require(same, cfg.name + " replay");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-9."};
    std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::string cache;
    app.add_option("--criteria", selected, "criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
    app.add_option("--cache", cache, "checkpoint cache shared between runs (default: none)");
    CLI11_PARSE(app, argc, argv);

    Desk desk(cache.empty() ? std::nullopt : std::optional<fs::path>(cache));
    const std::map<int, std::pair<const char*, std::function<void(Outcome&)>>> criteria{
        {1, {"parameter counts", parameter_counts}},
        {2, {"differentiation", differentiation}},
        {3, {"ridge/CG correctness", ridge_cg}},
        {4, {"chi properties", chi_properties}},
        {5, {"simulator physics", simulator}},
        {6, {"desk auxiliary channel", [&](Outcome& o) { aux_channel(o, desk); }}},
        {7, {"desk task-channel ordering", [&](Outcome& o) { task_ordering(o, desk); }}},
        {8, {"clean baselines", [&](Outcome& o) { clean_baselines(o, desk); }}},
        {9, {"determinism", [&](Outcome& o) { determinism(o, desk); }}},
    };
    // Runtime limits in seconds.
    const std::map<int, double> budget{{1, 1}, {2, 120}, {3, 60}, {6, 600}, {7, 3600}};

    std::sort(selected.begin(), selected.end());
    selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    int failures = 0;
    for (int id : selected) {
        const auto& [title, run] = criteria.at(id);
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            run(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [error: " << e.what() << "]";
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (const auto b = budget.find(id); b != budget.end()) {
            o.require(secs <= b->second, "runtime over " + fmt(b->second) + " s");
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "):" << o.detail.str()
                  << " [" << fmt(secs, 3) << " s]" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
