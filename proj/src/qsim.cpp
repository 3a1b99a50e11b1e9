#include "sublim/qsim.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "sublim/rng.hpp"

namespace sublim::qsim {

namespace {

constexpr cplx kI{0.0, 1.0};

const Gate2 kPauliY{cplx{0, 0}, cplx{0, -1}, cplx{0, 1}, cplx{0, 0}};
const Gate2 kPauliZ{cplx{1, 0}, cplx{0, 0}, cplx{0, 0}, cplx{-1, 0}};

Gate2 mul2(const Gate2& a, const Gate2& b) {
    return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]};
}

Gate2 scale2(cplx s, const Gate2& a) { return {s * a[0], s * a[1], s * a[2], s * a[3]}; }

Gate4 scale4(cplx s, const Gate4& a) {
    Gate4 r;
    for (std::size_t i = 0; i < 16; ++i) r[i] = s * a[i];
    return r;
}

// Two-qubit Pauli products are signed permutations; build them from kron.
const Gate2 kPauliX{cplx{0, 0}, cplx{1, 0}, cplx{1, 0}, cplx{0, 0}};

Gate4 pauli_pair(const Gate2& p) { return kron(p, p); }

/// Bit positions of the pair (q, q+1) in the amplitude index.
struct PairBits {
    std::size_t high;  // mask for qubit q
    std::size_t low;   // mask for qubit q+1
};

PairBits pair_bits(int num_qubits, int q) {
    const int hb = num_qubits - 1 - q;
    return {std::size_t{1} << hb, std::size_t{1} << (hb - 1)};
}

/// Calls f(i00, i01, i10, i11) for every 4-amplitude block touched by the pair.
template <typename F>
inline void for_each_block(std::size_t dim, PairBits bits, F&& f) {
    const std::size_t step = bits.high << 1;
    for (std::size_t outer = 0; outer < dim; outer += step) {
        for (std::size_t inner = 0; inner < bits.low; ++inner) {
            const std::size_t i0 = outer | inner;
            f(i0, i0 | bits.low, i0 | bits.high, i0 | bits.high | bits.low);
        }
    }
}

inline void apply_gate_raw(std::span<cplx> amps, const Gate4& u, PairBits bits) {
    for_each_block(amps.size(), bits, [&](std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        const cplx x0 = amps[a], x1 = amps[b], x2 = amps[c], x3 = amps[d];
        amps[a] = u[0] * x0 + u[1] * x1 + u[2] * x2 + u[3] * x3;
        amps[b] = u[4] * x0 + u[5] * x1 + u[6] * x2 + u[7] * x3;
        amps[c] = u[8] * x0 + u[9] * x1 + u[10] * x2 + u[11] * x3;
        amps[d] = u[12] * x0 + u[13] * x1 + u[14] * x2 + u[15] * x3;
    });
}

/// tangent <- U tangent + dU state; state <- U state
inline void apply_gate_tangent(std::span<cplx> state, std::span<cplx> tangent, const Gate4& u,
                               const Gate4& du, PairBits bits) {
    for_each_block(state.size(), bits, [&](std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        const cplx x0 = state[a], x1 = state[b], x2 = state[c], x3 = state[d];
        const cplx t0 = tangent[a], t1 = tangent[b], t2 = tangent[c], t3 = tangent[d];
        state[a] = u[0] * x0 + u[1] * x1 + u[2] * x2 + u[3] * x3;
        state[b] = u[4] * x0 + u[5] * x1 + u[6] * x2 + u[7] * x3;
        state[c] = u[8] * x0 + u[9] * x1 + u[10] * x2 + u[11] * x3;
        state[d] = u[12] * x0 + u[13] * x1 + u[14] * x2 + u[15] * x3;
        tangent[a] = u[0] * t0 + u[1] * t1 + u[2] * t2 + u[3] * t3 +
                     du[0] * x0 + du[1] * x1 + du[2] * x2 + du[3] * x3;
        tangent[b] = u[4] * t0 + u[5] * t1 + u[6] * t2 + u[7] * t3 +
                     du[4] * x0 + du[5] * x1 + du[6] * x2 + du[7] * x3;
        tangent[c] = u[8] * t0 + u[9] * t1 + u[10] * t2 + u[11] * t3 +
                     du[8] * x0 + du[9] * x1 + du[10] * x2 + du[11] * x3;
        tangent[d] = u[12] * t0 + u[13] * t1 + u[14] * t2 + u[15] * t3 +
                     du[12] * x0 + du[13] * x1 + du[14] * x2 + du[15] * x3;
    });
}

/// M[a][b] = sum over blocks conj(lambda_a) psi_b
inline Gate4 overlap_matrix(std::span<const cplx> lambda, std::span<const cplx> psi, PairBits bits) {
    Gate4 m{};
    for_each_block(psi.size(), bits, [&](std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        const std::size_t idx[4] = {a, b, c, d};
        for (int r = 0; r < 4; ++r) {
            const cplx l = std::conj(lambda[idx[r]]);
            for (int s = 0; s < 4; ++s) m[r * 4 + s] += l * psi[idx[s]];
        }
    });
    return m;
}

/// Gates (and optionally their derivatives) for one parameter vector.
struct Circuit {
    std::vector<int> pairs;
    std::vector<Gate4> gates;
    std::vector<std::array<Gate4, kSu4ParamCount>> derivs;

    Circuit(std::span<const double> params, const QnnConfig& cfg, bool with_derivs)
        : pairs(brickwork_pairs(cfg.num_qubits, cfg.depth)) {
        require_size(params.size(), cfg.param_count(), "circuit parameters");
        gates.reserve(pairs.size());
        if (with_derivs) derivs.reserve(pairs.size());
        for (std::size_t g = 0; g < pairs.size(); ++g) {
            const auto p = Su4Params::from(params.subspan(g * kSu4ParamCount, kSu4ParamCount));
            gates.push_back(su4_gate(p));
            if (with_derivs) derivs.push_back(su4_gate_derivatives(p));
        }
    }
};

std::vector<double> probs_from_state(std::span<const cplx> amps, const QnnConfig& cfg) {
    const int shift = cfg.num_qubits - cfg.measured;
    std::vector<double> p(std::size_t{1} << cfg.measured, 0.0);
    for (std::size_t j = 0; j < amps.size(); ++j) p[j >> shift] += std::norm(amps[j]);
    return p;
}

StateVector run_forward(std::span<const double> input, const Circuit& circuit, const QnnConfig& cfg) {
    StateVector psi = amplitude_encode(input, cfg.num_qubits);
    for (std::size_t g = 0; g < circuit.gates.size(); ++g) {
        apply_gate_raw(psi.amplitudes(), circuit.gates[g], pair_bits(cfg.num_qubits, circuit.pairs[g]));
    }
    return psi;
}

/// Adjoint pass from the final state. `psi` is consumed (uncomputed to the input).
void run_backward(StateVector psi, std::span<const double> cotangent, const Circuit& circuit,
                  const QnnConfig& cfg, std::span<double> grad) {
    const auto p = probs_from_state(psi.amplitudes(), cfg);
    const int shift = cfg.num_qubits - cfg.measured;
    std::vector<double> w(p.size(), 0.0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.logit_count); ++i) {
        w[i] = cotangent[i] / (p[i] + cfg.log_floor);
    }
    std::vector<cplx> lambda(psi.dim());
    for (std::size_t j = 0; j < psi.dim(); ++j) lambda[j] = w[j >> shift] * psi[j];

    for (std::size_t gi = circuit.gates.size(); gi-- > 0;) {
        const PairBits bits = pair_bits(cfg.num_qubits, circuit.pairs[gi]);
        const Gate4 udag = dagger(circuit.gates[gi]);
        apply_gate_raw(psi.amplitudes(), udag, bits);
        const Gate4 m = overlap_matrix(lambda, psi.amplitudes(), bits);
        const auto& du = circuit.derivs[gi];
        for (std::size_t k = 0; k < kSu4ParamCount; ++k) {
            double acc = 0.0;
            for (std::size_t e = 0; e < 16; ++e) acc += (du[k][e] * m[e]).real();
            grad[gi * kSu4ParamCount + k] = 2.0 * acc;
        }
        apply_gate_raw(lambda, udag, bits);
    }
}

/// Forward-mode pass. Returns the final state; fills logit tangent `out`.
StateVector run_tangent(std::span<const double> input, const Circuit& circuit,
                        std::span<const double> tangent, const QnnConfig& cfg,
                        std::span<double> out) {
    StateVector psi = amplitude_encode(input, cfg.num_qubits);
    std::vector<cplx> dpsi(psi.dim(), cplx{0.0, 0.0});
    for (std::size_t g = 0; g < circuit.gates.size(); ++g) {
        Gate4 du{};
        const auto& d = circuit.derivs[g];
        for (std::size_t k = 0; k < kSu4ParamCount; ++k) {
            const double t = tangent[g * kSu4ParamCount + k];
            if (t == 0.0) continue;
            for (std::size_t e = 0; e < 16; ++e) du[e] += t * d[k][e];
        }
        apply_gate_tangent(psi.amplitudes(), dpsi, circuit.gates[g], du,
                           pair_bits(cfg.num_qubits, circuit.pairs[g]));
    }
    const auto p = probs_from_state(psi.amplitudes(), cfg);
    const int shift = cfg.num_qubits - cfg.measured;
    std::vector<double> dp(p.size(), 0.0);
    for (std::size_t j = 0; j < psi.dim(); ++j) {
        dp[j >> shift] += 2.0 * (std::conj(psi[j]) * dpsi[j]).real();
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = dp[i] / (p[i] + cfg.log_floor);
    return psi;
}

}  // namespace

// --- StateVector -----------------------------------------------------------

StateVector::StateVector(int num_qubits)
    : num_qubits_(num_qubits), amps_(std::size_t{1} << num_qubits, cplx{0.0, 0.0}) {}

double StateVector::norm() const {
    double s = 0.0;
    for (const auto& a : amps_) s += std::norm(a);
    return std::sqrt(s);
}

StateVector StateVector::basis(int num_qubits, std::size_t index) {
    StateVector s(num_qubits);
    s.amps_.at(index) = 1.0;
    return s;
}

// --- QnnConfig -------------------------------------------------------------

void QnnConfig::validate() const {
    if (num_qubits < 2 || num_qubits > 16) throw ConfigError("qnn: num_qubits must be in [2, 16]");
    if (depth < 1) throw ConfigError("qnn: depth must be >= 1");
    if (measured < 1 || measured > num_qubits) throw ConfigError("qnn: measured qubits K must be in [1, L]");
    if (logit_count < 1 || static_cast<std::size_t>(logit_count) > (std::size_t{1} << measured)) {
        throw ConfigError("qnn: logit_count must be in [1, 2^K]");
    }
    if (!(log_floor > 0.0)) throw ConfigError("qnn: log_floor must be positive");
}

std::size_t QnnConfig::gates_per_block() const {
    const auto n = static_cast<std::size_t>(num_qubits);
    return n / 2 + (n - 1) / 2;
}

LogitLayout QnnConfig::layout() const {
    return logit_count == 20 ? LogitLayout::task() : LogitLayout::auxiliary();
}

QnnConfig QnnConfig::auxiliary(int depth) { return {10, depth, 4, 16, 1e-12}; }
QnnConfig QnnConfig::task(int depth) { return {10, depth, 5, 20, 1e-12}; }

Su4Params Su4Params::from(std::span<const double> p) {
    require_size(p.size(), kSu4ParamCount, "SU(4) parameters");
    Su4Params s;
    std::copy(p.begin(), p.end(), s.v.begin());
    return s;
}

// --- gate algebra ----------------------------------------------------------

Gate2 rz(double angle) {
    return {std::exp(-kI * (angle / 2)), cplx{0, 0}, cplx{0, 0}, std::exp(kI * (angle / 2))};
}

Gate2 ry(double angle) {
    const double c = std::cos(angle / 2), s = std::sin(angle / 2);
    return {cplx{c, 0}, cplx{-s, 0}, cplx{s, 0}, cplx{c, 0}};
}

Gate2 euler_zyz(double phi, double theta, double omega) {
    return mul2(rz(phi), mul2(ry(theta), rz(omega)));
}

Gate4 kron(const Gate2& a, const Gate2& b) {
    Gate4 r;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                for (int l = 0; l < 2; ++l) r[(2 * i + k) * 4 + (2 * j + l)] = a[2 * i + j] * b[2 * k + l];
    return r;
}

Gate4 matmul(const Gate4& a, const Gate4& b) {
    Gate4 r{};
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 4; ++k) {
            const cplx aik = a[i * 4 + k];
            for (int j = 0; j < 4; ++j) r[i * 4 + j] += aik * b[k * 4 + j];
        }
    return r;
}

Gate4 dagger(const Gate4& a) {
    Gate4 r;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) r[i * 4 + j] = std::conj(a[j * 4 + i]);
    return r;
}

Gate4 interaction_core(double tx, double ty, double tz) {
    // The three Pauli pairs commute and square to I, so each factor is cos - i sin P.
    auto factor = [](double t, const Gate4& pp) {
        Gate4 r = scale4(cplx{0.0, -std::sin(t)}, pp);
        for (int i = 0; i < 4; ++i) r[i * 4 + i] += std::cos(t);
        return r;
    };
    return matmul(factor(tx, pauli_pair(kPauliX)),
                  matmul(factor(ty, pauli_pair(kPauliY)), factor(tz, pauli_pair(kPauliZ))));
}

Gate4 su4_gate(const Su4Params& p) {
    const auto& v = p.v;
    const Gate4 a = kron(euler_zyz(v[0], v[1], v[2]), euler_zyz(v[3], v[4], v[5]));
    const Gate4 b = kron(euler_zyz(v[6], v[7], v[8]), euler_zyz(v[9], v[10], v[11]));
    return matmul(a, matmul(interaction_core(v[12], v[13], v[14]), b));
}

std::array<Gate4, kSu4ParamCount> su4_gate_derivatives(const Su4Params& p) {
    const auto& v = p.v;
    const Gate2 mz = scale2(-0.5 * kI, kPauliZ);
    const Gate2 my = scale2(-0.5 * kI, kPauliY);

    // d/d(phi, theta, omega) of Rz(phi) Ry(theta) Rz(omega).
    auto euler_derivs = [&](double phi, double theta, double omega) {
        const Gate2 zp = rz(phi), yt = ry(theta), zo = rz(omega);
        const Gate2 e = mul2(zp, mul2(yt, zo));
        return std::array<Gate2, 4>{e, mul2(mz, e), mul2(zp, mul2(mul2(my, yt), zo)), mul2(e, mz)};
    };

    const auto a1 = euler_derivs(v[0], v[1], v[2]);
    const auto a2 = euler_derivs(v[3], v[4], v[5]);
    const auto b1 = euler_derivs(v[6], v[7], v[8]);
    const auto b2 = euler_derivs(v[9], v[10], v[11]);
    const Gate4 core = interaction_core(v[12], v[13], v[14]);
    const Gate4 a = kron(a1[0], a2[0]);
    const Gate4 b = kron(b1[0], b2[0]);
    const Gate4 cb = matmul(core, b);
    const Gate4 ac = matmul(a, core);

    std::array<Gate4, kSu4ParamCount> d;
    for (int k = 0; k < 3; ++k) {
        d[k] = matmul(kron(a1[k + 1], a2[0]), cb);
        d[3 + k] = matmul(kron(a1[0], a2[k + 1]), cb);
        d[6 + k] = matmul(ac, kron(b1[k + 1], b2[0]));
        d[9 + k] = matmul(ac, kron(b1[0], b2[k + 1]));
    }
    const Gate2* paulis[3] = {&kPauliX, &kPauliY, &kPauliZ};
    for (int k = 0; k < 3; ++k) {
        // d/dt exp(-i t P x P) = -i (P x P) exp(...); the Pauli pairs commute with the core.
        const Gate4 dcore = matmul(scale4(-kI, pauli_pair(*paulis[k])), core);
        d[12 + k] = matmul(a, matmul(dcore, b));
    }
    return d;
}

// --- circuit ----------------------------------------------------------------

StateVector amplitude_encode(std::span<const double> raw, int num_qubits) {
    StateVector s(num_qubits);
    if (raw.size() > s.dim()) {
        throw ShapeError("amplitude_encode: input of length " + std::to_string(raw.size()) +
                         " does not fit in " + std::to_string(s.dim()) + " amplitudes");
    }
    double n2 = 0.0;
    for (double x : raw) n2 += x * x;
    if (!(n2 > 0.0) || !std::isfinite(n2)) {
        throw EncodingError("amplitude_encode: input has zero or non-finite norm");
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t i = 0; i < raw.size(); ++i) s[i] = raw[i] * inv;
    return s;
}

void apply_gate(StateVector& state, const Gate4& gate, int q) {
    if (q < 0 || q + 1 >= state.num_qubits()) throw ShapeError("apply_gate: pair out of range");
    apply_gate_raw(state.amplitudes(), gate, pair_bits(state.num_qubits(), q));
}

std::vector<int> brickwork_pairs(int num_qubits, int depth) {
    std::vector<int> pairs;
    for (int d = 0; d < depth; ++d) {
        for (int q = 0; q + 1 < num_qubits; q += 2) pairs.push_back(q);
        for (int q = 1; q + 1 < num_qubits; q += 2) pairs.push_back(q);
    }
    return pairs;
}

void apply_brickwork(StateVector& state, std::span<const double> params, const QnnConfig& cfg) {
    cfg.validate();
    if (state.num_qubits() != cfg.num_qubits) throw ConfigError("apply_brickwork: register size mismatch");
    if (params.size() != cfg.param_count()) {
        throw ConfigError("apply_brickwork: expected " + std::to_string(cfg.param_count()) +
                          " parameters, got " + std::to_string(params.size()));
    }
    const Circuit circuit(params, cfg, false);
    for (std::size_t g = 0; g < circuit.gates.size(); ++g) {
        apply_gate_raw(state.amplitudes(), circuit.gates[g], pair_bits(cfg.num_qubits, circuit.pairs[g]));
    }
}

std::vector<double> marginal_probs(const StateVector& state, const QnnConfig& cfg) {
    if (state.num_qubits() != cfg.num_qubits) throw ConfigError("marginal_probs: register size mismatch");
    return probs_from_state(state.amplitudes(), cfg);
}

std::vector<double> qnn_logits(std::span<const double> input, std::span<const double> params,
                               const QnnConfig& cfg) {
    return QnnModel(cfg).logits(input, params);
}

ParamVector qnn_vjp(std::span<const double> input, std::span<const double> params,
                    std::span<const double> cotangent, const QnnConfig& cfg) {
    return QnnModel(cfg).vjp(input, params, cotangent);
}

std::vector<double> qnn_jvp(std::span<const double> input, std::span<const double> params,
                            std::span<const double> tangent, const QnnConfig& cfg) {
    return QnnModel(cfg).jvp(input, params, tangent);
}

// --- QnnModel ---------------------------------------------------------------

QnnModel::QnnModel(QnnConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::string QnnModel::describe() const {
    return "qnn(L=" + std::to_string(cfg_.num_qubits) + ",D=" + std::to_string(cfg_.depth) +
           ",K=" + std::to_string(cfg_.measured) + ",logits=" + std::to_string(cfg_.logit_count) + ")";
}

void QnnModel::forward(std::span<const double> input, std::span<const double> params,
                       std::span<double> logits) const {
    check_shapes(params, logits.size());
    const Circuit circuit(params, cfg_, false);
    const StateVector psi = run_forward(input, circuit, cfg_);
    const auto p = probs_from_state(psi.amplitudes(), cfg_);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::log(p[i] + cfg_.log_floor);
}

void QnnModel::vjp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> cotangent, std::span<double> grad) const {
    check_shapes(params, cotangent.size());
    require_size(grad.size(), param_count(), "gradient output");
    const Circuit circuit(params, cfg_, true);
    run_backward(run_forward(input, circuit, cfg_), cotangent, circuit, cfg_, grad);
}

void QnnModel::jvp(std::span<const double> input, std::span<const double> params,
                   std::span<const double> tangent, std::span<double> out) const {
    check_shapes(params, out.size());
    require_size(tangent.size(), param_count(), "tangent");
    const Circuit circuit(params, cfg_, true);
    run_tangent(input, circuit, tangent, cfg_, out);
}

void QnnModel::value_and_vjp(std::span<const double> input, std::span<const double> params,
                             const CotangentFn& make_cotangent, std::span<double> logits,
                             std::span<double> grad) const {
    check_shapes(params, logits.size());
    require_size(grad.size(), param_count(), "gradient output");
    const Circuit circuit(params, cfg_, true);
    StateVector psi = run_forward(input, circuit, cfg_);
    const auto p = probs_from_state(psi.amplitudes(), cfg_);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::log(p[i] + cfg_.log_floor);
    std::vector<double> cot(logits.size(), 0.0);
    make_cotangent(logits, cot);
    run_backward(std::move(psi), cot, circuit, cfg_, grad);
}

void QnnModel::gauss_newton(std::span<const double> input, std::span<const double> params,
                            LogitBlock block, std::span<const double> tangent,
                            std::span<double> out) const {
    require_size(params.size(), param_count(), "parameter vector");
    require_size(tangent.size(), param_count(), "tangent");
    require_size(out.size(), param_count(), "gauss-newton output");
    const Circuit circuit(params, cfg_, true);
    std::vector<double> jt(logit_count());
    StateVector psi = run_tangent(input, circuit, tangent, cfg_, jt);
    for (std::size_t i = 0; i < jt.size(); ++i) {
        if (!block.contains(i)) jt[i] = 0.0;
    }
    run_backward(std::move(psi), jt, circuit, cfg_, out);
}

ParamVector QnnModel::init_params(std::uint64_t seed) const {
    auto gen = make_stream(seed, Stream::init);
    std::uniform_real_distribution<double> dist(-std::numbers::pi, std::numbers::pi);
    ParamVector p(param_count());
    for (auto& x : p) x = dist(gen);
    return p;
}

}  // namespace sublim::qsim
