#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sublim/model.hpp"

/// Exact statevector simulation of the brickwork QNN.
///
/// Register convention: qubit 0 is the most significant bit of the amplitude
/// index, so the marginal over the first K qubits is indexed by the top K bits
/// (big-endian bitstrings). A two-qubit gate on pair (q, q+1) acts on the local
/// basis |b_q b_{q+1}> with b_q as the high bit.
namespace sublim::qsim {

using cplx = std::complex<double>;

/// Row-major 4x4 complex matrix.
using Gate4 = std::array<cplx, 16>;
/// Row-major 2x2 complex matrix.
using Gate2 = std::array<cplx, 4>;

inline constexpr std::size_t kSu4ParamCount = 15;

/// 2^L complex amplitudes.
class StateVector {
public:
    StateVector() = default;
    explicit StateVector(int num_qubits);

    [[nodiscard]] int num_qubits() const { return num_qubits_; }
    [[nodiscard]] std::size_t dim() const { return amps_.size(); }
    [[nodiscard]] double norm() const;

    [[nodiscard]] std::span<cplx> amplitudes() { return amps_; }
    [[nodiscard]] std::span<const cplx> amplitudes() const { return amps_; }
    cplx& operator[](std::size_t i) { return amps_[i]; }
    const cplx& operator[](std::size_t i) const { return amps_[i]; }

    static StateVector basis(int num_qubits, std::size_t index);

private:
    int num_qubits_ = 0;
    std::vector<cplx> amps_;
};

struct QnnConfig {
    int num_qubits = 10;
    int depth = 4;           ///< brickwork blocks (even layer + odd layer)
    int measured = 4;        ///< K designated output qubits (the first K)
    int logit_count = 16;    ///< 16 auxiliary setup, 20 task setup
    double log_floor = 1e-12;

    void validate() const;
    [[nodiscard]] std::size_t gates_per_block() const;
    [[nodiscard]] std::size_t gate_count() const { return gates_per_block() * depth; }
    [[nodiscard]] std::size_t param_count() const { return gate_count() * kSu4ParamCount; }
    [[nodiscard]] LogitLayout layout() const;

    /// Auxiliary setup: K=4, 16 logits.
    static QnnConfig auxiliary(int depth);
    /// Task setup: K=5, first 20 of 32 marginals.
    static QnnConfig task(int depth);
};

/// 15 reals: single-qubit triples (phi, theta, omega) for A1, A2, B1, B2 followed
/// by the interaction angles (tx, ty, tz). U = (A1 x A2) exp(-i(tx XX + ty YY + tz ZZ)) (B1 x B2),
/// each local factor Rz(phi) Ry(theta) Rz(omega).
struct Su4Params {
    std::array<double, kSu4ParamCount> v{};

    static Su4Params from(std::span<const double> p);
};

Gate2 rz(double angle);
Gate2 ry(double angle);
/// Rz(phi) Ry(theta) Rz(omega)
Gate2 euler_zyz(double phi, double theta, double omega);
Gate4 kron(const Gate2& a, const Gate2& b);
Gate4 matmul(const Gate4& a, const Gate4& b);
Gate4 dagger(const Gate4& a);
/// exp(-i(tx XX + ty YY + tz ZZ))
Gate4 interaction_core(double tx, double ty, double tz);

Gate4 su4_gate(const Su4Params& p);
/// d U / d p_k for all 15 parameters.
std::array<Gate4, kSu4ParamCount> su4_gate_derivatives(const Su4Params& p);

/// Raw real vector, L2-normalized and zero-padded to 2^L.
/// Throws EncodingError on zero norm, ShapeError if it does not fit.
StateVector amplitude_encode(std::span<const double> raw, int num_qubits);

/// Applies a 4x4 gate to qubits (q, q+1).
void apply_gate(StateVector& state, const Gate4& gate, int q);

/// Qubit index of the first member of each gate's pair, in application order.
std::vector<int> brickwork_pairs(int num_qubits, int depth);

/// Applies the full circuit in place. Throws ShapeError on a parameter-length mismatch.
void apply_brickwork(StateVector& state, std::span<const double> params, const QnnConfig& cfg);

/// Marginal distribution over the first K qubits (length 2^K).
std::vector<double> marginal_probs(const StateVector& state, const QnnConfig& cfg);

std::vector<double> qnn_logits(std::span<const double> input, std::span<const double> params,
                               const QnnConfig& cfg);
/// J^T cotangent by an exact adjoint pass.
ParamVector qnn_vjp(std::span<const double> input, std::span<const double> params,
                    std::span<const double> cotangent, const QnnConfig& cfg);
/// J tangent by forward-mode propagation of the state tangent.
std::vector<double> qnn_jvp(std::span<const double> input, std::span<const double> params,
                            std::span<const double> tangent, const QnnConfig& cfg);

/// ModelHandle over the simulator. Inputs are raw (unnormalized) vectors of
/// length at most 2^L.
class QnnModel final : public Model {
public:
    using Model::jvp;
    using Model::vjp;

    explicit QnnModel(QnnConfig cfg);

    [[nodiscard]] const QnnConfig& config() const { return cfg_; }

    [[nodiscard]] std::size_t param_count() const override { return cfg_.param_count(); }
    [[nodiscard]] std::size_t logit_count() const override {
        return static_cast<std::size_t>(cfg_.logit_count);
    }
    [[nodiscard]] Family family() const override { return Family::quantum; }
    [[nodiscard]] LogitLayout layout() const override { return cfg_.layout(); }
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
    void gauss_newton(std::span<const double> input, std::span<const double> params,
                      LogitBlock block, std::span<const double> tangent,
                      std::span<double> out) const override;

    /// Angles drawn iid uniform in [-pi, pi).
    [[nodiscard]] ParamVector init_params(std::uint64_t seed) const override;

private:
    QnnConfig cfg_;
};

}  // namespace sublim::qsim
