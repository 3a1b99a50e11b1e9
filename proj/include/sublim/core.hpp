#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sublim {

/// Flat real parameter vector of a model (circuit angles or network weights).
using ParamVector = std::vector<double>;

/// Half-open index range [begin, end) into a logit vector.
struct LogitBlock {
    std::size_t begin = 0;
    std::size_t end = 0;

    [[nodiscard]] std::size_t size() const { return end - begin; }
    [[nodiscard]] bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const LogitBlock&) const = default;
};

/// Logit layout shared by the auxiliary and the task setups.
/// The first block always carries the ten MNIST classes; the second block is
/// either the auxiliary readout (6 logits) or the Fashion-MNIST classes (10).
struct LogitLayout {
    LogitBlock mnist{0, 10};
    LogitBlock second{10, 20};

    [[nodiscard]] std::size_t total() const { return second.end; }

    static LogitLayout auxiliary() { return {{0, 10}, {10, 16}}; }
    static LogitLayout task() { return {{0, 10}, {10, 20}}; }
    bool operator==(const LogitLayout&) const = default;
};

/// Read-only row-major matrix view (one example per row).
struct Rows {
    std::span<const double> data;
    std::size_t dim = 0;

    [[nodiscard]] std::size_t size() const { return dim ? data.size() / dim : 0; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const { return data.subspan(i * dim, dim); }
};

// Error hierarchy. The CLI maps each family to a distinct exit code.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or mismatched shapes (exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// Missing or malformed input data (exit code 3).
class DataError : public Error {
public:
    enum class Kind { io, bad_magic, truncated, count_mismatch, invalid };

    DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Zero-norm vector handed to amplitude encoding.
class EncodingError : public DataError {
public:
    explicit EncodingError(const std::string& what) : DataError(Kind::invalid, what) {}
};

/// Divergence, non-finite values, undefined ratios (exit code 4).
class NumericalError : public Error {
public:
    using Error::Error;
};

inline void require_size(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
        throw ShapeError(std::string(what) + ": expected length " + std::to_string(want) +
                         ", got " + std::to_string(got));
    }
}

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
ParamVector difference(std::span<const double> a, std::span<const double> b);

}  // namespace sublim
