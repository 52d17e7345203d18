#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffanalog {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed model: undeclared symbols, duplicate assignments, bad declarations.
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Runtime failure while evaluating an expression (division by zero, log domain).
class EvalError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during time integration.
class SolveError : public Error {
 public:
  explicit SolveError(const std::string& what, std::size_t step = 0)
      : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Backward reconstruction of the state diverged from the forward pass.
class AdjointInstabilityError : public SolveError {
 public:
  using SolveError::SolveError;
};

/// Invalid user configuration or file content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Runs `f`, rethrowing any library error as the same type with `prefix`
/// prepended to the message.
template <class F>
auto with_error_context(const std::string& prefix, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const AdjointInstabilityError& e) {
    throw AdjointInstabilityError(prefix + ": " + e.what(), e.step());
  } catch (const SolveError& e) {
    throw SolveError(prefix + ": " + e.what(), e.step());
  } catch (const EvalError& e) {
    throw EvalError(prefix + ": " + e.what());
  } catch (const ModelError& e) {
    throw ModelError(prefix + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + ": " + e.what());
  } catch (const Error& e) {
    throw Error(prefix + ": " + e.what());
  }
}

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

}  // namespace diffanalog
