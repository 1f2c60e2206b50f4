#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace rsb {

// Base class for every error raised by the library. The CLI maps the
// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (model, scene, trainer, checkpoint mismatch).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent data on disk or in memory.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf values or failed numerical verification.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward() on a non-scalar tensor.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Runs fn and re-throws any library error with "stage: " prepended, keeping
// the original error type.
template <typename Fn>
decltype(auto) with_stage(const char* stage, Fn&& fn) {
  auto prefix = [stage](const std::exception& e) {
    return std::string(stage) + ": " + e.what();
  };
  try {
    return std::forward<Fn>(fn)();
  } catch (const ShapeError& e) {
    throw ShapeError(prefix(e));
  } catch (const ConfigError& e) {
    throw ConfigError(prefix(e));
  } catch (const DataError& e) {
    throw DataError(prefix(e));
  } catch (const NumericError& e) {
    throw NumericError(prefix(e));
  } catch (const ContractError& e) {
    throw ContractError(prefix(e));
  }
}

}  // namespace rsb
