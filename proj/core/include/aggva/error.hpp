#pragma once

#include <stdexcept>
#include <string>

namespace aggva {

/// Broad failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind {
  Config,     // malformed experiment configuration
  Data,       // malformed or inconsistent dataset / checkpoint
  Numerical,  // factorization failure, degenerate bag, non-finite values
  Unsupported // requested combination the models do not define
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class DimensionMismatch : public Error {
 public:
  explicit DimensionMismatch(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class NotPositiveDefinite : public Error {
 public:
  explicit NotPositiveDefinite(const std::string& role)
      : Error(ErrorKind::Numerical, "matrix '" + role + "' is not positive definite at any jitter level"),
        role_(role) {}
  [[nodiscard]] const std::string& role() const noexcept { return role_; }

 private:
  std::string role_;
};

/// A bag whose aggregate mean is zero or undefined (all weights zero, empty bag, ...).
class DegenerateBag : public Error {
 public:
  DegenerateBag(const std::string& bag_id, const std::string& why)
      : Error(ErrorKind::Numerical, "degenerate bag '" + bag_id + "': " + why), bag_id_(bag_id) {}
  [[nodiscard]] const std::string& bag_id() const noexcept { return bag_id_; }

 private:
  std::string bag_id_;
};

class NonFiniteGradient : public Error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : Error(ErrorKind::Numerical, "non-finite gradient for parameter '" + param + "'"), param_(param) {}
  [[nodiscard]] const std::string& parameter() const noexcept { return param_; }

 private:
  std::string param_;
};

class Unsupported : public Error {
 public:
  explicit Unsupported(const std::string& what) : Error(ErrorKind::Unsupported, what) {}
};

}  // namespace aggva
