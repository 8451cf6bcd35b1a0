// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tips {

// Every failure raised by the library derives from Error. The CLI maps the
// category onto its exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A softmax slice whose entries are all -inf.
class DegenerateRowError : public NumericalError {
 public:
  explicit DegenerateRowError(std::size_t row)
      : NumericalError("degenerate attention row " + std::to_string(row) +
                       ": every entry is masked"),
        row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// NaN or inf in activations; carries the layer index (-1 for the readout).
class DivergenceError : public NumericalError {
 public:
  DivergenceError(int layer, const std::string& what)
      : NumericalError("numerical divergence at layer " + std::to_string(layer) +
                       ": " + what),
        layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

}  // namespace tips
