// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace flownerf {

/// Base error. `category()` is a stable machine-parseable tag used by the CLI
/// to format its single-line failure output.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io", msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

}  // namespace flownerf
