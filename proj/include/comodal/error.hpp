// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace comodal {

/// Base of every error raised by the library. `category()` is a stable,
/// machine-parseable token used by the CLI on stderr.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define COMODAL_DEFINE_ERROR(Name, token)                                     \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(token, what) {}            \
  }

COMODAL_DEFINE_ERROR(ShapeError, "shape");
COMODAL_DEFINE_ERROR(ParameterError, "parameter");
COMODAL_DEFINE_ERROR(ContractError, "contract");
COMODAL_DEFINE_ERROR(ConfigError, "config");
COMODAL_DEFINE_ERROR(CapabilityError, "capability");
COMODAL_DEFINE_ERROR(LookupError, "lookup");
COMODAL_DEFINE_ERROR(FormatError, "format");
COMODAL_DEFINE_ERROR(IoError, "io");
COMODAL_DEFINE_ERROR(DivergenceError, "divergence");

#undef COMODAL_DEFINE_ERROR

}  // namespace comodal
