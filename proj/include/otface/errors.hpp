#pragma once

#include <stdexcept>
#include <string>

namespace otface {

// Stable error categories. The numeric values are part of the C API
// (see otface.h) and must not be reordered.
enum class ErrorCode : int {
  kDimension = 1,
  kConfiguration = 2,
  kDegenerateInput = 3,
  kNumericalRegime = 4,
  kContract = 5,
  kSize = 6,
  kParse = 7,
  kIo = 8,
  kNonFinite = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define OTFACE_DEFINE_ERROR(name, code)                               \
  class name : public Error {                                         \
   public:                                                            \
    explicit name(const std::string& what) : Error(code, what) {}     \
  };

OTFACE_DEFINE_ERROR(DimensionError, ErrorCode::kDimension)
OTFACE_DEFINE_ERROR(ConfigError, ErrorCode::kConfiguration)
OTFACE_DEFINE_ERROR(DegenerateInputError, ErrorCode::kDegenerateInput)
OTFACE_DEFINE_ERROR(NumericalRegimeError, ErrorCode::kNumericalRegime)
OTFACE_DEFINE_ERROR(ContractError, ErrorCode::kContract)
OTFACE_DEFINE_ERROR(SizeError, ErrorCode::kSize)
OTFACE_DEFINE_ERROR(ParseError, ErrorCode::kParse)
OTFACE_DEFINE_ERROR(IoError, ErrorCode::kIo)
OTFACE_DEFINE_ERROR(NonFiniteError, ErrorCode::kNonFinite)

#undef OTFACE_DEFINE_ERROR

}  // namespace otface
