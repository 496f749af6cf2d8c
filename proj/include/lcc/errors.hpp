#pragma once

#include <stdexcept>
#include <string>

namespace lcc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Kernel contract violations.
struct ShapeError : Error { using Error::Error; };
struct MaskError : Error { using Error::Error; };            // all -inf softmax row, malformed mask
struct DistributionError : Error { using Error::Error; };    // probability rows do not sum to 1
struct EvalError : Error { using Error::Error; };            // non-finite value where finite required
struct PositionError : Error { using Error::Error; };        // position id >= max_position

// File-format errors, one type per failure mode.
struct FormatError : Error { using Error::Error; };
struct BadMagicError : FormatError { using FormatError::FormatError; };
struct BadVersionError : FormatError { using FormatError::FormatError; };
struct CrcError : FormatError { using FormatError::FormatError; };
struct TruncatedError : FormatError { using FormatError::FormatError; };

// Pipeline errors. The CLI maps these to exit codes.
struct FingerprintError : Error { using Error::Error; };     // exit 4
struct TrainingError : Error { using Error::Error; };        // exit 2
struct BudgetError : Error { using Error::Error; };          // exit 3
struct MissingInputError : Error { using Error::Error; };    // exit 5

} // namespace lcc
