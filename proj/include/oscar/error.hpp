#pragma once

#include <stdexcept>
#include <string>

namespace oscar {

// Process exit codes used by the CLI. Every library error maps onto one.
enum class ExitCode : int {
    kOk = 0,
    kUsage = 2,
    kIo = 3,
    kFormat = 4,
    kNumeric = 5,
};

class Error : public std::runtime_error {
   public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

   private:
    ExitCode code_;
};

/// Shape or argument contract violated by a caller.
class ShapeError : public Error {
   public:
    explicit ShapeError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

class RangeError : public Error {
   public:
    explicit RangeError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

class IoError : public Error {
   public:
    explicit IoError(const std::string& what) : Error(ExitCode::kIo, what) {}
};

/// Malformed bitstream, checkpoint or calibration file; model fingerprint mismatch.
class FormatError : public Error {
   public:
    explicit FormatError(const std::string& what) : Error(ExitCode::kFormat, what) {}
};

/// Non-finite values, divergence, degenerate statistics.
class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error(ExitCode::kNumeric, what) {}
};

}  // namespace oscar
