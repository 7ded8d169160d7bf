// errors.hpp: error kinds shared by every tactsim module

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tactsim {

enum class ErrorKind {
    DimensionOverflow,
    DimensionMismatch,
    BadFactor,
    InconsistentParams,
    BasisMismatch,
    NoConvergence,
    StepSizeTooLarge,
    TraceDrift,
    RateNegative,
    DegenerateMeanSpin,
    ChannelMissing,
    ParseError,
    ValidationError,
    IoError,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

} // namespace tactsim
