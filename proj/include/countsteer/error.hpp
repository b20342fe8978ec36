#pragma once

#include <stdexcept>
#include <string>

namespace countsteer {

// Coarse failure classes. Each maps onto one CLI exit code.
enum class ErrorKind {
    usage,        // bad arguments or preconditions
    io,           // filesystem failures
    format,       // malformed artifact files
    numeric,      // NaN / Inf / divergence
    feasibility,  // placement or class balance cannot be reached
};

int exit_code_for(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define COUNTSTEER_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

COUNTSTEER_DEFINE_ERROR(InvalidArgument, usage)
COUNTSTEER_DEFINE_ERROR(InvalidRatio, usage)
COUNTSTEER_DEFINE_ERROR(UnknownShape, usage)
COUNTSTEER_DEFINE_ERROR(ShapeMismatch, usage)
COUNTSTEER_DEFINE_ERROR(BankMismatch, usage)
COUNTSTEER_DEFINE_ERROR(InertSite, usage)
COUNTSTEER_DEFINE_ERROR(GridMismatch, usage)
COUNTSTEER_DEFINE_ERROR(DisjointnessViolation, usage)
COUNTSTEER_DEFINE_ERROR(EmptyClassAtSite, usage)
COUNTSTEER_DEFINE_ERROR(IoError, io)
COUNTSTEER_DEFINE_ERROR(FormatError, format)
COUNTSTEER_DEFINE_ERROR(NonFiniteActivation, numeric)
COUNTSTEER_DEFINE_ERROR(DivergedTraining, numeric)
COUNTSTEER_DEFINE_ERROR(ConvergenceFailure, numeric)
COUNTSTEER_DEFINE_ERROR(PlacementInfeasible, feasibility)
COUNTSTEER_DEFINE_ERROR(BalanceUnreachable, feasibility)

#undef COUNTSTEER_DEFINE_ERROR

}  // namespace countsteer
