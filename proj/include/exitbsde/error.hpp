#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace exitbsde {

enum class ErrorCode {
    InvalidArgument,
    AmbiguousNormal,
    DegenerateSampler,
    NonFiniteState,
    UnsupportedDomain,
    EmptySample,
    ContractionViolated,
    PicardDiverged,
    MissingReference,
    InsufficientPoints,
    NonPositiveValue,
    ConfigError,
    IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Single exception type for the library; the code identifies the failure
/// class so callers can branch without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) throw Error(code, what);
}

}  // namespace exitbsde
