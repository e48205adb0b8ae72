#include "exitbsde/error.hpp"

namespace exitbsde {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::AmbiguousNormal: return "AmbiguousNormal";
        case ErrorCode::DegenerateSampler: return "DegenerateSampler";
        case ErrorCode::NonFiniteState: return "NonFiniteState";
        case ErrorCode::UnsupportedDomain: return "UnsupportedDomain";
        case ErrorCode::EmptySample: return "EmptySample";
        case ErrorCode::ContractionViolated: return "ContractionViolated";
        case ErrorCode::PicardDiverged: return "PicardDiverged";
        case ErrorCode::MissingReference: return "MissingReference";
        case ErrorCode::InsufficientPoints: return "InsufficientPoints";
        case ErrorCode::NonPositiveValue: return "NonPositiveValue";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace exitbsde
