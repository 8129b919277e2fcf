#include "fsdenoise/error.hpp"

namespace fsd {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MixedShapes: return "MixedShapes";
    case ErrorCode::NonImageData: return "NonImageData";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::DegenerateRange: return "DegenerateRange";
    case ErrorCode::PatchTooLarge: return "PatchTooLarge";
    case ErrorCode::SubsetTooLarge: return "SubsetTooLarge";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::WindowTooLarge: return "WindowTooLarge";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::NonUnitNorm: return "NonUnitNorm";
    case ErrorCode::NonFiniteTerm: return "NonFiniteTerm";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DegenerateReference: return "DegenerateReference";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::CropOutOfBounds: return "CropOutOfBounds";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    }
    return "Unknown";
}

int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::PatchTooLarge:
    case ErrorCode::SubsetTooLarge:
    case ErrorCode::WindowTooLarge:
    case ErrorCode::BatchTooSmall:
    case ErrorCode::SchemaMismatch:
        return 2;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteTerm:
        return 4;
    default:
        return 3;
    }
}

} // namespace fsd
