#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fsd {

enum class ErrorCode {
    MissingFile,
    MixedShapes,
    NonImageData,
    CorruptFile,
    DegenerateRange,
    PatchTooLarge,
    SubsetTooLarge,
    InvalidConfig,
    ShapeMismatch,
    WindowTooLarge,
    BatchTooSmall,
    NonUnitNorm,
    NonFiniteTerm,
    NonFiniteLoss,
    DegenerateReference,
    EmptyTestSet,
    CropOutOfBounds,
    SchemaMismatch,
};

std::string_view to_string(ErrorCode code);

// Every library failure surfaces as an Error carrying a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Process exit codes used by the CLI: 0 ok, 2 invalid config, 3 data error,
// 4 training divergence.
int exit_code_for(ErrorCode code);

} // namespace fsd
