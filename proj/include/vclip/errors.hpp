#pragma once

#include <stdexcept>
#include <string>

namespace vclip {

// Every failure raised by the library derives from Error. The CLI maps the
// subclasses onto process exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct InputTooLongError : Error { using Error::Error; };
struct DuplicateLabelError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct TrainingDiverged : Error { using Error::Error; };
struct SpecError : Error { using Error::Error; };
struct MissingArtifact : Error { using Error::Error; };

// Checkpoint loading.
struct ManifestError : Error { using Error::Error; };
struct ShapeMismatchError : Error { using Error::Error; };
struct TruncationError : Error { using Error::Error; };

// Clip files.
struct FormatError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };

}  // namespace vclip
