#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fruitgrader {

/// Failure categories raised across the library. Callers switch on the kind;
/// the message carries the human-readable detail.
enum class ErrorKind {
    MalformedFile,
    UnsupportedFormat,
    WrongChannelCount,
    ZeroDimension,
    EmptyIntersection,
    NegativeSigma,
    OutOfBounds,
    InvalidArgument,

    EmptyDataset,
    EmptyClass,
    UnreadableDirectory,
    MissingColumn,
    NonNumericCoordinate,
    BoxOutOfBounds,
    BadFractions,
    InsufficientClassCount,
    DimensionMismatch,
    NoPositives,
    NoNegatives,
    ExhaustedNegatives,

    WindowTooSmall,
    DegenerateWeights,
    DegenerateSplit,
    StageTargetUnreachable,
    ImageSmallerThanWindow,

    ShapeMismatch,
    NonFiniteActivation,
    NonFiniteGradient,
    LabelOutOfRange,
    NoHeadFound,

    LengthMismatch,
    IdOutOfRange,
    EmptyMatrix,

    VersionMismatch,
    CorruptContainer,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace fruitgrader
