#include "fruitgrader/error.hpp"

namespace fruitgrader {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::MalformedFile: return "MalformedFile";
        case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
        case ErrorKind::WrongChannelCount: return "WrongChannelCount";
        case ErrorKind::ZeroDimension: return "ZeroDimension";
        case ErrorKind::EmptyIntersection: return "EmptyIntersection";
        case ErrorKind::NegativeSigma: return "NegativeSigma";
        case ErrorKind::OutOfBounds: return "OutOfBounds";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::EmptyDataset: return "EmptyDataset";
        case ErrorKind::EmptyClass: return "EmptyClass";
        case ErrorKind::UnreadableDirectory: return "UnreadableDirectory";
        case ErrorKind::MissingColumn: return "MissingColumn";
        case ErrorKind::NonNumericCoordinate: return "NonNumericCoordinate";
        case ErrorKind::BoxOutOfBounds: return "BoxOutOfBounds";
        case ErrorKind::BadFractions: return "BadFractions";
        case ErrorKind::InsufficientClassCount: return "InsufficientClassCount";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NoPositives: return "NoPositives";
        case ErrorKind::NoNegatives: return "NoNegatives";
        case ErrorKind::ExhaustedNegatives: return "ExhaustedNegatives";
        case ErrorKind::WindowTooSmall: return "WindowTooSmall";
        case ErrorKind::DegenerateWeights: return "DegenerateWeights";
        case ErrorKind::DegenerateSplit: return "DegenerateSplit";
        case ErrorKind::StageTargetUnreachable: return "StageTargetUnreachable";
        case ErrorKind::ImageSmallerThanWindow: return "ImageSmallerThanWindow";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
        case ErrorKind::NoHeadFound: return "NoHeadFound";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::IdOutOfRange: return "IdOutOfRange";
        case ErrorKind::EmptyMatrix: return "EmptyMatrix";
        case ErrorKind::VersionMismatch: return "VersionMismatch";
        case ErrorKind::CorruptContainer: return "CorruptContainer";
    }
    return "Unknown";
}

}  // namespace fruitgrader
