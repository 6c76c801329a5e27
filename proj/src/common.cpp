#include "gap/common.hpp"

namespace gap {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::RangeError: return "RangeError";
    case ErrorKind::OddHeadDim: return "OddHeadDim";
    case ErrorKind::EmptyDatabase: return "EmptyDatabase";
    case ErrorKind::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::EmptyMesh: return "EmptyMesh";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace gap
