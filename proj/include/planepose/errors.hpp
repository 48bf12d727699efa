#pragma once

#include <stdexcept>
#include <string>

namespace planepose {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NonFiniteInput : Error { using Error::Error; };
struct ZeroOffset : Error { using Error::Error; };
struct DegenerateQuaternion : Error { using Error::Error; };
struct EmptyCorrespondences : Error { using Error::Error; };
struct DegenerateConfiguration : Error { using Error::Error; };
struct SingularNormalEquations : Error { using Error::Error; };
struct DegeneratePolygon : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };
struct MissingScores : Error { using Error::Error; };
struct MissingCosts : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };

}  // namespace planepose
