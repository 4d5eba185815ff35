#pragma once

#include <stdexcept>
#include <string>

namespace e3net {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidCoordinate : Error { using Error::Error; };
struct InsufficientChords : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct DegenerateVolume : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };
struct InvalidState : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct EmptyVideo : Error { using Error::Error; };
struct GenerationError : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct DegenerateTargets : Error { using Error::Error; };

}  // namespace e3net
