#pragma once

#include <stdexcept>
#include <string>

namespace pepp {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// -- numerical / geometric failures ------------------------------------------
struct NonPositiveDepth : Error {
  explicit NonPositiveDepth(const std::string& msg) : Error(msg) {}
};
struct TooFewPoints : Error {
  explicit TooFewPoints(const std::string& msg) : Error(msg) {}
};
struct DegenerateConfiguration : Error {
  explicit DegenerateConfiguration(const std::string& msg) : Error(msg) {}
};

// -- shape / dimension mismatches --------------------------------------------
struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& msg) : Error(msg) {}
};
struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};
struct NonSquarePatchCount : Error {
  explicit NonSquarePatchCount(const std::string& msg) : Error(msg) {}
};

// -- empty-input violations ---------------------------------------------------
struct EmptyMaskSet : Error {
  explicit EmptyMaskSet(const std::string& msg) : Error(msg) {}
};
struct EmptySampleSet : Error {
  explicit EmptySampleSet(const std::string& msg) : Error(msg) {}
};
struct NoValidKeypoints : Error {
  explicit NoValidKeypoints(const std::string& msg) : Error(msg) {}
};

// -- harness-level failures ---------------------------------------------------
struct InfeasiblePlacement : Error {
  explicit InfeasiblePlacement(const std::string& msg) : Error(msg) {}
};
struct InvalidCamera : Error {
  explicit InvalidCamera(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

}  // namespace pepp
