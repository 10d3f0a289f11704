#pragma once

#include <stdexcept>
#include <string>

namespace dsac {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// No correspondences / empty input where at least one element is required.
struct EmptyInputError : Error {
  using Error::Error;
};

// Vector/matrix sizes do not match the declared interface.
struct DimensionMismatchError : Error {
  using Error::Error;
};

struct TooFewCorrespondencesError : Error {
  using Error::Error;
};

// Pool generation exhausted its retry budget without a single valid model.
struct AllDegenerateError : Error {
  using Error::Error;
};

// Selection requested on a pool with no valid entry.
struct AllInvalidError : Error {
  using Error::Error;
};

// Exact enumeration refused above the configured pool limit.
struct PoolTooLargeError : Error {
  using Error::Error;
};

// End-to-end training aborted; too many degenerate pools in a row.
struct AbortedRunError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace dsac
