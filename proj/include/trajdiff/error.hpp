#pragma once

#include <stdexcept>
#include <string>

namespace trajdiff {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments: shapes, ranges, malformed configuration.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class UnreachableGoal : public Error {
 public:
  using Error::Error;
};

/// A mask channel that should encode an endpoint is empty.
class NoEndpoint : public Error {
 public:
  using Error::Error;
};

/// The detector returned nothing to steer toward.
class NoHuman : public Error {
 public:
  using Error::Error;
};

/// Nothing usable survived a conversion (e.g. every depth sample invalid).
class EmptyPath : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}
}  // namespace detail

}  // namespace trajdiff
