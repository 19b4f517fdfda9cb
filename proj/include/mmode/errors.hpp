#pragma once

#include <stdexcept>
#include <string>

namespace mmode {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MMODE_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

MMODE_DEFINE_ERROR(FormatError)
MMODE_DEFINE_ERROR(ShapeError)
MMODE_DEFINE_ERROR(ArgumentError)
MMODE_DEFINE_ERROR(ManifestError)
MMODE_DEFINE_ERROR(IoError)
MMODE_DEFINE_ERROR(DataError)
MMODE_DEFINE_ERROR(CheckpointError)

#undef MMODE_DEFINE_ERROR

}  // namespace mmode
