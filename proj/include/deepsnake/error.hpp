#pragma once

#include <stdexcept>
#include <string>

namespace deepsnake {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates an operation's precondition (bad sizes, degenerate curves,
/// empty masks, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file / payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Patch channel count differs from the network input channels.
class ChannelMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Training produced a non-finite loss.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace deepsnake
