#pragma once

#include <stdexcept>
#include <string>

namespace vmscan {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File or device level I/O failure; the message names the failing layer.
struct IoError : Error {
  using Error::Error;
};

// Wrong signature where a specific on-disk format was expected.
struct BadMagic : Error {
  using Error::Error;
};

// Recognized format but a feature this reader deliberately does not handle
// (compression, encryption, snapshots, attribute lists, ...).
struct Unsupported : Error {
  using Error::Error;
};

// Structurally invalid filesystem metadata.
struct CorruptFs : Error {
  using Error::Error;
};

// Truncated or malformed NTFS mapping-pairs region.
struct MalformedRunList : CorruptFs {
  using CorruptFs::CorruptFs;
};

// Operation requires a different image mode (e.g. overlay predicate on RAW).
struct WrongMode : Error {
  using Error::Error;
};

struct TransportError : Error {
  using Error::Error;
};

// Zero-length or otherwise meaningless write record.
struct MalformedRecord : TransportError {
  using TransportError::TransportError;
};

struct GeometryError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace vmscan
