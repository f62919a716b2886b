#pragma once

#include <stdexcept>
#include <string>

namespace lidar_rcnn {

/// Malformed config or dataset content. Process exit code 2.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training. Process exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable or unwritable files. Process exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitSchema = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

}  // namespace lidar_rcnn
