#pragma once

#include <stdexcept>
#include <string>

namespace sqz {

// Root of every error the library throws. The CLI maps the subclasses onto
// process exit codes (config 2, data 3, numeric 4, I/O 5).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a forward op, or a diverging loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Channel-consistency failure after (or during) network surgery.
class SurgeryError : public Error {
 public:
  using Error::Error;
};

}  // namespace sqz
