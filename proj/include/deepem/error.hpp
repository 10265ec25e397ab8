#ifndef DEEPEM_ERROR_HPP_
#define DEEPEM_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace deepem {

// Exit-code families used by the CLI: config -> 2, data -> 3, numeric -> 4.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset container failures. Each is distinguishable by type.
class HeaderError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace deepem

#endif  // DEEPEM_ERROR_HPP_
