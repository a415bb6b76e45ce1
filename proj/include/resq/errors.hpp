#pragma once

#include <stdexcept>
#include <string>

namespace resq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationError : Error { using Error::Error; };
struct SampleSkipError : Error { using Error::Error; };
struct ResolverError : Error { using Error::Error; };
struct EncodingError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct VersionError : Error { using Error::Error; };
struct IntegrityError : Error { using Error::Error; };
struct ShapeMismatchError : Error { using Error::Error; };

struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_number(line) {}
  std::size_t line_number;
};

}  // namespace resq
