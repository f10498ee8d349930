#ifndef CARN_ERRORS_HPP
#define CARN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace carn {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error("invalid config field '" + field + "': " + what),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyCastError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace carn

#endif  // CARN_ERRORS_HPP
