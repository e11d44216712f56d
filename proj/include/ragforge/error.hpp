#pragma once

#include <stdexcept>
#include <string>

namespace ragforge {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file: bad JSON, schema violation, duplicate id.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Invalid argument or configuration value.
class ValidationError : public Error {
 public:
  ValidationError(std::string path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// A remote service (generator, embedder, reranker) failed after retries.
class ServiceError : public Error {
 public:
  using Error::Error;
};

// The prompt exceeded the generator's input window.
class ContextLengthError : public ServiceError {
 public:
  ContextLengthError(std::size_t tokens, std::size_t limit)
      : ServiceError("prompt has " + std::to_string(tokens) + " tokens, limit is " +
                     std::to_string(limit)),
        tokens_(tokens),
        limit_(limit) {}
  std::size_t tokens() const noexcept { return tokens_; }
  std::size_t limit() const noexcept { return limit_; }

 private:
  std::size_t tokens_;
  std::size_t limit_;
};

// A client lacks a capability (logprobs, scoring) a pipeline depends on.
class UnsupportedCapability : public Error {
 public:
  explicit UnsupportedCapability(std::string capability)
      : Error("generator does not support " + capability), capability_(std::move(capability)) {}
  const std::string& capability() const noexcept { return capability_; }

 private:
  std::string capability_;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

}  // namespace ragforge
