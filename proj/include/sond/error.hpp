#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sond {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class OutOfRangeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A frame has more simultaneously active speakers than the codec allows.
class OverlapExceededError : public Error {
 public:
  OverlapExceededError(std::size_t frame, int active, int max_active)
      : Error("frame " + std::to_string(frame) + " has " + std::to_string(active) +
              " active speakers, maximum is " + std::to_string(max_active)),
        frame_(frame),
        active_(active) {}
  OverlapExceededError(int active, int max_active)
      : Error("speaker set has " + std::to_string(active) + " active speakers, maximum is " +
              std::to_string(max_active)),
        frame_(0),
        active_(active) {}
  std::size_t frame() const { return frame_; }
  int active() const { return active_; }

 private:
  std::size_t frame_;
  int active_;
};

class SimulationError : public Error {
 public:
  using Error::Error;
};

class ClusteringError : public Error {
 public:
  using Error::Error;
};

class ScoringError : public Error {
 public:
  using Error::Error;
};

}  // namespace sond
