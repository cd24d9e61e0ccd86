#pragma once

#include <stdexcept>
#include <string>

namespace geolevels {

/// Root of the library's exception hierarchy. The category decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  enum class Category { config = 2, data = 3, divergence = 4, io = 5 };

  Error(Category category, const std::string& what) : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  Category category_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

/// Bad input data: shape mismatches, empty sets, degenerate statistics.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::data, what) {}
};

class ShapeError : public DataError {
 public:
  explicit ShapeError(const std::string& what) : DataError("shape error: " + what) {}
};

class DivergenceError : public Error {
 public:
  DivergenceError(long step, const std::string& what)
      : Error(Category::divergence, "divergence at step " + std::to_string(step) + ": " + what),
        step_(step),
        detail_(what) {}

  long step() const noexcept { return step_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  long step_;
  std::string detail_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Category::io, what) {}
};

/// Checkpoint integrity failure (checksum mismatch or unparseable payload).
class CorruptionError : public IoError {
 public:
  explicit CorruptionError(const std::string& what) : IoError("corrupt artifact: " + what) {}
};

class VersionError : public IoError {
 public:
  explicit VersionError(const std::string& what) : IoError("version mismatch: " + what) {}
};

/// Wraps an error raised inside a pipeline stage, prefixing the stage name.
template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.step(), std::string(stage) + ": " + e.detail());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(std::string(stage) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(std::string(stage) + ": " + e.what());
  }
}

}  // namespace geolevels
