#pragma once

#include <stdexcept>
#include <string>

namespace cmf {

// Dimension / shape contract violations. Messages carry the offending shapes.
class shape_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Engine misuse: degenerate softmax rows, non-scalar backward, NaN outputs.
class tensor_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Base for binary file format problems.
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class bad_magic_error : public format_error {
 public:
  using format_error::format_error;
};

class bad_version_error : public format_error {
 public:
  using format_error::format_error;
};

class truncated_file_error : public format_error {
 public:
  using format_error::format_error;
};

// Configuration problems: unknown keys, checkpoint/data mismatches.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmf
