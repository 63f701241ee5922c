#pragma once

#include <stdexcept>
#include <string>

namespace xphase {

// A mask with no lesion voxels cannot be pooled; callers must treat this as
// a hard failure rather than substituting a fallback.
struct EmptyMaskError : std::runtime_error {
  explicit EmptyMaskError(const std::string& what) : std::runtime_error(what) {}
};

// File-format failures carry a kind so callers and tests can tell the cases
// apart.
struct IoError : std::runtime_error {
  enum class Kind { bad_magic, bad_header, truncated, length_mismatch, io };
  Kind kind;
  IoError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

}  // namespace xphase
