#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace cmf {

// Base error type for the whole library. Subsystems that need a
// distinguishable failure mode (CLI exit codes) derive from it.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <class T, class... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}

}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::cat_into(os, args...);
  return os.str();
}

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
  throw Error(cat(args...));
}

// Config schema violations; the CLI maps these to exit code 3.
struct SchemaError : Error {
  using Error::Error;
};

template <class... Args>
[[noreturn]] void fail_schema(const Args&... args) {
  throw SchemaError(cat(args...));
}

// A required artifact (checkpoint, dataset) is absent; CLI exit code 2.
struct MissingArtifact : Error {
  using Error::Error;
};

}  // namespace cmf
