#pragma once

#include <charconv>
#include <cstdio>
#include <string>
#include <system_error>

namespace hies {

// Shortest round-trip decimal form; keeps CSV output byte-stable across runs.
inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc()) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  }
  return std::string(buf, res.ptr);
}

}  // namespace hies
