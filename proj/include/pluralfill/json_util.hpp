#pragma once

#include <cstdio>
#include <cstdlib>

namespace pluralfill {

/// Shortest decimal that reads back as the same float, as a double.
inline double json_float(float v) {
  char buf[32];
  for (int prec = 6; prec < 9; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(v));
    if (static_cast<float>(std::strtod(buf, nullptr)) == v) return std::strtod(buf, nullptr);
  }
  return static_cast<double>(v);
}

}  // namespace pluralfill
