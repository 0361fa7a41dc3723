#pragma once

#include <iostream>
#include <string_view>

namespace longact {

// Destination for warnings; tests may point it at a string stream.
inline std::ostream*& warning_stream() {
  static std::ostream* os = &std::cerr;
  return os;
}

inline void warn(std::string_view msg) {
  if (auto* os = warning_stream()) *os << "warning: " << msg << '\n';
}

}  // namespace longact
