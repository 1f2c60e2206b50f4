#pragma once

#include <string>
#include <string_view>

#include "rsbuilding/errors.hpp"

namespace rsb {

// Annotation completeness of a sample.
enum class Regime {
  SegOnly,     // building masks only; I2 is a photometric copy of I1
  ChangeOnly,  // change mask only
  Full,        // building masks for both dates and the change mask
};

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::SegOnly: return "SegOnly";
    case Regime::ChangeOnly: return "ChangeOnly";
    case Regime::Full: return "Full";
  }
  return "?";
}

// Accepts the canonical names and the short CLI forms (seg, cd, full).
inline Regime parse_regime(std::string_view s) {
  if (s == "SegOnly" || s == "seg") return Regime::SegOnly;
  if (s == "ChangeOnly" || s == "cd") return Regime::ChangeOnly;
  if (s == "Full" || s == "full") return Regime::Full;
  throw DataError("unknown regime '" + std::string(s) + "'");
}

}  // namespace rsb
