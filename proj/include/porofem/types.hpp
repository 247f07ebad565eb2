#pragma once

#include <array>
#include <string>

namespace porofem {

using Vec2 = std::array<double, 2>;

enum class ProblemId { mp1, mp2, mp3 };

inline std::string to_string(ProblemId id) {
  switch (id) {
    case ProblemId::mp1: return "mp1";
    case ProblemId::mp2: return "mp2";
    case ProblemId::mp3: return "mp3";
  }
  return "?";
}

/// Symmetric 2x2 tensor (plane-strain in-plane components).
struct SymTensor2 {
  double xx = 0.0;
  double yy = 0.0;
  double xy = 0.0;

  double trace() const { return xx + yy; }
};

inline SymTensor2 operator+(const SymTensor2& a, const SymTensor2& b) {
  return {a.xx + b.xx, a.yy + b.yy, a.xy + b.xy};
}
inline SymTensor2 operator*(double s, const SymTensor2& a) {
  return {s * a.xx, s * a.yy, s * a.xy};
}

}  // namespace porofem
