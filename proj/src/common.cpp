#include "declutter/common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace declutter {

std::size_t Mask::count_set() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

Mat34 Pose::matrix() const {
  Mat34 m;
  m.leftCols<3>() = rotation;
  m.col(3) = center;
  return m;
}

Pose Pose::from_matrix(const Mat34& m) { return Pose{m.leftCols<3>(), m.col(3)}; }

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const Mat3 rel = a.transpose() * b;
  const double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near 0; use the skew part there.
  const Vec3 s(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  return std::atan2(0.5 * s.norm(), c);
}

}  // namespace declutter
