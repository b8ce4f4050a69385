#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

// Exact SO(3)/SE(3) kernels shared by the network layers, the losses, the
// controller and the simulator. Rotations are parameterized as axis-angle
// vectors (direction = axis, magnitude = angle in radians); deltas act on
// the left, i.e. a delta [R, T] maps a point x to R*x + T and a pose
// (y, R_p) to (R*y + T, R*R_p).
namespace se3ctrl::se3 {

template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

struct AxisAngle {
  Eigen::Vector3d v = Eigen::Vector3d::Zero();
};

struct RotMat {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
};

struct Pose6 {
  Eigen::Vector3d y = Eigen::Vector3d::Zero();
  AxisAngle aa;
};

struct Delta6 {
  AxisAngle aa;
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

template <typename T>
inline Mat3<T> hat(const Vec3<T>& v) {
  Mat3<T> m;
  m << T(0), -v.z(), v.y(), v.z(), T(0), -v.x(), -v.y(), v.x(), T(0);
  return m;
}

// Rodrigues expansion of exp([a]x). Below 1e-8 the series is truncated at
// second order, which is exact to machine precision there.
template <typename T>
inline Mat3<T> exp_so3(const Vec3<T>& a) {
  const T theta2 = a.squaredNorm();
  const Mat3<T> k = hat(a);
  if (theta2 < T(1e-16)) {
    return Mat3<T>::Identity() + k + T(0.5) * (k * k);
  }
  const T theta = std::sqrt(theta2);
  const T s = std::sin(theta) / theta;
  const T c = (T(1) - std::cos(theta)) / theta2;
  return Mat3<T>::Identity() + s * k + c * (k * k);
}

namespace detail {
// Resolve the sign ambiguity of an axis at angle pi: flip so that the
// component of largest magnitude (first on ties) is positive.
template <typename T>
inline Vec3<T> canonical_sign(const Vec3<T>& n) {
  int best = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(n[i]) > std::abs(n[best])) best = i;
  }
  return (n[best] < T(0)) ? Vec3<T>(-n) : n;
}
}  // namespace detail

// Canonical log map: returns the axis-angle with angle in [0, pi]. Uses the
// skew-part branch away from the ends, a first-order branch near zero and
// largest-diagonal axis recovery near pi.
template <typename T>
inline Vec3<T> log_so3(const Mat3<T>& r) {
  const Vec3<T> w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const T two_sin = w.norm();
  const T two_cos_plus = r.trace() - T(1);  // 2 cos(theta)
  const T theta = std::atan2(two_sin, two_cos_plus);

  if (theta < T(1e-7)) {
    // R ~ I + [a]x, so the skew part is the answer to first order.
    return T(0.5) * w;
  }
  if (theta < T(M_PI) - T(1e-5)) {
    return (theta / two_sin) * w;
  }
  // Near pi the skew part vanishes; recover the axis from the symmetric
  // part: (sym(R) + I)/2 -> n n^T at exactly pi. Symmetrizing first removes
  // the sin(theta) skew contribution, which would otherwise contaminate the
  // axis with an O(pi - theta) error.
  const Mat3<T> b =
      T(0.25) * (r + r.transpose()) + T(0.5) * Mat3<T>::Identity();
  int d = 0;
  for (int i = 1; i < 3; ++i) {
    if (b(i, i) > b(d, d)) d = i;
  }
  Vec3<T> n;
  n[d] = std::sqrt(std::max(b(d, d), T(0)));
  if (n[d] < T(1e-12)) return Vec3<T>::Zero();  // unreachable for valid R
  for (int i = 0; i < 3; ++i) {
    if (i != d) n[i] = b(i, d) / n[d];
  }
  n.normalize();
  // Keep continuity with the skew part when it is not exactly zero.
  if (two_sin > T(1e-12)) {
    if (n.dot(w) < T(0)) n = -n;
  } else {
    n = detail::canonical_sign(n);
  }
  return theta * n;
}

// Left Jacobian of SO(3): exp((a + d)^) = exp((Jl(a) d)^) exp(a^) + O(d^2).
template <typename T>
inline Mat3<T> left_jacobian(const Vec3<T>& a) {
  const T theta2 = a.squaredNorm();
  const Mat3<T> k = hat(a);
  T c1, c2;
  if (theta2 < T(1e-12)) {
    c1 = T(0.5) - theta2 / T(24);
    c2 = T(1) / T(6) - theta2 / T(120);
  } else {
    const T theta = std::sqrt(theta2);
    c1 = (T(1) - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3<T>::Identity() + c1 * k + c2 * (k * k);
}

// Inverse of the left Jacobian; finite for angles in [0, pi].
template <typename T>
inline Mat3<T> left_jacobian_inv(const Vec3<T>& a) {
  const T theta2 = a.squaredNorm();
  const Mat3<T> k = hat(a);
  T c;
  if (theta2 < T(1e-12)) {
    c = T(1) / T(12) + theta2 / T(720);
  } else {
    const T theta = std::sqrt(theta2);
    const T phi = T(M_PI) - theta;
    if (phi < T(1e-4)) {
      // Series in (pi - theta): (1 + cos)/ (2 theta sin) -> phi/(4 theta).
      c = T(1) / theta2 - phi / (T(4) * theta);
    } else {
      c = T(1) / theta2 -
          (T(1) + std::cos(theta)) / (T(2) * theta * std::sin(theta));
    }
  }
  return Mat3<T>::Identity() - T(0.5) * k + c * (k * k);
}

// d(exp(a^) x)/da = -[exp(a^) x]x Jl(a); returned explicitly.
template <typename T>
inline Mat3<T> rotated_point_jacobian(const Vec3<T>& a, const Vec3<T>& rotated_x) {
  return -hat(rotated_x) * left_jacobian(a);
}

inline void require_finite3(const Eigen::Vector3d& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

inline RotMat axis_angle_to_matrix(const AxisAngle& aa) {
  require_finite3(aa.v, "axis_angle_to_matrix");
  return RotMat{exp_so3<double>(aa.v)};
}

inline AxisAngle matrix_to_axis_angle(const RotMat& r) {
  const Eigen::Matrix3d& m = r.r;
  if (!m.allFinite()) throw std::invalid_argument("matrix_to_axis_angle: non-finite input");
  const double ortho = (m.transpose() * m - Eigen::Matrix3d::Identity()).norm();
  if (ortho > 1e-6 || std::abs(m.determinant() - 1.0) > 1e-6) {
    throw std::invalid_argument("matrix_to_axis_angle: input is not a rotation");
  }
  return AxisAngle{log_so3<double>(m)};
}

inline Eigen::Vector3d apply_rigid(const Eigen::Vector3d& x, const Delta6& dp) {
  require_finite3(x, "apply_rigid");
  require_finite3(dp.aa.v, "apply_rigid");
  require_finite3(dp.t, "apply_rigid");
  return exp_so3<double>(dp.aa.v) * x + dp.t;
}

// The delta acts on the pose exactly as the transform layer acts on points:
// position R*y + T, orientation R*R_p (left composition, camera frame).
inline Pose6 compose_pose(const Pose6& p, const Delta6& dp) {
  require_finite3(p.y, "compose_pose");
  require_finite3(p.aa.v, "compose_pose");
  require_finite3(dp.aa.v, "compose_pose");
  require_finite3(dp.t, "compose_pose");
  const Eigen::Matrix3d rd = exp_so3<double>(dp.aa.v);
  Pose6 out;
  out.y = rd * p.y + dp.t;
  out.aa.v = log_so3<double>(Eigen::Matrix3d(rd * exp_so3<double>(p.aa.v)));
  return out;
}

}  // namespace se3ctrl::se3
