#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "se3/se3.hpp"
#include "util/rng.hpp"

using namespace se3ctrl;

namespace {

// Oracle: truncated power series for the matrix exponential. 30 terms of a
// matrix with norm <= pi converge far below double epsilon.
Eigen::Matrix3d expm_series(const Eigen::Matrix3d& m, int terms = 30) {
  Eigen::Matrix3d sum = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d pow = Eigen::Matrix3d::Identity();
  double fact = 1.0;
  for (int k = 1; k <= terms; ++k) {
    pow = Eigen::Matrix3d(pow * m);
    fact *= k;
    sum += pow / fact;
  }
  return sum;
}

// Oracle: left Jacobian as the series sum_k K^k / (k+1)!.
Eigen::Matrix3d left_jacobian_series(const Eigen::Vector3d& a, int terms = 30) {
  const Eigen::Matrix3d k = se3::hat<double>(a);
  Eigen::Matrix3d sum = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d pow = Eigen::Matrix3d::Identity();
  double fact = 1.0;
  for (int n = 1; n <= terms; ++n) {
    pow = Eigen::Matrix3d(pow * k);
    fact *= (n + 1);
    sum += pow / fact;
  }
  return sum;
}

// Oracle: homogeneous 4x4 matrix of a rigid transform.
Eigen::Matrix4d homog(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
  h.topLeftCorner<3, 3>() = r;
  h.topRightCorner<3, 1>() = t;
  return h;
}

Eigen::Vector3d random_unit(util::Rng& rng) {
  while (true) {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    const double n = v.norm();
    if (n > 1e-6) return v / n;
  }
}

// Angle buckets spanning every branch of the implementations.
std::vector<double> angle_cases() {
  return {0.0,    1e-12,      1e-9,       1e-7,        1e-5,       1e-3,     0.1,
          0.5,    1.0,        2.0,        3.0,         M_PI - 1e-3, M_PI - 1e-6,
          M_PI - 1e-9, M_PI};
}

}  // namespace

TEST_CASE("hat matches the cross product and is antisymmetric") {
  util::Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Vector3d w(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d k = se3::hat<double>(v);
    CHECK((k * w - v.cross(w)).norm() < 1e-12);
    CHECK((k + k.transpose()).norm() == 0.0);
  }
}

TEST_CASE("exp_so3 matches the power-series oracle on every branch") {
  util::Rng rng(12);
  double worst = 0.0;
  for (double th : angle_cases()) {
    for (int i = 0; i < 20; ++i) {
      const Eigen::Vector3d a = th * random_unit(rng);
      worst = std::max(worst, (se3::exp_so3<double>(a) - expm_series(se3::hat<double>(a))).norm());
    }
  }
  for (int i = 0; i < 500; ++i) {
    const Eigen::Vector3d a = rng.uniform(0.0, M_PI) * random_unit(rng);
    worst = std::max(worst, (se3::exp_so3<double>(a) - expm_series(se3::hat<double>(a))).norm());
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("exp_so3 outputs are orthonormal with unit determinant") {
  util::Rng rng(13);
  double worst_ortho = 0.0, worst_det = 0.0;
  for (double th : angle_cases()) {
    for (int i = 0; i < 10; ++i) {
      const Eigen::Matrix3d r = se3::exp_so3<double>(Eigen::Vector3d(th * random_unit(rng)));
      worst_ortho = std::max(
          worst_ortho, (r.transpose() * r - Eigen::Matrix3d::Identity()).norm());
      worst_det = std::max(worst_det, std::abs(r.determinant() - 1.0));
    }
  }
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Matrix3d r =
        se3::exp_so3<double>(Eigen::Vector3d(rng.uniform(0.0, M_PI) * random_unit(rng)));
    worst_ortho =
        std::max(worst_ortho, (r.transpose() * r - Eigen::Matrix3d::Identity()).norm());
    worst_det = std::max(worst_det, std::abs(r.determinant() - 1.0));
  }
  CHECK(worst_ortho < 1e-9);
  CHECK(worst_det < 1e-9);
}

TEST_CASE("axis-angle round trip recovers the vector for angles below pi") {
  util::Rng rng(14);
  double worst = 0.0;
  for (double th : angle_cases()) {
    if (th >= M_PI - 1e-9) continue;  // the pi endpoint is sign-ambiguous, tested below
    for (int i = 0; i < 20; ++i) {
      const Eigen::Vector3d a = th * random_unit(rng);
      const Eigen::Vector3d rt = se3::log_so3<double>(se3::exp_so3<double>(a));
      worst = std::max(worst, (rt - a).norm());
    }
  }
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector3d a = rng.uniform(0.0, M_PI - 1e-6) * random_unit(rng);
    const Eigen::Vector3d rt = se3::log_so3<double>(se3::exp_so3<double>(a));
    worst = std::max(worst, (rt - a).norm());
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("round trip at and near pi recovers the rotation, up to axis sign") {
  util::Rng rng(15);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double th = M_PI - std::abs(rng.normal(0.0, 1e-7));
    const Eigen::Vector3d a = th * random_unit(rng);
    const Eigen::Vector3d rt = se3::log_so3<double>(se3::exp_so3<double>(a));
    worst = std::max(worst, std::min((rt - a).norm(), (rt + a).norm()));
    // The matrix-side round trip is unambiguous.
    worst = std::max(worst, (se3::exp_so3<double>(rt) - se3::exp_so3<double>(a)).norm());
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("log at exactly pi picks the canonical axis sign") {
  // +/- n produce the same rotation at pi; the log must flip so the largest
  // component is positive.
  const Eigen::Vector3d n1(0.0, 0.0, -1.0);
  const Eigen::Vector3d r1 = se3::log_so3<double>(se3::exp_so3<double>(Eigen::Vector3d(M_PI * n1)));
  CHECK(r1.z() > 0.0);
  CHECK(std::abs(r1.norm() - M_PI) < 1e-8);

  const Eigen::Vector3d n2 = Eigen::Vector3d(-1.0, -1.0, -1.0).normalized();
  const Eigen::Vector3d r2 = se3::log_so3<double>(se3::exp_so3<double>(Eigen::Vector3d(M_PI * n2)));
  CHECK(r2.x() > 0.0);
  CHECK((se3::exp_so3<double>(r2) - se3::exp_so3<double>(Eigen::Vector3d(M_PI * n2))).norm() < 1e-8);
}

TEST_CASE("log of the identity is zero") {
  CHECK(se3::log_so3<double>(Eigen::Matrix3d::Identity()).norm() == 0.0);
}

TEST_CASE("left_jacobian and its inverse match the series oracle") {
  util::Rng rng(16);
  double worst_j = 0.0, worst_inv = 0.0;
  for (double th : angle_cases()) {
    for (int i = 0; i < 10; ++i) {
      const Eigen::Vector3d a = th * random_unit(rng);
      const Eigen::Matrix3d jl = se3::left_jacobian<double>(a);
      worst_j = std::max(worst_j, (jl - left_jacobian_series(a)).norm());
      worst_inv = std::max(
          worst_inv,
          (se3::left_jacobian_inv<double>(a) * jl - Eigen::Matrix3d::Identity()).norm());
    }
  }
  CHECK(worst_j < 1e-12);
  CHECK(worst_inv < 1e-9);
}

TEST_CASE("left_jacobian satisfies its defining first-order property") {
  // exp((a + d)^) = exp((Jl(a) d)^) exp(a^) + O(|d|^2)
  util::Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector3d a = rng.uniform(0.0, 3.0) * random_unit(rng);
    const Eigen::Vector3d d = 1e-5 * random_unit(rng);
    const Eigen::Matrix3d lhs = se3::exp_so3<double>(Eigen::Vector3d(a + d));
    const Eigen::Matrix3d rhs =
        se3::exp_so3<double>(Eigen::Vector3d(se3::left_jacobian<double>(a) * d)) *
        se3::exp_so3<double>(a);
    CHECK((lhs - rhs).norm() < 1e-9);  // O(|d|^2) = 1e-10 with slack
  }
}

TEST_CASE("rotated_point_jacobian matches central differences") {
  util::Rng rng(18);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3d a = rng.uniform(0.0, 3.0) * random_unit(rng);
    const Eigen::Vector3d x(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d jac =
        se3::rotated_point_jacobian<double>(a, Eigen::Vector3d(se3::exp_so3<double>(a) * x));
    for (int j = 0; j < 3; ++j) {
      Eigen::Vector3d ap = a, am = a;
      ap[j] += h;
      am[j] -= h;
      const Eigen::Vector3d fd =
          (se3::exp_so3<double>(ap) * x - se3::exp_so3<double>(am) * x) / (2 * h);
      CHECK((jac.col(j) - fd).norm() < 1e-6);
    }
  }
}

TEST_CASE("apply_rigid matches the homogeneous-matrix oracle") {
  util::Rng rng(19);
  for (int i = 0; i < 200; ++i) {
    se3::Delta6 dp;
    dp.aa.v = rng.uniform(0.0, M_PI) * random_unit(rng);
    dp.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Vector3d x(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix4d h = homog(se3::exp_so3<double>(dp.aa.v), dp.t);
    const Eigen::Vector4d xh(x.x(), x.y(), x.z(), 1.0);
    const Eigen::Vector4d yh = h * xh;
    CHECK((se3::apply_rigid(x, dp) - yh.head<3>()).norm() < 1e-12);
  }
}

TEST_CASE("compose_pose matches the homogeneous-matrix oracle") {
  util::Rng rng(20);
  double worst_y = 0.0, worst_r = 0.0;
  for (int i = 0; i < 1000; ++i) {
    se3::Pose6 p;
    p.y = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    p.aa.v = rng.uniform(0.0, M_PI) * random_unit(rng);
    se3::Delta6 dp;
    dp.aa.v = rng.uniform(0.0, M_PI) * random_unit(rng);
    dp.t = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());

    const Eigen::Matrix4d hp = homog(se3::exp_so3<double>(p.aa.v), p.y);
    const Eigen::Matrix4d hd = homog(se3::exp_so3<double>(dp.aa.v), dp.t);
    const Eigen::Matrix4d hc = hd * hp;

    const se3::Pose6 c = se3::compose_pose(p, dp);
    worst_y = std::max(worst_y, (c.y - hc.topRightCorner<3, 1>()).norm());
    worst_r = std::max(
        worst_r, (se3::exp_so3<double>(c.aa.v) - hc.topLeftCorner<3, 3>()).norm());
  }
  CHECK(worst_y < 1e-9);
  CHECK(worst_r < 1e-9);
}

TEST_CASE("compose_pose with the identity delta is the identity") {
  se3::Pose6 p;
  p.y = Eigen::Vector3d(0.1, -0.2, 0.3);
  p.aa.v = Eigen::Vector3d(0.2, 0.1, -0.4);
  const se3::Pose6 c = se3::compose_pose(p, se3::Delta6{});
  CHECK((c.y - p.y).norm() < 1e-15);
  CHECK((c.aa.v - p.aa.v).norm() < 1e-12);
}

TEST_CASE("conversions validate their inputs") {
  se3::RotMat bad;
  bad.r(0, 0) = 2.0;  // not orthonormal
  CHECK_THROWS_AS((void)se3::matrix_to_axis_angle(bad), std::invalid_argument);

  se3::RotMat nan;
  nan.r(1, 1) = std::nan("");
  CHECK_THROWS_AS((void)se3::matrix_to_axis_angle(nan), std::invalid_argument);

  se3::AxisAngle aa;
  aa.v.x() = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS((void)se3::axis_angle_to_matrix(aa), std::invalid_argument);

  se3::Pose6 p;
  p.y.x() = std::nan("");
  CHECK_THROWS_AS((void)se3::compose_pose(p, se3::Delta6{}), std::invalid_argument);
}

TEST_CASE("matrix round trip through axis-angle preserves the rotation") {
  util::Rng rng(21);
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const Eigen::Matrix3d r =
        se3::exp_so3<double>(Eigen::Vector3d(rng.uniform(0.0, M_PI) * random_unit(rng)));
    const se3::AxisAngle aa = se3::matrix_to_axis_angle(se3::RotMat{r});
    worst = std::max(worst, (se3::axis_angle_to_matrix(aa).r - r).norm());
  }
  CHECK(worst < 1e-8);
}
