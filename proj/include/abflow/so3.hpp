#pragma once

// Rotation-group geometry and the isotropic Gaussian distribution on SO(3).
//
// Variance convention: the IGSO(3) density with respect to the normalized
// Haar measure is
//
//   f(w; eps2) = sum_{l>=0} (2l+1) exp(-l(l+1) eps2 / 2) sin((l+1/2) w) / sin(w/2)
//
// so that for small eps2 the rotation vector is approximately N(0, eps2 I3).
// The angle density (Haar factor included) is (1 - cos w) / pi * f(w).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <shared_mutex>
#include <stdexcept>
#include <vector>

#include "abflow/rng.hpp"

namespace abflow {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion (w, x, y, z); canonical form has w >= 0.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

inline Mat3 hat(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return k;
}

/// Element of SO(3), stored as its 3x3 matrix.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Validates orthogonality and determinant within `tol`.
  static Rotation from_matrix(const Mat3& m, double tol = 1e-6) {
    if (!m.allFinite()) throw std::invalid_argument("rotation: non-finite matrix");
    double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho > tol || std::abs(m.determinant() - 1.0) > tol)
      throw std::invalid_argument("rotation: matrix is not in SO(3)");
    return Rotation(m);
  }

  /// Trusted construction; the caller guarantees m is in SO(3).
  static Rotation from_matrix_unchecked(const Mat3& m) { return Rotation(m); }

  /// Requires |q| = 1 within `tol`; the quaternion is renormalized exactly.
  static Rotation from_quaternion(const Quaternion& q, double tol = 1e-6) {
    double n = q.norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > tol)
      throw std::invalid_argument("rotation: quaternion is not unit norm");
    double w = q.w / n, x = q.x / n, y = q.y / n, z = q.z / n;
    Mat3 m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
         2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
         2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
    return Rotation(m);
  }

  /// Canonical unit quaternion (w >= 0), Shepperd's method.
  Quaternion quaternion() const {
    const Mat3& m = m_;
    double tr = m.trace();
    Quaternion q;
    if (tr > 0.0) {
      double s = std::sqrt(tr + 1.0) * 2.0;
      q = {0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s};
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
      double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
      q = {(m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s};
    } else if (m(1, 1) > m(2, 2)) {
      double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
      q = {(m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s};
    } else {
      double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
      q = {(m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s};
    }
    double n = q.norm();
    q = {q.w / n, q.x / n, q.y / n, q.z / n};
    if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
    return q;
  }

  const Mat3& matrix() const { return m_; }
  Rotation inverse() const { return Rotation(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  friend bool operator==(const Rotation& a, const Rotation& b) { return a.m_ == b.m_; }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

/// Rodrigues formula; total, exp_map(0) = I.
inline Rotation exp_map(const Vec3& v) {
  double th2 = v.squaredNorm();
  double th = std::sqrt(th2);
  double a, b;  // R = I + a K + b K^2
  if (th < 1e-4) {
    a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
    b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  Mat3 k = hat(v);
  return Rotation::from_matrix_unchecked(Mat3::Identity() + a * k + b * k * k);
}

/// Principal logarithm, angle in [0, pi].
inline Vec3 log_map(const Rotation& r) {
  const Mat3& m = r.matrix();
  Vec3 w(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  w *= 0.5;  // sin(theta) * axis
  double s = w.norm();
  double c = std::clamp(0.5 * (m.trace() - 1.0), -1.0, 1.0);
  double th = std::atan2(s, c);
  if (th < 1e-4) {
    double th2 = th * th;
    return w * (1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0);
  }
  if (s > 1e-3) return w * (th / s);
  // Near pi: axis from the symmetric part, largest diagonal entry.
  Mat3 sym = 0.5 * (m + m.transpose());
  Mat3 aat = (sym - c * Mat3::Identity()) / (1.0 - c);
  int k = 0;
  aat.diagonal().maxCoeff(&k);
  Vec3 axis = aat.col(k) / std::sqrt(std::max(aat(k, k), 1e-300));
  axis.normalize();
  if (axis.dot(w) < 0.0) axis = -axis;
  return axis * th;
}

inline double rotation_distance(const Rotation& a, const Rotation& b) {
  return log_map(a.inverse() * b).norm();
}

/// exp(gamma * log(R)), gamma in [0, 1].
inline Rotation geodesic_scale(double gamma, const Rotation& r) {
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("geodesic_scale: gamma must lie in [0, 1]");
  return exp_map(gamma * log_map(r));
}

/// Haar-uniform rotation via a normalized 4D Gaussian quaternion.
inline Rotation sample_uniform(Rng& rng) {
  Quaternion q;
  double n = 0.0;
  do {
    q = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    n = q.norm();
  } while (n < 1e-12);
  q = {q.w / n, q.x / n, q.y / n, q.z / n};
  return Rotation::from_quaternion(q);
}

inline Vec3 sample_unit_vector(Rng& rng) {
  Vec3 v;
  double n = 0.0;
  do {
    v = Vec3(rng.normal(), rng.normal(), rng.normal());
    n = v.norm();
  } while (n < 1e-12);
  return v / n;
}

/// Haar measure pushed to the rotation angle.
inline double haar_angle_density(double omega) { return (1.0 - std::cos(omega)) / std::numbers::pi; }

struct IgSo3Params {
  Rotation mean;
  double variance = 1.0;  ///< eps2; 0 denotes the point mass at `mean`
};

namespace detail {

// Below this variance the density is evaluated by the method-of-images sum,
// whose leading term is the Gaussian-on-angle approximation; above it the
// character series converges in a handful of terms.
inline constexpr double kImageRegimeMax = 1.0;
inline constexpr int kSeriesMaxL = 2000;
inline constexpr double kSeriesTol = 1e-10;

struct LogDensity {
  double log_f;    ///< log of the density w.r.t. Haar
  double dlogf_dc; ///< derivative w.r.t. cos(omega)
};

/// Character series in y = cos(omega / 2); chi_l = U_{2l}(y).
inline LogDensity series_log_density(double omega, double eps2) {
  double y = std::cos(0.5 * omega);
  double u_prev = 1.0, u = 2.0 * y;     // U_0, U_1
  double du_prev = 0.0, du = 2.0;       // U'_0, U'_1
  double f = 1.0, df = 0.0;             // l = 0 term
  for (int l = 1; l <= kSeriesMaxL; ++l) {
    // advance twice: U_{2l-1} -> U_{2l}
    for (int s = 0; s < 2; ++s) {
      double un = 2.0 * y * u - u_prev;
      double dun = 2.0 * u + 2.0 * y * du - du_prev;
      u_prev = u; u = un;
      du_prev = du; du = dun;
    }
    // u now holds U_{2l+1}; u_prev holds U_{2l}
    double n = 2.0 * l + 1.0;
    double weight = n * std::exp(-0.5 * l * (l + 1.0) * eps2);
    f += weight * u_prev;
    df += weight * du_prev;
    if (weight * n * n * n < kSeriesTol) break;
  }
  f = std::max(f, 1e-300);
  double dc = (y > 1e-8) ? df / (f * 4.0 * y) : 0.0;
  return {std::log(f), dc};
}

/// Exact image sum over SU(2): with a = eps2 / 8 and th = omega / 2,
/// f = e^a sqrt(pi) / (8 a^1.5) e^{-th^2/4a} g(th) / sin(th).
inline LogDensity image_log_density(double omega, double eps2) {
  const double pi = std::numbers::pi;
  double a = eps2 / 8.0;
  double th = std::clamp(0.5 * omega, 0.0, 0.5 * pi);
  double g = 0.0, dg = 0.0;
  for (int m = -3; m <= 3; ++m) {
    double sign = (m % 2 == 0) ? 1.0 : -1.0;
    double e = std::exp(-pi * m * (2.0 * th + pi * m) / (4.0 * a));
    g += sign * (th + pi * m) * e;
    dg += sign * e * (1.0 - (th + pi * m) * pi * m / (2.0 * a));
  }
  double log_const = a + std::log(std::sqrt(pi) / (8.0 * std::pow(a, 1.5)));
  double log_ratio;
  if (th < 1e-6) {
    double g0 = 0.0;
    for (int m = -3; m <= 3; ++m) {
      double sign = (m % 2 == 0) ? 1.0 : -1.0;
      double e = std::exp(-pi * pi * m * m / (4.0 * a));
      g0 += sign * e * (1.0 - pi * pi * m * m / (2.0 * a));
    }
    log_ratio = std::log(std::max(g0, 1e-300));
  } else {
    log_ratio = std::log(std::max(g, 1e-300) / std::sin(th));
  }
  double log_f = log_const - th * th / (4.0 * a) + log_ratio;

  double dc;
  if (th < 1e-4) {
    dc = 1.0 / (8.0 * a) - 1.0 / 12.0;
  } else {
    double dlog_dth = -th / (2.0 * a) + dg / g - std::cos(th) / std::sin(th);
    double dc_dth = -2.0 * std::sin(2.0 * th);
    dc = (std::abs(dc_dth) > 1e-10) ? dlog_dth / dc_dth : 0.0;
  }
  return {log_f, dc};
}

inline void check_variance(double eps2) {
  if (!(eps2 > 0.0) || !std::isfinite(eps2))
    throw std::invalid_argument("igso3: variance must be positive and finite");
}

inline LogDensity igso3_log_density(double omega, double eps2) {
  check_variance(eps2);
  return eps2 < kImageRegimeMax ? image_log_density(omega, eps2) : series_log_density(omega, eps2);
}

}  // namespace detail

/// Angle density of IGSO(3) including the Haar factor; integrates to 1 on [0, pi].
inline double igso3_angle_density(double omega, double eps2) {
  auto d = detail::igso3_log_density(omega, eps2);
  return haar_angle_density(omega) * std::exp(d.log_f);
}

/// Inverse-CDF table of the rotation angle for one variance.
class IgSo3AngleTable {
 public:
  static constexpr int kGridSize = 8192;

  explicit IgSo3AngleTable(double eps2) : eps2_(eps2) {
    detail::check_variance(eps2);
    omega_max_ = std::min(std::numbers::pi, 15.0 * std::sqrt(eps2));
    step_ = omega_max_ / (kGridSize - 1);
    cdf_.resize(kGridSize);
    double prev = igso3_angle_density(0.0, eps2);
    cdf_[0] = 0.0;
    for (int i = 1; i < kGridSize; ++i) {
      double cur = igso3_angle_density(i * step_, eps2);
      cdf_[i] = cdf_[i - 1] + 0.5 * step_ * (prev + cur);
      prev = cur;
    }
    double total = cdf_.back();
    for (auto& c : cdf_) c /= total;
  }

  double variance() const { return eps2_; }

  /// Angle at cumulative probability u in [0, 1).
  double inverse_cdf(double u) const {
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.begin()) return 0.0;
    if (it == cdf_.end()) return omega_max_;
    std::size_t i = static_cast<std::size_t>(it - cdf_.begin()) - 1;
    double lo = cdf_[i], hi = cdf_[i + 1];
    double frac = hi > lo ? (u - lo) / (hi - lo) : 0.0;
    return (static_cast<double>(i) + frac) * step_;
  }

 private:
  double eps2_;
  double omega_max_;
  double step_;
  std::vector<double> cdf_;
};

/// Process-wide cache of angle tables keyed by the exact variance value.
/// Tables are immutable once inserted and shared across threads.
inline std::shared_ptr<const IgSo3AngleTable> igso3_angle_table(double eps2) {
  static std::shared_mutex mutex;
  static std::map<double, std::shared_ptr<const IgSo3AngleTable>> cache;
  {
    std::shared_lock lock(mutex);
    auto it = cache.find(eps2);
    if (it != cache.end()) return it->second;
  }
  auto table = std::make_shared<const IgSo3AngleTable>(eps2);
  std::unique_lock lock(mutex);
  auto [it, inserted] = cache.emplace(eps2, std::move(table));
  return it->second;
}

/// mean * exp(omega * u), omega by inverse CDF, u uniform on S^2.
inline Rotation igso3_sample(const IgSo3Params& p, Rng& rng) {
  if (p.variance == 0.0) return p.mean;
  auto table = igso3_angle_table(p.variance);
  double omega = table->inverse_cdf(rng.uniform());
  Vec3 axis = sample_unit_vector(rng);
  return p.mean * exp_map(omega * axis);
}

/// Log density w.r.t. the normalized Haar measure.
inline double igso3_log_prob(const Rotation& r, const IgSo3Params& p) {
  detail::check_variance(p.variance);
  return detail::igso3_log_density(rotation_distance(p.mean, r), p.variance).log_f;
}

}  // namespace abflow
