#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fconv {

inline constexpr double kPi = std::numbers::pi;

/// Error categories surfaced to the command line as distinct exit codes.
enum class ErrorKind { config = 2, missing_file = 3, malformed_file = 4, shape = 5, generation = 6, io = 7 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct MissingFileError : Error {
  explicit MissingFileError(const std::string& w) : Error(ErrorKind::missing_file, w) {}
};
struct MalformedFileError : Error {
  explicit MalformedFileError(const std::string& w) : Error(ErrorKind::malformed_file, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, w) {}
};
struct GenerationError : Error {
  explicit GenerationError(const std::string& w) : Error(ErrorKind::generation, w) {}
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::missing_file: return "missing_file";
    case ErrorKind::malformed_file: return "malformed_file";
    case ErrorKind::shape: return "shape";
    case ErrorKind::generation: return "generation";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  r -= kPi;
  // fmod can land exactly on +pi after the shift for inputs just below an odd multiple.
  if (r >= kPi) r -= 2.0 * kPi;
  return r;
}

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  friend constexpr Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return s * a; }
  friend constexpr bool operator==(Vec3 a, Vec3 b) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) { return (1.0 / norm(a)) * a; }

/// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(3 * r + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(3 * r + c)]; }

  Vec3 operator*(Vec3 v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
};

/// Rotation about the vertical (y) axis. Maps (1,0,0) to (cos a, 0, -sin a).
inline Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
}

/// Rotation about the x axis. Maps (0,1,0) to (0, cos a, sin a).
inline Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
}

/// Largest absolute deviation of R^T R from identity.
inline double orthonormality_error(const Mat3& r) {
  const Mat3 p = r.transposed() * r;
  double e = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) e = std::max(e, std::abs(p(i, j) - (i == j ? 1.0 : 0.0)));
  return e;
}

/// Row-major 3x4 matrix (projection or rigid transform).
struct Mat34 {
  std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(4 * r + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(4 * r + c)]; }

  /// Applies to homogeneous [p; 1].
  Vec3 apply(Vec3 p) const {
    return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3], m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
            m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
  }
  Mat3 rotation() const { return Mat3{{m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]}}; }
  Vec3 translation() const { return {m[3], m[7], m[11]}; }

  static Mat34 from(const Mat3& r, Vec3 t) {
    Mat34 o;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) o(i, j) = r(i, j);
      o(i, 3) = t[i];
    }
    return o;
  }
};

/// Inverse of a rigid transform [R|t].
inline Mat34 rigid_inverse(const Mat34& a) {
  const Mat3 rt = a.rotation().transposed();
  return Mat34::from(rt, -1.0 * (rt * a.translation()));
}

}  // namespace fconv
