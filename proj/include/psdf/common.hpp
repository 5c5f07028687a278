#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

// Small shared vocabulary for the whole library. Everything numeric is
// templated on the scalar type: float for training, double for oracles.

namespace psdf {

using Vec3d = Eigen::Vector3d;
using Vec3f = Eigen::Vector3f;
using Mat3d = Eigen::Matrix3d;

template <class Real>
using Vec3 = Eigen::Matrix<Real, 3, 1>;

/// Minimal 3-vector usable with both plain scalars and tape variables.
/// Eigen stays on the concrete-scalar side; V3<T> is what the generic
/// (differentiable) formulas are written against.
template <class T>
struct V3 {
    T x{}, y{}, z{};

    V3() = default;
    V3(T x_, T y_, T z_) : x(std::move(x_)), y(std::move(y_)), z(std::move(z_)) {}

    friend V3 operator+(const V3& a, const V3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend V3 operator-(const V3& a, const V3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend V3 operator*(const T& s, const V3& v) { return {s * v.x, s * v.y, s * v.z}; }
    friend V3 operator*(const V3& v, const T& s) { return {v.x * s, v.y * s, v.z * s}; }
    friend V3 operator/(const V3& v, const T& s) { return {v.x / s, v.y / s, v.z / s}; }
    V3 operator-() const { return {-x, -y, -z}; }
};

template <class T>
T dot(const V3<T>& a, const V3<T>& b) {
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class Real>
V3<Real> to_v3(const Vec3<Real>& v) {
    return {v.x(), v.y(), v.z()};
}

template <class Real>
Vec3<Real> to_eigen(const V3<Real>& v) {
    return Vec3<Real>(v.x, v.y, v.z);
}

template <class Real>
constexpr Real pi() {
    return Real(3.14159265358979323846L);
}

template <class Real>
bool is_finite(Real v) {
    return std::isfinite(v);
}

template <class Real>
bool is_finite(const Vec3<Real>& v) {
    return v.allFinite();
}

/// inverse of softplus(x) = log1p(exp(x)); used to seed trainable positive scalars.
template <class Real>
Real inverse_softplus(Real y) {
    // log(e^y - 1), stable for small y
    return y > Real(20) ? y : std::log(std::expm1(double(y)));
}

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace psdf
