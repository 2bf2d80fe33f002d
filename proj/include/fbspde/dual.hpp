#pragma once

#include <array>
#include <cmath>

namespace fbspde {

/// Forward-mode dual number carrying N partial derivatives.
template <int N>
struct DualNumber {
  double v = 0.0;
  std::array<double, N> d{};

  DualNumber() = default;
  DualNumber(double value) : v(value) {}  // NOLINT: implicit constant promotion

  static DualNumber variable(double value, int slot) {
    DualNumber r(value);
    r.d[slot] = 1.0;
    return r;
  }

  DualNumber& operator+=(const DualNumber& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  DualNumber& operator-=(const DualNumber& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  DualNumber& operator*=(const DualNumber& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  DualNumber& operator/=(const DualNumber& o) {
    const double inv = 1.0 / o.v;
    const double q = v * inv;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - q * o.d[i]) * inv;
    v = q;
    return *this;
  }
};

/// Applies a scalar function with known derivative.
template <int N>
DualNumber<N> chain(const DualNumber<N>& a, double value, double slope) {
  DualNumber<N> r(value);
  for (int i = 0; i < N; ++i) r.d[i] = slope * a.d[i];
  return r;
}

template <int N>
DualNumber<N> operator-(const DualNumber<N>& a) {
  DualNumber<N> r;
  r.v = -a.v;
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}

template <int N> DualNumber<N> operator+(DualNumber<N> a, const DualNumber<N>& b) { return a += b; }
template <int N> DualNumber<N> operator-(DualNumber<N> a, const DualNumber<N>& b) { return a -= b; }
template <int N> DualNumber<N> operator*(DualNumber<N> a, const DualNumber<N>& b) { return a *= b; }
template <int N> DualNumber<N> operator/(DualNumber<N> a, const DualNumber<N>& b) { return a /= b; }

template <int N> DualNumber<N> operator+(DualNumber<N> a, double b) { a.v += b; return a; }
template <int N> DualNumber<N> operator+(double b, DualNumber<N> a) { a.v += b; return a; }
template <int N> DualNumber<N> operator-(DualNumber<N> a, double b) { a.v -= b; return a; }
template <int N> DualNumber<N> operator-(double b, const DualNumber<N>& a) { return (-a) + b; }
template <int N>
DualNumber<N> operator*(DualNumber<N> a, double b) {
  a.v *= b;
  for (int i = 0; i < N; ++i) a.d[i] *= b;
  return a;
}
template <int N> DualNumber<N> operator*(double b, const DualNumber<N>& a) { return a * b; }
template <int N> DualNumber<N> operator/(const DualNumber<N>& a, double b) { return a * (1.0 / b); }
template <int N>
DualNumber<N> operator/(double b, const DualNumber<N>& a) {
  const double inv = 1.0 / a.v;
  return chain(a, b * inv, -b * inv * inv);
}

template <int N> DualNumber<N> sin(const DualNumber<N>& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
template <int N> DualNumber<N> cos(const DualNumber<N>& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
template <int N>
DualNumber<N> exp(const DualNumber<N>& a) {
  const double e = std::exp(a.v);
  return chain(a, e, e);
}
template <int N> DualNumber<N> log(const DualNumber<N>& a) { return chain(a, std::log(a.v), 1.0 / a.v); }
template <int N>
DualNumber<N> sqrt(const DualNumber<N>& a) {
  const double s = std::sqrt(a.v);
  return chain(a, s, 0.5 / s);
}
template <int N> DualNumber<N> atan(const DualNumber<N>& a) { return chain(a, std::atan(a.v), 1.0 / (1.0 + a.v * a.v)); }
template <int N>
DualNumber<N> tanh(const DualNumber<N>& a) {
  const double t = std::tanh(a.v);
  return chain(a, t, 1.0 - t * t);
}
template <int N> DualNumber<N> abs(const DualNumber<N>& a) { return a.v < 0.0 ? -a : a; }

inline double value_of(double x) { return x; }
template <int N> double value_of(const DualNumber<N>& x) { return x.v; }

}  // namespace fbspde
