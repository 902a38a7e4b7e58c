#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace msrn {

// Exact rational on int64 numerator/denominator. All exponent comparisons in
// the scale analysis go through this type; nothing here may round.
class Rational {
 public:
  constexpr Rational() = default;
  Rational(std::int64_t n) : num_(n), den_(1) {}
  Rational(std::int64_t n, std::int64_t d) : num_(n), den_(d) { normalize(); }

  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }

  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }

  friend Rational operator+(const Rational& a, const Rational& b) {
    return Rational::from128(i128(a.num_) * b.den_ + i128(b.num_) * a.den_,
                             i128(a.den_) * b.den_);
  }
  friend Rational operator-(const Rational& a, const Rational& b) {
    return Rational::from128(i128(a.num_) * b.den_ - i128(b.num_) * a.den_,
                             i128(a.den_) * b.den_);
  }
  friend Rational operator*(const Rational& a, const Rational& b) {
    return Rational::from128(i128(a.num_) * b.num_, i128(a.den_) * b.den_);
  }
  friend Rational operator/(const Rational& a, const Rational& b) {
    if (b.num_ == 0) throw std::domain_error("rational division by zero");
    return Rational::from128(i128(a.num_) * b.den_, i128(a.den_) * b.num_);
  }
  Rational operator-() const {
    Rational r;
    r.num_ = -num_;
    r.den_ = den_;
    return r;
  }
  Rational& operator+=(const Rational& b) { return *this = *this + b; }
  Rational& operator-=(const Rational& b) { return *this = *this - b; }
  Rational& operator*=(const Rational& b) { return *this = *this * b; }
  Rational& operator/=(const Rational& b) { return *this = *this / b; }

  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num_ == b.num_ && a.den_ == b.den_;
  }
  friend bool operator!=(const Rational& a, const Rational& b) { return !(a == b); }
  friend bool operator<(const Rational& a, const Rational& b) {
    return i128(a.num_) * b.den_ < i128(b.num_) * a.den_;
  }
  friend bool operator>(const Rational& a, const Rational& b) { return b < a; }
  friend bool operator<=(const Rational& a, const Rational& b) { return !(b < a); }
  friend bool operator>=(const Rational& a, const Rational& b) { return !(a < b); }

  bool is_zero() const { return num_ == 0; }
  int sign() const { return num_ > 0 ? 1 : (num_ < 0 ? -1 : 0); }

  std::string str() const {
    if (den_ == 1) return std::to_string(num_);
    return std::to_string(num_) + "/" + std::to_string(den_);
  }

  // Accepts "p" or "p/q" with optional sign; q > 0 after normalization.
  static Rational parse(const std::string& s) {
    std::size_t slash = s.find('/');
    try {
      if (slash == std::string::npos) {
        std::size_t pos = 0;
        std::int64_t n = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return Rational(n);
      }
      std::size_t pos = 0;
      std::int64_t n = std::stoll(s.substr(0, slash), &pos);
      if (pos != slash) throw std::invalid_argument(s);
      std::int64_t d = std::stoll(s.substr(slash + 1), &pos);
      if (pos != s.size() - slash - 1) throw std::invalid_argument(s);
      return Rational(n, d);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("malformed rational '" + s + "'");
    } catch (const std::out_of_range&) {
      throw std::invalid_argument("rational out of range '" + s + "'");
    }
  }

 private:
  using i128 = __int128;

  static Rational from128(i128 n, i128 d) {
    if (d == 0) throw std::domain_error("rational division by zero");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    i128 g = gcd128(n < 0 ? -n : n, d);
    if (g > 1) {
      n /= g;
      d /= g;
    }
    Rational r;
    r.num_ = narrow(n);
    r.den_ = narrow(d);
    return r;
  }

  static i128 gcd128(i128 a, i128 b) {
    while (b != 0) {
      i128 t = a % b;
      a = b;
      b = t;
    }
    return a == 0 ? 1 : a;
  }

  static std::int64_t narrow(i128 v) {
    if (v > INT64_MAX || v < INT64_MIN) throw std::overflow_error("rational overflow");
    return static_cast<std::int64_t>(v);
  }

  void normalize() {
    if (den_ == 0) throw std::domain_error("rational with zero denominator");
    if (den_ < 0) {
      num_ = -num_;
      den_ = -den_;
    }
    std::int64_t g = std::gcd(num_ < 0 ? -num_ : num_, den_);
    if (g > 1) {
      num_ /= g;
      den_ /= g;
    }
  }

  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

using RatVec = std::vector<Rational>;
using RatMat = std::vector<RatVec>;  // row major

inline Rational dot(const RatVec& a, const RatVec& b) {
  Rational s(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline bool is_zero_vec(const RatVec& v) {
  for (const auto& x : v)
    if (!x.is_zero()) return false;
  return true;
}

// Reduced row echelon form in place; returns pivot column indices.
inline std::vector<std::size_t> rref(RatMat& m) {
  std::vector<std::size_t> pivots;
  if (m.empty()) return pivots;
  std::size_t rows = m.size(), cols = m[0].size(), r = 0;
  for (std::size_t c = 0; c < cols && r < rows; ++c) {
    std::size_t piv = r;
    while (piv < rows && m[piv][c].is_zero()) ++piv;
    if (piv == rows) continue;
    std::swap(m[piv], m[r]);
    Rational inv = Rational(1) / m[r][c];
    for (std::size_t j = c; j < cols; ++j) m[r][j] *= inv;
    for (std::size_t i = 0; i < rows; ++i) {
      if (i == r || m[i][c].is_zero()) continue;
      Rational f = m[i][c];
      for (std::size_t j = c; j < cols; ++j) m[i][j] -= f * m[r][j];
    }
    pivots.push_back(c);
    ++r;
  }
  return pivots;
}

inline std::size_t rank(RatMat m) { return rref(m).size(); }

// Basis of {x : M x = 0}. Free variables get unit values in pivot order,
// so the result is deterministic for a given input.
inline std::vector<RatVec> null_space(RatMat m) {
  if (m.empty()) return {};
  std::size_t cols = m[0].size();
  auto pivots = rref(m);
  std::vector<bool> is_pivot(cols, false);
  for (auto c : pivots) is_pivot[c] = true;
  std::vector<RatVec> basis;
  for (std::size_t free_c = 0; free_c < cols; ++free_c) {
    if (is_pivot[free_c]) continue;
    RatVec v(cols, Rational(0));
    v[free_c] = Rational(1);
    for (std::size_t r = 0; r < pivots.size(); ++r)
      v[pivots[r]] = -m[r][free_c];
    basis.push_back(std::move(v));
  }
  return basis;
}

// Flips sign so the first nonzero component is positive.
inline void canonical_sign(RatVec& v) {
  for (const auto& x : v) {
    if (x.is_zero()) continue;
    if (x.sign() < 0)
      for (auto& y : v) y = -y;
    return;
  }
}

}  // namespace msrn
