#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace msrn {

// Scrambled Weyl step; the standard generator-seeding mixer.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256++: 256-bit state, fast, passes BigCrush.  Streams derived from
// (master seed, stream index) are deterministic and schedule-independent, so
// ensemble results do not depend on how runs are distributed over threads.
class Xoshiro256pp {
 public:
  Xoshiro256pp() { reseed(0); }
  explicit Xoshiro256pp(std::uint64_t seed) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  static Xoshiro256pp for_stream(std::uint64_t master, std::uint64_t index) {
    std::uint64_t sm = master + (index + 1) * 0x9e3779b97f4a7c15ULL;
    Xoshiro256pp r;
    for (auto& w : r.s_) w = splitmix64(sm);
    return r;
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Marsaglia's polar method (second draw cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, w, q;
    do {
      u = 2.0 * uniform() - 1.0;
      w = 2.0 * uniform() - 1.0;
      q = u * u + w * w;
    } while (q >= 1.0 || q == 0.0);
    double f = std::sqrt(-2.0 * std::log(q) / q);
    spare_ = w * f;
    has_spare_ = true;
    return u * f;
  }

  double exponential();  // defined after the ziggurat table below

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

namespace detail {

// 256-layer ziggurat table for Exp(1) (Marsaglia & Tsang layout).
struct ZigguratExp {
  double x[257];
  std::uint64_t cutoff[256];
  ZigguratExp() {
    const double r = 7.69711747013104972;
    const double v = 0.0039496598225815571993;
    x[0] = v / std::exp(-r);
    x[1] = r;
    for (int i = 2; i < 256; ++i) x[i] = -std::log(std::exp(-x[i - 1]) + v / x[i - 1]);
    x[256] = 0.0;
    for (int i = 0; i < 256; ++i)
      cutoff[i] = static_cast<std::uint64_t>((x[i + 1] / x[i]) * 9007199254740992.0);
  }
};

inline const ZigguratExp& ziggurat_exp() {
  static const ZigguratExp table;
  return table;
}

}  // namespace detail

// Exp(1) draw; one uniform in the common case.
inline double Xoshiro256pp::exponential() {
  const auto& zig = detail::ziggurat_exp();
  for (;;) {
    std::uint64_t u = next();
    int i = static_cast<int>(u & 255);
    std::uint64_t j = u >> 11;
    if (j < zig.cutoff[i]) [[likely]]
      return zig.x[i] * static_cast<double>(j) * 0x1.0p-53;
    if (i == 0) return zig.x[1] - std::log1p(-uniform());
    double xx = zig.x[i] * static_cast<double>(j) * 0x1.0p-53;
    if (std::exp(-zig.x[i]) +
            uniform() * (std::exp(-zig.x[i + 1]) - std::exp(-zig.x[i])) <
        std::exp(-xx))
      return xx;
  }
}

}  // namespace msrn
