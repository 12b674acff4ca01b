#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tcpl {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps config_error to exit code 2 and everything
// else to exit code 3.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : error {
  explicit config_error(const std::string& msg, std::string field_path = "")
      : error(msg), field(std::move(field_path)) {}
  std::string field;  // dotted path of the offending config key, if known
};

struct dataset_error : error {
  using error::error;
};
struct shape_error : error {
  using error::error;
};
struct loss_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};

// ---------------------------------------------------------------------------
// Hashing / seed derivation. All randomness in the library flows through
// named streams derived from (seed, tag, extras...), so any draw is a pure
// function of those inputs and never depends on call order elsewhere.
// ---------------------------------------------------------------------------

inline std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a + 0x9e3779b97f4a7c15ULL + (b << 1));
}

// xoshiro256** with explicit, serializable state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = (x = mix64(x));
  }

  static Rng from_state(const std::array<std::uint64_t, 4>& s) {
    Rng r(0);
    r.state_ = s;
    return r;
  }
  const std::array<std::uint64_t, 4>& state() const { return state_; }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) {
      return (v << k) | (v >> (64 - k));
    };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

  // standard normal via Box-Muller; the second value of the pair is
  // discarded so the generator carries no hidden cache across calls
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> state_{};
};

// Named stream: rng for (seed, tag) plus any number of integer coordinates.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag,
                      std::initializer_list<std::uint64_t> extras = {}) {
  std::uint64_t h = hash_combine(mix64(seed), fnv1a64(tag));
  for (std::uint64_t e : extras) h = hash_combine(h, e);
  return Rng(h);
}

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace tcpl
