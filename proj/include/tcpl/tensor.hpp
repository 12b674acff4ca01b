#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "tcpl/common.hpp"

namespace tcpl {

// Dense H x W x C tensor of doubles, HWC layout (channel fastest).
// Used both for images (C = 3, values in [0,1]) and feature maps.
struct Tensor3 {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> v;

  Tensor3() = default;
  Tensor3(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_),
        v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  std::size_t size() const { return v.size(); }

  double& at(int y, int x, int ch) {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  double at(int y, int x, int ch) const {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }

  // pointer to the channel vector at spatial position (y, x)
  double* cell(int y, int x) {
    return v.data() + (static_cast<std::size_t>(y) * w + x) * c;
  }
  const double* cell(int y, int x) const {
    return v.data() + (static_cast<std::size_t>(y) * w + x) * c;
  }

  bool same_shape(const Tensor3& o) const {
    return h == o.h && w == o.w && c == o.c;
  }

  void fill(double value) { std::fill(v.begin(), v.end(), value); }
};

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const double* a, int n) {
  return std::sqrt(dot(a, a, n));
}

}  // namespace tcpl
