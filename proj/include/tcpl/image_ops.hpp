#pragma once

#include <algorithm>
#include <cmath>

#include "tcpl/tensor.hpp"

namespace tcpl {

// Bilinear resampling with the corner-aligned convention: output pixel i
// maps to source coordinate i * (in - 1) / (out - 1). A same-size resize is
// an exact copy.
inline Tensor3 resize_bilinear(const Tensor3& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw shape_error("resize_bilinear: non-positive output size");
  if (out_h == in.h && out_w == in.w) return in;

  Tensor3 out(out_h, out_w, in.c);
  const double sy = out_h > 1 ? static_cast<double>(in.h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(in.w - 1) / (out_w - 1) : 0.0;
  for (int y = 0; y < out_h; ++y) {
    const double fy = out_h > 1 ? y * sy : (in.h - 1) * 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    int y1 = std::min(y0 + 1, in.h - 1);
    y0 = std::min(std::max(y0, 0), in.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = out_w > 1 ? x * sx : (in.w - 1) * 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      int x1 = std::min(x0 + 1, in.w - 1);
      x0 = std::min(std::max(x0, 0), in.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < in.c; ++ch) {
        const double top =
            in.at(y0, x0, ch) * (1.0 - wx) + in.at(y0, x1, ch) * wx;
        const double bot =
            in.at(y1, x0, ch) * (1.0 - wx) + in.at(y1, x1, ch) * wx;
        out.at(y, x, ch) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline Tensor3 crop(const Tensor3& in, int top, int left, int ch_h, int ch_w) {
  if (top < 0 || left < 0 || ch_h < 1 || ch_w < 1 || top + ch_h > in.h ||
      left + ch_w > in.w)
    throw shape_error("crop: window outside image");
  Tensor3 out(ch_h, ch_w, in.c);
  for (int y = 0; y < ch_h; ++y)
    for (int x = 0; x < ch_w; ++x)
      for (int ch = 0; ch < in.c; ++ch)
        out.at(y, x, ch) = in.at(top + y, left + x, ch);
  return out;
}

inline Tensor3 hflip(const Tensor3& in) {
  Tensor3 out(in.h, in.w, in.c);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x)
      for (int ch = 0; ch < in.c; ++ch)
        out.at(y, x, ch) = in.at(y, in.w - 1 - x, ch);
  return out;
}

// --- color helpers ---------------------------------------------------------

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s,
                       double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0.0 ? 0.0 : d / mx;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = (g - b) / d;
  else if (mx == g)
    h = 2.0 + (b - r) / d;
  else
    h = 4.0 + (r - g) / d;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g,
                       double& b) {
  h -= std::floor(h);
  const double hh = h * 6.0;
  const int i = std::min(static_cast<int>(hh), 5);
  const double f = hh - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

inline void shift_hue(Tensor3& img, double delta) {
  if (delta == 0.0) return;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double h, s, v;
      rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
      hsv_to_rgb(h + delta, s, v,
                 img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
}

inline void scale_brightness(Tensor3& img, double factor) {
  if (factor == 1.0) return;
  for (auto& p : img.v) p = clamp01(p * factor);
}

inline void scale_contrast(Tensor3& img, double factor) {
  if (factor == 1.0) return;
  double mean = 0.0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      mean += 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
              0.114 * img.at(y, x, 2);
  mean /= static_cast<double>(img.h) * img.w;
  for (auto& p : img.v) p = clamp01(mean + (p - mean) * factor);
}

inline void scale_saturation(Tensor3& img, double factor) {
  if (factor == 1.0) return;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const double gray = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                          0.114 * img.at(y, x, 2);
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = clamp01(gray + (img.at(y, x, ch) - gray) * factor);
    }
}

inline void cutout(Tensor3& img, int top, int left, int side,
                   double fill = 0.5) {
  const int y1 = std::min(top + side, img.h);
  const int x1 = std::min(left + side, img.w);
  for (int y = std::max(top, 0); y < y1; ++y)
    for (int x = std::max(left, 0); x < x1; ++x)
      for (int ch = 0; ch < img.c; ++ch) img.at(y, x, ch) = fill;
}

inline void clamp_inplace(Tensor3& img) {
  for (auto& p : img.v) p = clamp01(p);
}

}  // namespace tcpl
