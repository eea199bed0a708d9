#pragma once

#include <algorithm>
#include <string>

#include "da/tensor.hpp"

namespace da {

/// Axis-aligned rectangle in image pixel coordinates, corner-exclusive:
/// the covered pixel span is [x1, x2) x [y1, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  std::string to_string() const {
    return "(" + std::to_string(x1) + "," + std::to_string(y1) + "," +
           std::to_string(x2) + "," + std::to_string(y2) + ")";
  }
};

/// Intersection over union; symmetric, in [0,1], iou(a,a) == 1.
inline double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Box clamp_to_image(Box b, double size) {
  b.x1 = std::clamp(b.x1, 0.0, size);
  b.x2 = std::clamp(b.x2, 0.0, size);
  b.y1 = std::clamp(b.y1, 0.0, size);
  b.y2 = std::clamp(b.y2, 0.0, size);
  return b;
}

}  // namespace da
