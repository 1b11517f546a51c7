#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace osfa {

/// Axis-aligned box in pixel coordinates, xmin < xmax and ymin < ymax.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (xmin + xmax); }
  double cy() const { return 0.5 * (ymin + ymax); }
  bool valid() const { return xmin < xmax && ymin < ymax; }

  bool operator==(const Box&) const = default;
};

std::string to_string(const Box& b);

/// Throws std::invalid_argument when `b` is degenerate.
void require_valid(const Box& b, const char* what);

/// Intersection over union. Throws on degenerate boxes.
double iou(const Box& a, const Box& b);

Box clip(const Box& b, double width, double height);

/// Box regression deltas (dx, dy, dw, dh) of `target` relative to `ref`,
/// multiplied by `weights`.
std::array<double, 4> encode_deltas(const Box& ref, const Box& target,
                                    const std::array<double, 4>& weights);
Box decode_deltas(const Box& ref, const std::array<double, 4>& deltas,
                  const std::array<double, 4>& weights);

struct ScoredBox {
  Box box;
  double score = 0;
};

/// Greedy non-maximum suppression. Returns indices into `boxes` of kept
/// boxes ordered by descending score (ties broken by lower index), stopping
/// once `max_keep` boxes are kept.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold,
                             std::size_t max_keep = static_cast<std::size_t>(-1));

}  // namespace osfa
