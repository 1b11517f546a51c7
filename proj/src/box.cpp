#include "osfa/box.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace osfa {

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << '(' << b.xmin << ',' << b.ymin << ',' << b.xmax << ',' << b.ymax << ')';
  return os.str();
}

void require_valid(const Box& b, const char* what) {
  if (!b.valid() || !std::isfinite(b.xmin) || !std::isfinite(b.xmax) || !std::isfinite(b.ymin) ||
      !std::isfinite(b.ymax)) {
    throw std::invalid_argument(std::string(what) + ": degenerate box " + to_string(b));
  }
}

double iou(const Box& a, const Box& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0 || ih <= 0) {
    return 0.0;
  }
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

Box clip(const Box& b, double width, double height) {
  return Box{std::clamp(b.xmin, 0.0, width), std::clamp(b.ymin, 0.0, height),
             std::clamp(b.xmax, 0.0, width), std::clamp(b.ymax, 0.0, height)};
}

std::array<double, 4> encode_deltas(const Box& ref, const Box& target,
                                    const std::array<double, 4>& weights) {
  return {weights[0] * (target.cx() - ref.cx()) / ref.width(),
          weights[1] * (target.cy() - ref.cy()) / ref.height(),
          weights[2] * std::log(target.width() / ref.width()),
          weights[3] * std::log(target.height() / ref.height())};
}

Box decode_deltas(const Box& ref, const std::array<double, 4>& deltas,
                  const std::array<double, 4>& weights) {
  // exp() guard as in standard two-stage detectors: log(1000 / 16)
  constexpr double kMaxLogScale = 4.135166556742356;
  const double dx = deltas[0] / weights[0];
  const double dy = deltas[1] / weights[1];
  const double dw = std::min(deltas[2] / weights[2], kMaxLogScale);
  const double dh = std::min(deltas[3] / weights[3], kMaxLogScale);
  const double cx = ref.cx() + dx * ref.width();
  const double cy = ref.cy() + dy * ref.height();
  const double w = ref.width() * std::exp(dw);
  const double h = ref.height() * std::exp(dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold, std::size_t max_keep) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  // a box survives iff it overlaps no previously kept box above the threshold
  std::vector<std::size_t> keep;
  for (const std::size_t a : order) {
    if (keep.size() == max_keep) break;
    const bool clear = std::none_of(keep.begin(), keep.end(), [&](std::size_t k) {
      return iou(boxes[k].box, boxes[a].box) > iou_threshold;
    });
    if (clear) keep.push_back(a);
  }
  return keep;
}

}  // namespace osfa
