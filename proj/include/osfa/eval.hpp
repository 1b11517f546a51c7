#pragma once

// AP50, appearance-threshold filtering and report tables.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "osfa/box.hpp"
#include "osfa/data.hpp"
#include "osfa/detector.hpp"

namespace osfa {

/// Detections and ground truth of one class on one image. Detections that
/// miss every gt but overlap an `ignore` box at the IoU threshold are dropped.
struct ImageDetections {
  std::vector<ScoredBox> detections;
  std::vector<Box> gt;
  std::vector<Box> ignore;
};

/// VOC all-point interpolated AP at IoU >= 0.5 over a set of images.
///
/// Detections are ranked by descending score; ties are broken by image,
/// then box coordinates, so input order never matters. Each detection is
/// matched to its highest-IoU gt on its image; a gt is claimed at most once
/// and later claimants are false positives. Precision/recall points are
/// taken only between distinct scores.
///
/// Returns std::nullopt when there is no gt and no detection (class skipped),
/// 0 when there is no gt but some detection.
std::optional<double> ap50(const std::vector<ImageDetections>& images, double iou_threshold = 0.5);
std::optional<double> ap50(const std::vector<ScoredBox>& detections, const std::vector<Box>& gt);

/// Mean AP over classes with counts[c] >= thr; std::nullopt is the empty
/// bucket. Throws std::invalid_argument when counts miss a class.
std::optional<double> thresholded_map(const std::map<int, double>& per_class_ap,
                                      const std::map<int, std::size_t>& counts, std::size_t thr);
/// As above, but classes are first averaged within their group (title),
/// then groups are averaged. Classes missing from `groups` form one group.
std::optional<double> thresholded_map(const std::map<int, double>& per_class_ap,
                                      const std::map<int, std::size_t>& counts, std::size_t thr,
                                      const std::map<int, std::string>& groups);

inline const std::vector<std::size_t> kSeenThresholds{0, 80, 160, 320};
inline const std::vector<std::size_t> kUnseenThresholds{0, 20, 40, 80, 100};

struct BlockResult {
  std::map<int, double> per_class_ap50;
  std::map<int, std::size_t> counts;
  std::vector<std::size_t> thr;
  std::vector<std::optional<double>> thresholded;  // aligned with thr
  bool operator==(const BlockResult&) const = default;
};

struct EvalResult {
  BlockResult seen;
  BlockResult unseen;
  bool operator==(const EvalResult&) const = default;

  const BlockResult& block(ClassSplit s) const { return s == ClassSplit::Seen ? seen : unseen; }
  std::string to_json() const;
  static EvalResult from_json(const std::string& text);
};

struct EvalOptions {
  std::uint64_t query_seed = 0;
  bool exclude_query_instance = false;
  bool average_over_titles = false;  // mean over classes per title, then over titles
  std::vector<std::size_t> thr_seen = kSeenThresholds;
  std::vector<std::size_t> thr_unseen = kUnseenThresholds;
  std::size_t query_size = 64;
};

/// Detections for the query of class `class_id` on test page `page`.
using DetectFn = std::function<std::vector<Detection>(int class_id, const Image& query, std::size_t page)>;

/// Scores `detect` over every test page for each class's single query.
EvalResult evaluate_with(const Dataset& dataset, const DetectFn& detect, const EvalOptions& options = {});

/// Trained detector; target encodings are computed once per page.
template <typename T>
EvalResult evaluate(const DetectorParams<T>& params, const DetectorConfig& cfg, const Dataset& dataset,
                    const EvalOptions& options = {});

/// Emits each page's gt boxes of the queried class with score 1.
DetectFn oracle_detector(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Reports

struct LabeledResult {
  std::string label;   // row label, e.g. "Default" or "+Ours"
  std::uint64_t seed = 0;
  EvalResult result;
  std::string source;  // file name, used in error messages
};

struct ReportCell {
  std::optional<double> mean;  // nullopt: empty bucket in every seed
  double std = 0;              // sample std over seeds, 0 for a single seed
  std::size_t n_seeds = 0;
  bool operator==(const ReportCell&) const = default;
};

struct ReportTable {
  std::vector<std::size_t> thr_seen;
  std::vector<std::size_t> thr_unseen;
  std::vector<std::string> rows;  // labels in display order
  std::map<std::string, std::vector<ReportCell>> seen;
  std::map<std::string, std::vector<ReportCell>> unseen;
  bool operator==(const ReportTable&) const = default;
};

/// Canonical display order of known row labels.
const std::vector<std::string>& canonical_rows();

/// Aggregates mean +- std over seeds per (label, block, thr). Throws
/// std::invalid_argument, naming the sources, when thr lists differ.
ReportTable report(const std::vector<LabeledResult>& results);

/// Plain-text tables: the augmentation comparison (Default, +Ours, +Gblur,
/// +Solarize, +Rcrop) and the learnable-variance ablation (Default, +Fixed,
/// +Single, +Channel-wise, +Position-wise, +Position-Channel; +Channel-wise
/// shows the +Ours row). Empty buckets print as an em dash.
std::string render_text(const ReportTable& table, int precision = 3);
/// block,variant,thr,mean_ap50,std_ap50,n_seeds
std::string render_csv(const ReportTable& table);
ReportTable parse_csv(const std::string& csv);

/// Marker printed for an empty bucket.
inline constexpr const char* kEmptyBucket = "\xE2\x80\x94";

}  // namespace osfa
