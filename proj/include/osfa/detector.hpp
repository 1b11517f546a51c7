#pragma once

// Compact one-shot detector.
//
//   query  --backbone--> Fq --(+ noise, train only)--+
//   target --backbone--> Ft                          |
//     match(Fq, Ft) -> 1x1 projection -> RPN (objectness + anchor deltas)
//     proposals -> RoI align on projected Ft  -> Ft'  [R, C', K, K]
//     whole query patch -> RoI align on projected Fq -> Fq'  [C', K, K]
//     relation head(Fq', Ft') -> match logit + box refinement
//
// The relation head fuses three views of each proposal: the contrastive
// difference Ft' - Fq', the salient map Ft' itself, and Ft' reweighted by a
// spatial softmax over its similarity to the pooled query.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "osfa/box.hpp"
#include "osfa/checkpoint.hpp"
#include "osfa/gaussaug.hpp"
#include "osfa/image.hpp"
#include "osfa/rng.hpp"
#include "osfa/tensor.hpp"

namespace osfa {

struct BackboneStage {
  std::size_t channels;
  std::size_t stride;
};

struct DetectorConfig {
  std::size_t image_size = 256;
  std::size_t query_size = 64;
  std::vector<BackboneStage> backbone{{8, 2}, {16, 2}, {32, 2}, {32, 1}};
  std::size_t match_channels = 32;
  std::size_t rpn_channels = 32;
  std::size_t instance_channels = 64;  // C'
  std::size_t pool_size = 7;           // K
  std::size_t head_hidden = 32;
  double anchor_scale = 4.0;  // anchor side in units of the feature stride
  std::size_t rpn_top_n = 100;
  double rpn_nms_iou = 0.7;
  double score_threshold = 0.05;
  double detection_nms_iou = 0.5;
  double positive_iou = 0.5;
  double negative_iou = 0.4;
  std::size_t sample_cap = 64;
  std::size_t negatives_per_positive = 3;

  std::size_t stride() const;
  std::size_t channels() const { return backbone.back().channels; }
  double anchor_side() const { return anchor_scale * static_cast<double>(stride()); }
  FeatureGeometry query_geometry() const;
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <typename T>
struct DenseParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct ParamRef {
  std::string name;
  std::string group;
  Tensor<T> tensor;
};

template <typename T>
struct DetectorParams {
  std::vector<ConvParams<T>> backbone;
  ConvParams<T> match_proj;
  ConvParams<T> rpn_conv;
  ConvParams<T> rpn_cls;
  ConvParams<T> rpn_reg;
  ConvParams<T> roi_proj;
  DenseParams<T> head_hidden;
  DenseParams<T> head_out;

  static DetectorParams init(const DetectorConfig& cfg, Rng& rng);
  /// Every trainable tensor with its checkpoint name and parameter group
  /// (backbone, matching, rpn, roi, relation). Handles share storage.
  std::vector<ParamRef<T>> named() const;

  std::vector<NamedTensor> to_checkpoint() const;
  static DetectorParams from_checkpoint(const DetectorConfig& cfg, const std::vector<NamedTensor>& tensors);
  DetectorParams clone() const;
};

struct Proposal {
  Box box;
  double objectness = 0;
  std::size_t anchor = 0;
};

struct Detection {
  Box box;
  double score = 0;
  int query_class = -1;
};

template <typename T>
struct RpnOutput {
  Tensor<T> objectness;  // [1, H, W] logits
  Tensor<T> deltas;      // [4, H, W]
};

template <typename T>
struct RelationOutput {
  Tensor<T> logits;     // [R]
  Tensor<T> deltas;     // [R, 4]
  Tensor<T> attention;  // [R, K*K], rows sum to one
  Tensor<T> contrastive;
};

inline constexpr std::array<double, 4> kRpnDeltaWeights{1.0, 1.0, 1.0, 1.0};
inline constexpr std::array<double, 4> kHeadDeltaWeights{1.0, 1.0, 1.0, 1.0};

/// image [1,H,W] -> [C, H/stride, W/stride]
template <typename T>
Tensor<T> extract_features(const Tensor<T>& image, const DetectorParams<T>& params);

/// [1 + C, H, W]: channel 0 is the cosine similarity between the pooled query
/// vector and Ft at each location (0 when either is a zero vector); channels
/// 1..C are Ft scaled channel-wise by the pooled query vector.
template <typename T>
Tensor<T> match_features(const Tensor<T>& fq, const Tensor<T>& ft);

template <typename T>
RpnOutput<T> rpn_forward(const Tensor<T>& similarity, const DetectorParams<T>& params);

/// One square anchor per feature cell, centered on the cell, in scan order.
std::vector<Box> make_anchors(std::size_t grid_h, std::size_t grid_w, std::size_t stride, double side);

/// Sigmoid objectness + decoded anchor deltas, clipped to the image, NMS at
/// cfg.rpn_nms_iou, truncated to cfg.rpn_top_n. Sorted by descending objectness.
template <typename T>
std::vector<Proposal> propose(const RpnOutput<T>& rpn, const DetectorConfig& cfg, double image_w,
                              double image_h);

/// Bilinear K x K pooling of boxes given in image pixels (divided by
/// `stride` to reach feature coordinates). Output [R, C, K, K]. This is the
/// sampling step only; the detector applies its 1x1 projection first, which
/// is equivalent because the sampling weights sum to one.
template <typename T>
Tensor<T> roi_pool(const Tensor<T>& features, const std::vector<Box>& boxes, std::size_t K, std::size_t stride);

template <typename T>
RelationOutput<T> relation_head(const Tensor<T>& query_instance, const Tensor<T>& target_instances,
                                const DetectorParams<T>& params);

// ---------------------------------------------------------------------------
// Loss

/// Per-candidate label: 1 positive (IoU >= pos), 0 negative (IoU < neg),
/// -1 ignored. With force_best, each gt's best-overlapping candidate is
/// positive even below the threshold.
struct LabelAssignment {
  std::vector<int> label;
  std::vector<std::size_t> matched_gt;
};

LabelAssignment assign_labels(const std::vector<Box>& candidates, const std::vector<Box>& gt,
                              double positive_iou, double negative_iou, bool force_best);

/// Sampled subset of labelled candidates: up to cap/(1+ratio) positives and
/// `ratio` negatives per positive (at least one negative), at most `cap` total.
std::vector<std::size_t> sample_candidates(const LabelAssignment& labels, std::size_t cap,
                                           std::size_t negatives_per_positive, Rng& rng);

/// Everything the loss needs besides the network outputs; reusable so a
/// perturbed forward pass sees the same discrete choices.
struct LossPlan {
  std::vector<std::size_t> sampled;               // indices into candidates
  std::vector<double> targets;                    // 0/1 per sampled entry
  std::vector<std::size_t> positives;             // indices into candidates
  std::vector<std::array<double, 4>> box_targets; // encoded deltas per positive
};

LossPlan make_loss_plan(const std::vector<Box>& candidates, const std::vector<Box>& gt,
                        const LabelAssignment& labels, const std::vector<std::size_t>& sampled,
                        const std::array<double, 4>& weights);

/// mean BCE over sampled candidates + mean L1 over positive box deltas.
template <typename T>
Tensor<T> detection_loss(const Tensor<T>& logits, const Tensor<T>& deltas, const LossPlan& plan);

/// Labels, samples and scores in one call. Throws when gt is empty.
template <typename T>
Tensor<T> detection_loss(const Tensor<T>& logits, const Tensor<T>& deltas,
                         const std::vector<Box>& candidates, const std::vector<Box>& gt,
                         const DetectorConfig& cfg, const std::array<double, 4>& weights, Rng& rng);

// ---------------------------------------------------------------------------
// Training forward pass

struct TrainPlan {
  LossPlan rpn;
  std::vector<Box> proposals;
  LossPlan head;
};

struct ForwardOptions {
  bool detach_query_for_matching = false;
  bool detach_query_for_relation = false;
  /// Boxes of other classes on the target page. Candidates overlapping one
  /// at the positive IoU (and no gt) are always sampled as negatives.
  std::vector<Box> hard_negatives;
};

/// Labels candidates overlapping a hard negative as 0 and appends them to
/// `sampled` when missing.
void add_hard_negatives(const std::vector<Box>& candidates, const std::vector<Box>& hard_negatives,
                        double positive_iou, LabelAssignment& labels, std::vector<std::size_t>& sampled);

/// Query-side noise: none (sigma == nullptr), a frozen eps, or fresh draws from rng.
template <typename T>
struct QueryNoise {
  const SigmaParams<T>* sigma = nullptr;
  const Tensor<T>* epsilon = nullptr;
  Rng* rng = nullptr;
};

template <typename T>
struct TrainForward {
  Tensor<T> loss;
  Tensor<T> rpn_loss;
  Tensor<T> head_loss;
  TrainPlan plan;
};

/// Full training forward. With plan == nullptr, proposals and samples are
/// drawn (using sample_rng) and returned in the result; otherwise they are
/// reused verbatim.
template <typename T>
TrainForward<T> forward_train(const DetectorParams<T>& params, const DetectorConfig& cfg,
                              const Tensor<T>& query, const Tensor<T>& target, const std::vector<Box>& gt,
                              const QueryNoise<T>& noise, Rng& sample_rng, const TrainPlan* plan = nullptr,
                              const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Inference

template <typename T>
struct QueryEncoding {
  Tensor<T> features;  // [C, Hq, Wq], possibly augmented
  Tensor<T> instance;  // [C', K, K]
};

template <typename T>
struct TargetEncoding {
  Tensor<T> features;   // [C, H, W]
  Tensor<T> projected;  // [C', H, W]
  double width = 0;
  double height = 0;
};

template <typename T>
QueryEncoding<T> encode_query(const DetectorParams<T>& params, const DetectorConfig& cfg, const Image& query,
                              const SigmaParams<T>* sigma, AugMode mode, Rng* rng);

template <typename T>
TargetEncoding<T> encode_target(const DetectorParams<T>& params, const Image& target);

template <typename T>
std::vector<Detection> detect_encoded(const DetectorParams<T>& params, const DetectorConfig& cfg,
                                      const QueryEncoding<T>& query, const TargetEncoding<T>& target,
                                      int query_class);

/// End to end: features, query augmentation (no-op unless mode == Train),
/// matching, proposals, relation head, score threshold and NMS.
template <typename T>
std::vector<Detection> detect(const DetectorParams<T>& params, const DetectorConfig& cfg, const Image& query,
                              const Image& target, const SigmaParams<T>* sigma, AugMode mode, Rng* rng,
                              int query_class);

}  // namespace osfa
