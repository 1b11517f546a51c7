#include "osfa/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace osfa {

std::size_t DetectorConfig::stride() const {
  std::size_t s = 1;
  for (const auto& st : backbone) s *= st.stride;
  return s;
}

FeatureGeometry DetectorConfig::query_geometry() const {
  return {channels(), query_size / stride(), query_size / stride()};
}

void DetectorConfig::validate() const {
  if (backbone.empty()) throw std::invalid_argument("backbone needs at least one stage");
  for (const auto& st : backbone) {
    if (st.channels == 0 || st.stride == 0) throw std::invalid_argument("backbone stage must be positive");
  }
  const std::size_t s = stride();
  if (image_size % s != 0 || query_size % s != 0) {
    throw std::invalid_argument("image_size and query_size must be multiples of the backbone stride " +
                                std::to_string(s));
  }
  if (pool_size == 0 || instance_channels == 0 || head_hidden == 0 || match_channels == 0 ||
      rpn_channels == 0) {
    throw std::invalid_argument("detector widths must be positive");
  }
  if (!(negative_iou <= positive_iou)) throw std::invalid_argument("negative_iou must be <= positive_iou");
  if (sample_cap < 2) throw std::invalid_argument("sample_cap must be >= 2");
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
ConvParams<T> make_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, Rng& rng,
                        double gain = 1.0) {
  ConvParams<T> c;
  c.weight = he_normal<T>({out, in, k, k}, in * k * k, rng, gain);
  c.bias = Tensor<T>::parameter({out}, std::vector<T>(out, T(0)));
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

template <typename T>
DenseParams<T> make_dense(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  return {he_normal<T>({in, out}, in, rng, gain), Tensor<T>::parameter({out}, std::vector<T>(out, T(0)))};
}

template <typename T>
Tensor<T> apply_conv(const Tensor<T>& x, const ConvParams<T>& c) {
  return conv2d(x, c.weight, c.bias, c.stride, c.pad);
}

template <typename T>
Tensor<T> apply_dense(const Tensor<T>& x, const DenseParams<T>& d) {
  const std::size_t rows = x.dim(0);
  const std::size_t out = d.bias.dim(0);
  return add(matmul(x, d.weight), expand(d.bias, {rows, out}, {0 + 1}));
}

template <typename T>
Tensor<T> copy_param(const Tensor<T>& t) {
  return t.clone(true);
}

}  // namespace

template <typename T>
DetectorParams<T> DetectorParams<T>::init(const DetectorConfig& cfg, Rng& rng) {
  cfg.validate();
  DetectorParams p;
  std::size_t in = 1;
  for (const auto& st : cfg.backbone) {
    p.backbone.push_back(make_conv<T>(in, st.channels, 3, st.stride, rng));
    in = st.channels;
  }
  const std::size_t C = cfg.channels();
  p.match_proj = make_conv<T>(C + 1, cfg.match_channels, 1, 1, rng);
  p.rpn_conv = make_conv<T>(cfg.match_channels, cfg.rpn_channels, 3, 1, rng);
  p.rpn_cls = make_conv<T>(cfg.rpn_channels, 1, 1, 1, rng, 0.05);
  p.rpn_reg = make_conv<T>(cfg.rpn_channels, 4, 1, 1, rng, 0.05);
  p.roi_proj = make_conv<T>(C, cfg.instance_channels, 1, 1, rng);
  const std::size_t KK = cfg.pool_size * cfg.pool_size;
  p.head_hidden = make_dense<T>(3 * cfg.instance_channels * KK, cfg.head_hidden, rng);
  p.head_out = make_dense<T>(cfg.head_hidden, 5, rng, 0.05);
  return p;
}

template <typename T>
std::vector<ParamRef<T>> DetectorParams<T>::named() const {
  std::vector<ParamRef<T>> out;
  const auto conv = [&out](const std::string& name, const std::string& group, const ConvParams<T>& c) {
    out.push_back({name + "/weight", group, c.weight});
    out.push_back({name + "/bias", group, c.bias});
  };
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    conv("backbone/conv" + std::to_string(i), "backbone", backbone[i]);
  }
  conv("rpn/match_proj", "matching", match_proj);
  conv("rpn/conv", "rpn", rpn_conv);
  conv("rpn/cls", "rpn", rpn_cls);
  conv("rpn/reg", "rpn", rpn_reg);
  conv("relation/roi_proj", "roi", roi_proj);
  out.push_back({"relation/hidden/weight", "relation", head_hidden.weight});
  out.push_back({"relation/hidden/bias", "relation", head_hidden.bias});
  out.push_back({"relation/out/weight", "relation", head_out.weight});
  out.push_back({"relation/out/bias", "relation", head_out.bias});
  return out;
}

template <typename T>
std::vector<NamedTensor> DetectorParams<T>::to_checkpoint() const {
  std::vector<NamedTensor> out;
  for (const auto& p : named()) out.push_back(to_named(p.name, p.tensor));
  return out;
}

template <typename T>
DetectorParams<T> DetectorParams<T>::from_checkpoint(const DetectorConfig& cfg,
                                                     const std::vector<NamedTensor>& tensors) {
  Rng unused(0);
  DetectorParams p = init(cfg, unused);
  for (auto& ref : p.named()) {
    const NamedTensor& t = find_tensor(tensors, ref.name);
    if (t.shape != ref.tensor.shape()) {
      throw CheckpointError("tensor '" + ref.name + "' has shape " + to_string(t.shape) + ", model expects " +
                            to_string(ref.tensor.shape()));
    }
    auto dst = ref.tensor.mutable_data();
    std::transform(t.values.begin(), t.values.end(), dst.begin(), [](float v) { return static_cast<T>(v); });
  }
  return p;
}

template <typename T>
DetectorParams<T> DetectorParams<T>::clone() const {
  DetectorParams p = *this;
  const auto conv = [](ConvParams<T>& c) {
    c.weight = copy_param(c.weight);
    c.bias = copy_param(c.bias);
  };
  for (auto& c : p.backbone) conv(c);
  conv(p.match_proj);
  conv(p.rpn_conv);
  conv(p.rpn_cls);
  conv(p.rpn_reg);
  conv(p.roi_proj);
  for (DenseParams<T>* d : {&p.head_hidden, &p.head_out}) {
    d->weight = copy_param(d->weight);
    d->bias = copy_param(d->bias);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward stages

template <typename T>
Tensor<T> extract_features(const Tensor<T>& image, const DetectorParams<T>& params) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("extract_features expects a [1,H,W] grayscale image, got " + to_string(image.shape()));
  }
  std::size_t stride = 1;
  for (const auto& c : params.backbone) stride *= c.stride;
  if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0) {
    throw ShapeError("image extents " + to_string(image.shape()) + " are not multiples of stride " +
                     std::to_string(stride));
  }
  Tensor<T> x = image;
  for (const auto& c : params.backbone) {
    x = relu(apply_conv(x, c));
  }
  return x;
}

template <typename T>
Tensor<T> match_features(const Tensor<T>& fq, const Tensor<T>& ft) {
  if (fq.rank() != 3 || ft.rank() != 3 || fq.dim(0) != ft.dim(0)) {
    throw ShapeError("match_features: channel mismatch between query " + to_string(fq.shape()) +
                     " and target " + to_string(ft.shape()));
  }
  const Tensor<T> pooled = reduce(ReduceOp::Mean, fq, {1, 2});  // [C]
  const Tensor<T> cosine = cosine_map(pooled, ft);
  const Tensor<T> scaled = mul(ft, expand(pooled, ft.shape(), {0}));
  return concat<T>({cosine, scaled}, 0);
}

template <typename T>
RpnOutput<T> rpn_forward(const Tensor<T>& similarity, const DetectorParams<T>& params) {
  const Tensor<T> m = relu(apply_conv(similarity, params.match_proj));
  const Tensor<T> r = relu(apply_conv(m, params.rpn_conv));
  return {apply_conv(r, params.rpn_cls), apply_conv(r, params.rpn_reg)};
}

std::vector<Box> make_anchors(std::size_t grid_h, std::size_t grid_w, std::size_t stride, double side) {
  std::vector<Box> anchors;
  anchors.reserve(grid_h * grid_w);
  const double s = static_cast<double>(stride);
  for (std::size_t y = 0; y < grid_h; ++y) {
    for (std::size_t x = 0; x < grid_w; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) * s;
      const double cy = (static_cast<double>(y) + 0.5) * s;
      anchors.push_back({cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2});
    }
  }
  return anchors;
}

namespace {
double sigmoid_d(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}
}  // namespace

template <typename T>
std::vector<Proposal> propose(const RpnOutput<T>& rpn, const DetectorConfig& cfg, double image_w,
                              double image_h) {
  const std::size_t H = rpn.objectness.dim(1), W = rpn.objectness.dim(2), P = H * W;
  const auto anchors = make_anchors(H, W, cfg.stride(), cfg.anchor_side());
  const auto obj = rpn.objectness.data();
  const auto d = rpn.deltas.data();
  std::vector<Proposal> cands;
  std::vector<ScoredBox> scored;
  for (std::size_t a = 0; a < P; ++a) {
    const std::array<double, 4> delta{d[a], d[P + a], d[2 * P + a], d[3 * P + a]};
    const Box box = clip(decode_deltas(anchors[a], delta, kRpnDeltaWeights), image_w, image_h);
    if (!box.valid()) continue;
    cands.push_back({box, sigmoid_d(static_cast<double>(obj[a])), a});
    scored.push_back({box, cands.back().objectness});
  }
  std::vector<Proposal> out;
  for (const std::size_t i : nms(scored, cfg.rpn_nms_iou, cfg.rpn_top_n)) out.push_back(cands[i]);
  return out;
}

template <typename T>
Tensor<T> roi_pool(const Tensor<T>& features, const std::vector<Box>& boxes, std::size_t K, std::size_t stride) {
  std::vector<FeatureRect> rects;
  rects.reserve(boxes.size());
  const double s = static_cast<double>(stride);
  for (const auto& b : boxes) {
    require_valid(b, "roi_pool");
    rects.push_back({b.xmin / s, b.ymin / s, b.xmax / s, b.ymax / s});
  }
  return roi_align(features, std::span<const FeatureRect>(rects), K);
}

template <typename T>
RelationOutput<T> relation_head(const Tensor<T>& query_instance, const Tensor<T>& target_instances,
                                const DetectorParams<T>& params) {
  if (query_instance.rank() != 3 || target_instances.rank() != 4 ||
      query_instance.shape() != Shape(target_instances.shape().begin() + 1, target_instances.shape().end())) {
    throw ShapeError("relation_head: query " + to_string(query_instance.shape()) + " vs targets " +
                     to_string(target_instances.shape()));
  }
  const std::size_t R = target_instances.dim(0), C = target_instances.dim(1);
  const std::size_t KK = target_instances.dim(2) * target_instances.dim(3);
  const Shape full = target_instances.shape();

  const Tensor<T> contrastive = sub(target_instances, expand(query_instance, full, {1, 2, 3}));

  const Tensor<T> flat = reshape(target_instances, {R, C, KK});
  const Tensor<T> q_mean = reduce(ReduceOp::Mean, query_instance, {1, 2});  // [C']
  const Tensor<T> sim = scale(reduce(ReduceOp::Sum, mul(flat, expand(q_mean, {R, C, KK}, {1})), {1}),
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(C))));
  const Tensor<T> weights = softmax_rows(sim);  // [R, KK]
  const Tensor<T> attention =
      reshape(scale(mul(flat, expand(weights, {R, C, KK}, {0, 2})), static_cast<T>(KK)), full);

  const Tensor<T> fused = reshape(concat<T>({contrastive, target_instances, attention}, 1), {R, 3 * C * KK});
  const Tensor<T> hidden = relu(apply_dense(fused, params.head_hidden));
  const Tensor<T> out = apply_dense(hidden, params.head_out);  // [R, 5]
  const std::size_t logit_col[] = {0};
  const std::size_t delta_cols[] = {1, 2, 3, 4};
  return {reshape(take(out, 1, std::span<const std::size_t>(logit_col)), {R}),
          take(out, 1, std::span<const std::size_t>(delta_cols)), weights, contrastive};
}

// ---------------------------------------------------------------------------
// Loss

LabelAssignment assign_labels(const std::vector<Box>& candidates, const std::vector<Box>& gt,
                              double positive_iou, double negative_iou, bool force_best) {
  LabelAssignment out;
  out.label.assign(candidates.size(), 0);
  out.matched_gt.assign(candidates.size(), 0);
  if (gt.empty()) return out;
  std::vector<double> best_for_gt(gt.size(), -1.0);
  std::vector<std::size_t> best_idx(gt.size(), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(candidates[i], gt[g]);
      if (v > best) {
        best = v;
        out.matched_gt[i] = g;
      }
      if (v > best_for_gt[g]) {
        best_for_gt[g] = v;
        best_idx[g] = i;
      }
    }
    out.label[i] = best >= positive_iou ? 1 : (best < negative_iou ? 0 : -1);
  }
  if (force_best) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (best_for_gt[g] > 0) {
        out.label[best_idx[g]] = 1;
        out.matched_gt[best_idx[g]] = g;
      }
    }
  }
  return out;
}

void add_hard_negatives(const std::vector<Box>& candidates, const std::vector<Box>& hard_negatives,
                        double positive_iou, LabelAssignment& labels, std::vector<std::size_t>& sampled) {
  if (hard_negatives.empty()) return;
  std::vector<bool> taken(candidates.size(), false);
  for (std::size_t i : sampled) taken[i] = true;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (labels.label[i] == 1) continue;
    const bool hit = std::any_of(hard_negatives.begin(), hard_negatives.end(),
                                 [&](const Box& h) { return iou(candidates[i], h) >= positive_iou; });
    if (!hit) continue;
    labels.label[i] = 0;
    if (!taken[i]) {
      sampled.push_back(i);
      taken[i] = true;
    }
  }
}

std::vector<std::size_t> sample_candidates(const LabelAssignment& labels, std::size_t cap,
                                           std::size_t negatives_per_positive, Rng& rng) {
  std::vector<std::size_t> pos, negs;
  for (std::size_t i = 0; i < labels.label.size(); ++i) {
    if (labels.label[i] == 1) pos.push_back(i);
    if (labels.label[i] == 0) negs.push_back(i);
  }
  const auto partial_shuffle = [&rng](std::vector<std::size_t>& v, std::size_t k) {
    k = std::min(k, v.size());
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(v[i], v[i + rng.below(v.size() - i)]);
    }
    v.resize(k);
  };
  const std::size_t max_pos = std::max<std::size_t>(1, cap / (1 + negatives_per_positive));
  partial_shuffle(pos, max_pos);
  const std::size_t want_neg = std::min(cap - pos.size(), std::max<std::size_t>(1, pos.size() * negatives_per_positive));
  partial_shuffle(negs, want_neg);
  std::vector<std::size_t> out = pos;
  out.insert(out.end(), negs.begin(), negs.end());
  std::sort(out.begin(), out.end());
  return out;
}

LossPlan make_loss_plan(const std::vector<Box>& candidates, const std::vector<Box>& gt,
                        const LabelAssignment& labels, const std::vector<std::size_t>& sampled,
                        const std::array<double, 4>& weights) {
  LossPlan plan;
  plan.sampled = sampled;
  for (const std::size_t i : sampled) {
    const bool positive = labels.label.at(i) == 1;
    plan.targets.push_back(positive ? 1.0 : 0.0);
    if (positive) {
      plan.positives.push_back(i);
      plan.box_targets.push_back(encode_deltas(candidates[i], gt.at(labels.matched_gt[i]), weights));
    }
  }
  return plan;
}

template <typename T>
Tensor<T> detection_loss(const Tensor<T>& logits, const Tensor<T>& deltas, const LossPlan& plan) {
  if (plan.sampled.empty()) {
    throw std::invalid_argument("detection_loss: nothing sampled");
  }
  if (deltas.rank() != 2 || deltas.dim(1) != 4 || deltas.dim(0) != logits.dim(0)) {
    throw ShapeError("detection_loss: deltas " + to_string(deltas.shape()) + " for logits " +
                     to_string(logits.shape()));
  }
  std::vector<T> targets(plan.targets.begin(), plan.targets.end());
  const Tensor<T> cls = bce_with_logits(take(logits, 0, std::span<const std::size_t>(plan.sampled)),
                                        std::span<const T>(targets));
  if (plan.positives.empty()) {
    return cls;
  }
  std::vector<T> box_targets;
  for (const auto& t : plan.box_targets) box_targets.insert(box_targets.end(), t.begin(), t.end());
  const std::size_t P = plan.positives.size();
  const Tensor<T> pred = take(deltas, 0, std::span<const std::size_t>(plan.positives));
  const Tensor<T> l1 = scale(sum(abs(sub(pred, Tensor<T>({P, 4}, std::move(box_targets))))),
                             static_cast<T>(1.0 / static_cast<double>(P)));
  return add(cls, l1);
}

template <typename T>
Tensor<T> detection_loss(const Tensor<T>& logits, const Tensor<T>& deltas, const std::vector<Box>& candidates,
                         const std::vector<Box>& gt, const DetectorConfig& cfg,
                         const std::array<double, 4>& weights, Rng& rng) {
  if (gt.empty()) {
    throw std::invalid_argument("detection_loss: episode has no ground-truth box");
  }
  const auto labels = assign_labels(candidates, gt, cfg.positive_iou, cfg.negative_iou, false);
  const auto sampled = sample_candidates(labels, cfg.sample_cap, cfg.negatives_per_positive, rng);
  return detection_loss(logits, deltas, make_loss_plan(candidates, gt, labels, sampled, weights));
}

// ---------------------------------------------------------------------------
// Training forward

namespace {

// Restricts a plan to its sampled candidates, renumbered 0..n-1.
std::pair<std::vector<Box>, LossPlan> compact(const std::vector<Box>& candidates, const LossPlan& plan) {
  std::vector<Box> boxes;
  LossPlan out;
  out.targets = plan.targets;
  out.box_targets = plan.box_targets;
  for (std::size_t k = 0; k < plan.sampled.size(); ++k) {
    boxes.push_back(candidates.at(plan.sampled[k]));
    out.sampled.push_back(k);
    if (plan.targets[k] > 0.5) out.positives.push_back(k);
  }
  return {boxes, out};
}

template <typename T>
Tensor<T> pool_query(const Tensor<T>& fq, const DetectorParams<T>& params, const DetectorConfig& cfg) {
  const Tensor<T> projected = apply_conv(fq, params.roi_proj);
  const double s = static_cast<double>(cfg.stride());
  const Box whole{0, 0, static_cast<double>(fq.dim(2)) * s, static_cast<double>(fq.dim(1)) * s};
  const Tensor<T> pooled = relu(roi_pool(projected, {whole}, cfg.pool_size, cfg.stride()));
  return reshape(pooled, {cfg.instance_channels, cfg.pool_size, cfg.pool_size});
}

}  // namespace

template <typename T>
TrainForward<T> forward_train(const DetectorParams<T>& params, const DetectorConfig& cfg, const Tensor<T>& query,
                              const Tensor<T>& target, const std::vector<Box>& gt, const QueryNoise<T>& noise,
                              Rng& sample_rng, const TrainPlan* plan, const ForwardOptions& options) {
  if (gt.empty()) {
    throw std::invalid_argument("forward_train: episode has no ground-truth box");
  }
  const Tensor<T> ft = extract_features(target, params);
  Tensor<T> fq = extract_features(query, params);
  if (noise.sigma != nullptr) {
    if (noise.epsilon != nullptr) {
      fq = augment_query_with(fq, *noise.sigma, *noise.epsilon);
    } else if (noise.rng != nullptr) {
      fq = augment_query(fq, *noise.sigma, AugMode::Train, *noise.rng);
    } else {
      throw std::invalid_argument("forward_train: sigma given without eps or rng");
    }
  }
  const Tensor<T> fq_match = options.detach_query_for_matching ? fq.detach() : fq;
  const Tensor<T> fq_relation = options.detach_query_for_relation ? fq.detach() : fq;

  const RpnOutput<T> rpn = rpn_forward(match_features(fq_match, ft), params);
  const std::size_t H = ft.dim(1), W = ft.dim(2), P = H * W;
  const double img_w = static_cast<double>(target.dim(2)), img_h = static_cast<double>(target.dim(1));

  TrainForward<T> out;
  if (plan != nullptr) {
    out.plan = *plan;
  } else {
    const auto anchors = make_anchors(H, W, cfg.stride(), cfg.anchor_side());
    auto labels = assign_labels(anchors, gt, cfg.positive_iou, cfg.negative_iou, true);
    auto sampled = sample_candidates(labels, cfg.sample_cap, cfg.negatives_per_positive, sample_rng);
    add_hard_negatives(anchors, options.hard_negatives, cfg.positive_iou, labels, sampled);
    out.plan.rpn = make_loss_plan(anchors, gt, labels, sampled, kRpnDeltaWeights);

    for (const auto& p : propose(rpn, cfg, img_w, img_h)) out.plan.proposals.push_back(p.box);
    out.plan.proposals.insert(out.plan.proposals.end(), gt.begin(), gt.end());
    out.plan.proposals.insert(out.plan.proposals.end(), options.hard_negatives.begin(), options.hard_negatives.end());
    auto plabels = assign_labels(out.plan.proposals, gt, cfg.positive_iou, cfg.negative_iou, false);
    auto psampled = sample_candidates(plabels, cfg.sample_cap, cfg.negatives_per_positive, sample_rng);
    add_hard_negatives(out.plan.proposals, options.hard_negatives, cfg.positive_iou, plabels, psampled);
    out.plan.head = make_loss_plan(out.plan.proposals, gt, plabels, psampled, kHeadDeltaWeights);
  }

  out.rpn_loss = detection_loss(reshape(rpn.objectness, {P}), transpose(reshape(rpn.deltas, {4, P})),
                                out.plan.rpn);

  const auto [boxes, head_plan] = compact(out.plan.proposals, out.plan.head);
  const Tensor<T> projected = apply_conv(ft, params.roi_proj);
  const Tensor<T> targets = relu(roi_pool(projected, boxes, cfg.pool_size, cfg.stride()));
  const RelationOutput<T> rel = relation_head(pool_query(fq_relation, params, cfg), targets, params);
  out.head_loss = detection_loss(rel.logits, rel.deltas, head_plan);
  out.loss = add(out.rpn_loss, out.head_loss);
  return out;
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
QueryEncoding<T> encode_query(const DetectorParams<T>& params, const DetectorConfig& cfg, const Image& query,
                              const SigmaParams<T>* sigma, AugMode mode, Rng* rng) {
  NoGradGuard no_grad;
  const Image q = resize_bilinear(query, cfg.query_size, cfg.query_size);
  Tensor<T> fq = extract_features(to_tensor<T>(q), params);
  if (sigma != nullptr && mode == AugMode::Train) {
    if (rng == nullptr) throw std::invalid_argument("encode_query: train mode needs an rng");
    fq = augment_query(fq, *sigma, mode, *rng);
  }
  return {fq, pool_query(fq, params, cfg)};
}

template <typename T>
TargetEncoding<T> encode_target(const DetectorParams<T>& params, const Image& target) {
  NoGradGuard no_grad;
  std::size_t stride = 1;
  for (const auto& c : params.backbone) stride *= c.stride;
  // blank paper pads to the next stride multiple
  const std::size_t W = (target.width + stride - 1) / stride * stride;
  const std::size_t H = (target.height + stride - 1) / stride * stride;
  Image padded(W, H, 255);
  for (std::size_t y = 0; y < target.height; ++y) {
    for (std::size_t x = 0; x < target.width; ++x) padded.at(x, y) = target.at(x, y);
  }
  TargetEncoding<T> enc;
  enc.features = extract_features(to_tensor<T>(padded), params);
  enc.projected = apply_conv(enc.features, params.roi_proj);
  enc.width = static_cast<double>(target.width);
  enc.height = static_cast<double>(target.height);
  return enc;
}

template <typename T>
std::vector<Detection> detect_encoded(const DetectorParams<T>& params, const DetectorConfig& cfg,
                                      const QueryEncoding<T>& query, const TargetEncoding<T>& target,
                                      int query_class) {
  NoGradGuard no_grad;
  const RpnOutput<T> rpn = rpn_forward(match_features(query.features, target.features), params);
  const auto proposals = propose(rpn, cfg, target.width, target.height);
  if (proposals.empty()) return {};
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  const Tensor<T> inst = relu(roi_pool(target.projected, boxes, cfg.pool_size, cfg.stride()));
  const RelationOutput<T> rel = relation_head(query.instance, inst, params);
  const auto logits = rel.logits.data();
  const auto deltas = rel.deltas.data();
  std::vector<ScoredBox> kept;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const double score = sigmoid_d(static_cast<double>(logits[r]));
    if (score < cfg.score_threshold) continue;
    const std::array<double, 4> d{deltas[4 * r], deltas[4 * r + 1], deltas[4 * r + 2], deltas[4 * r + 3]};
    const Box b = clip(decode_deltas(boxes[r], d, kHeadDeltaWeights), target.width, target.height);
    if (!b.valid()) continue;
    kept.push_back({b, score});
  }
  std::vector<Detection> out;
  for (const std::size_t i : nms(kept, cfg.detection_nms_iou)) {
    out.push_back({kept[i].box, kept[i].score, query_class});
  }
  return out;
}

template <typename T>
std::vector<Detection> detect(const DetectorParams<T>& params, const DetectorConfig& cfg, const Image& query,
                              const Image& target, const SigmaParams<T>* sigma, AugMode mode, Rng* rng,
                              int query_class) {
  const auto q = encode_query(params, cfg, query, sigma, mode, rng);
  const auto t = encode_target(params, target);
  return detect_encoded(params, cfg, q, t, query_class);
}

// ---------------------------------------------------------------------------

#define OSFA_INSTANTIATE(T)                                                                                  \
  template struct DetectorParams<T>;                                                                         \
  template Tensor<T> extract_features<T>(const Tensor<T>&, const DetectorParams<T>&);                        \
  template Tensor<T> match_features<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template RpnOutput<T> rpn_forward<T>(const Tensor<T>&, const DetectorParams<T>&);                          \
  template std::vector<Proposal> propose<T>(const RpnOutput<T>&, const DetectorConfig&, double, double);     \
  template Tensor<T> roi_pool<T>(const Tensor<T>&, const std::vector<Box>&, std::size_t, std::size_t);       \
  template RelationOutput<T> relation_head<T>(const Tensor<T>&, const Tensor<T>&, const DetectorParams<T>&); \
  template Tensor<T> detection_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossPlan&);                 \
  template Tensor<T> detection_loss<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<Box>&,          \
                                       const std::vector<Box>&, const DetectorConfig&,                       \
                                       const std::array<double, 4>&, Rng&);                                  \
  template TrainForward<T> forward_train<T>(const DetectorParams<T>&, const DetectorConfig&, const Tensor<T>&, \
                                            const Tensor<T>&, const std::vector<Box>&, const QueryNoise<T>&,  \
                                            Rng&, const TrainPlan*, const ForwardOptions&);                   \
  template QueryEncoding<T> encode_query<T>(const DetectorParams<T>&, const DetectorConfig&, const Image&,    \
                                            const SigmaParams<T>*, AugMode, Rng*);                           \
  template TargetEncoding<T> encode_target<T>(const DetectorParams<T>&, const Image&);                       \
  template std::vector<Detection> detect_encoded<T>(const DetectorParams<T>&, const DetectorConfig&,         \
                                                    const QueryEncoding<T>&, const TargetEncoding<T>&, int); \
  template std::vector<Detection> detect<T>(const DetectorParams<T>&, const DetectorConfig&, const Image&,   \
                                            const Image&, const SigmaParams<T>*, AugMode, Rng*, int);

OSFA_INSTANTIATE(float)
OSFA_INSTANTIATE(double)
#undef OSFA_INSTANTIATE

}  // namespace osfa
