#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "osfa/checkpoint.hpp"
#include "osfa/detector.hpp"
#include "osfa/gradcheck.hpp"
#include "osfa/image.hpp"

using namespace osfa;
using Td = Tensor<double>;

namespace {

std::vector<double> vals(const Td& t) { return {t.data().begin(), t.data().end()}; }

DetectorParams<double> init_params(const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return DetectorParams<double>::init(cfg, rng);
}

void fill(const Td& t, double v) {
  Td h = t;
  for (auto& x : h.mutable_data()) x = v;
}

Image blob_page(std::size_t size, std::size_t cx, std::size_t cy) {
  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = double(x) - double(cx), dy = double(y) - double(cy);
      if (dx * dx + dy * dy < 100) img.at(x, y) = 20;
      if (std::abs(dx) < 2 && dy > 0 && dy < 12) img.at(x, y) = 90;
    }
  return img;
}

}  // namespace

TEST_CASE("extract_features") {
  const DetectorConfig cfg;
  const auto p = init_params(cfg, 1);
  const Td f = extract_features(to_tensor<double>(Image(256, 256)), p);
  CHECK(f.shape() == Shape{32, 32, 32});

  auto zp = init_params(cfg, 2);
  for (auto& c : zp.backbone) fill(c.bias, 0.0);
  for (double v : extract_features(Td::zeros({1, 64, 64}), zp).data()) CHECK(std::isfinite(v));

  const Image page = blob_page(64, 30, 30);
  CHECK(vals(extract_features(to_tensor<double>(page), p)) == vals(extract_features(to_tensor<double>(page), p)));
  CHECK_THROWS_AS(extract_features(Td::zeros({1, 60, 64}), p), ShapeError);
  CHECK_THROWS_AS(extract_features(Td::zeros({2, 64, 64}), p), ShapeError);
}

TEST_CASE("match_features") {
  Rng rng(3);
  const Td fq = rng_uniform<double>(rng, 0.1, 1.0, {4, 2, 2});
  std::vector<double> pooled(4, 0.0);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 4; ++i) pooled[c] += fq.data()[c * 4 + i] / 4;
  }
  // location (0,1) of Ft is 3 x the pooled query vector
  std::vector<double> ft_v = vals(rng_uniform<double>(rng, 0.1, 1.0, {4, 3, 3}));
  for (std::size_t c = 0; c < 4; ++c) ft_v[c * 9 + 1] = 3 * pooled[c];
  const Td ft({4, 3, 3}, ft_v);
  const Td m = match_features(fq, ft);
  CHECK(m.shape() == Shape{5, 3, 3});
  CHECK(m.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(m.data()[(c + 1) * 9 + i] == doctest::Approx(ft_v[c * 9 + i] * pooled[c]).epsilon(1e-12));
    }
  }

  const Td zero_q = Td::zeros({4, 2, 2});
  const Td mz = match_features(zero_q, ft);
  for (std::size_t i = 0; i < 9; ++i) CHECK(mz.data()[i] == 0.0);

  const Td same = match_features(Td::full({4, 2, 2}, 0.7), Td::full({4, 3, 3}, 0.7));
  for (std::size_t i = 0; i < 9; ++i) CHECK(same.data()[i] == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(match_features(Td::zeros({3, 2, 2}), ft), ShapeError);
}

TEST_CASE("anchors and proposals") {
  DetectorConfig cfg;
  const auto anchors = make_anchors(2, 3, 8, 32);
  REQUIRE(anchors.size() == 6);
  CHECK(anchors[0] == Box{-12, -12, 20, 20});
  CHECK(anchors[1] == Box{-4, -12, 28, 20});
  CHECK(anchors[3] == Box{-12, -4, 20, 28});
  CHECK(cfg.anchor_side() == 32.0);

  const std::size_t H = 6, W = 6;
  RpnOutput<double> rpn{Td::zeros({1, H, W}), Td::zeros({4, H, W})};

  SUBCASE("zero logits: probability one half, scan order") {
    const auto props = propose(rpn, cfg, 48, 48);
    REQUIRE(!props.empty());
    for (std::size_t i = 0; i < props.size(); ++i) {
      CHECK(props[i].objectness == 0.5);
      if (i > 0) CHECK(props[i].anchor > props[i - 1].anchor);
    }
  }
  SUBCASE("top-N larger than the grid returns every location") {
    cfg.rpn_nms_iou = 1.0;
    cfg.rpn_top_n = 1000;
    const auto props = propose(rpn, cfg, 48, 48);
    CHECK(props.size() == H * W);
  }
  SUBCASE("single high logit ranks first") {
    std::vector<double> logits(H * W, 0.0);
    logits[20] = 4.0;
    rpn.objectness = Td({1, H, W}, logits);
    const auto props = propose(rpn, cfg, 48, 48);
    CHECK(props.front().anchor == 20);
    CHECK(props.front().objectness == doctest::Approx(1 / (1 + std::exp(-4.0))));
    CHECK(props.size() <= cfg.rpn_top_n);
    for (std::size_t i = 1; i < props.size(); ++i) CHECK(props[i - 1].objectness >= props[i].objectness);
  }
}

TEST_CASE("roi_pool") {
  const Td constant = Td::full({2, 5, 5}, 1.25);
  const Td c = roi_pool(constant, {Box{3, 5, 30, 33}}, 3, 8);
  CHECK(c.shape() == Shape{1, 2, 3, 3});
  for (double v : c.data()) CHECK(v == doctest::Approx(1.25).epsilon(1e-15));

  Rng rng(6);
  const Td f = rng_normal<double>(rng, {3, 4, 4});
  const Td id = roi_pool(f, {Box{0, 0, 32, 32}}, 4, 8);
  const auto a = vals(id), b = vals(f);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));

  const Td four({1, 2, 2}, {1, 2, 3, 4});
  CHECK(roi_pool(four, {Box{0, 0, 16, 16}}, 1, 8).item() == doctest::Approx(2.5).epsilon(1e-15));

  CHECK_THROWS(roi_pool(f, {Box{5, 5, 5, 9}}, 2, 8));
}

TEST_CASE("relation head") {
  const DetectorConfig cfg;
  const auto p = init_params(cfg, 4);
  Rng rng(7);
  const std::size_t C = cfg.instance_channels, K = cfg.pool_size;
  const Td q = rng_uniform<double>(rng, 0.0, 1.0, {C, K, K});
  const Td t = reshape(concat<double>({reshape(q, {1, C, K, K}), rng_uniform<double>(rng, 0.0, 1.0, {2, C, K, K})}, 0),
                       {3, C, K, K});
  const auto out = relation_head(q, t, p);
  CHECK(out.logits.shape() == Shape{3});
  CHECK(out.deltas.shape() == Shape{3, 4});
  for (std::size_t i = 0; i < C * K * K; ++i) CHECK(out.contrastive.data()[i] == 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < K * K; ++i) s += out.attention.data()[r * K * K + i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  auto zp = init_params(cfg, 4);
  fill(zp.head_out.weight, 0.0);
  fill(zp.head_out.bias, 0.0);
  const auto z = relation_head(q, t, zp);
  for (double v : z.logits.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(relation_head(Td::zeros({C, K + 1, K + 1}), t, p), ShapeError);
}

TEST_CASE("label assignment and sampling") {
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const std::vector<Box> cands{{0, 0, 10, 10}, {0, 0, 10, 12}, {2, 0, 12, 10}, {5, 0, 15, 10}, {20, 20, 30, 30}};
  // IoU: 1, 0.833, 0.667, 0.333, 0
  const auto l = assign_labels(cands, gt, 0.5, 0.4, false);
  CHECK(l.label == std::vector<int>{1, 1, 1, 0, 0});
  const auto band = assign_labels({{4, 0, 14, 10}}, gt, 0.5, 0.4, false);  // IoU 0.4286
  CHECK(band.label == std::vector<int>{-1});
  const auto forced = assign_labels({{4, 0, 14, 10}}, gt, 0.5, 0.4, true);
  CHECK(forced.label == std::vector<int>{1});

  LabelAssignment many;
  for (int i = 0; i < 40; ++i) many.label.push_back(1);
  for (int i = 0; i < 200; ++i) many.label.push_back(0);
  many.matched_gt.assign(many.label.size(), 0);
  Rng rng(1);
  const auto s = sample_candidates(many, 64, 3, rng);
  const auto pos = std::count_if(s.begin(), s.end(), [&](std::size_t i) { return many.label[i] == 1; });
  CHECK(pos == 16);
  CHECK(s.size() == 64);

  std::vector<std::size_t> sampled{0};
  LabelAssignment one{{1, 0, 0}, {0, 0, 0}};
  add_hard_negatives({{0, 0, 10, 10}, {50, 50, 60, 60}, {80, 80, 90, 90}}, {{51, 50, 61, 60}}, 0.5, one, sampled);
  CHECK(sampled == std::vector<std::size_t>{0, 1});
}

TEST_CASE("detection loss") {
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const std::vector<Box> cands{{0, 0, 10, 10}, {20, 20, 30, 30}, {40, 40, 50, 50}};
  const LabelAssignment labels = assign_labels(cands, gt, 0.5, 0.4, false);
  const LossPlan plan = make_loss_plan(cands, gt, labels, {0, 1, 2}, kHeadDeltaWeights);

  SUBCASE("perfect predictions") {
    const Td logits({3}, {40.0, -40.0, -40.0});
    const double l = detection_loss(logits, Td::zeros({3, 4}), plan).item();
    CHECK(l >= 0.0);
    CHECK(l < 1e-12);
  }
  SUBCASE("probability one half") {
    const double l = detection_loss(Td::zeros({3}), Td::zeros({3, 4}), plan).item();
    CHECK(l == doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  }
  SUBCASE("never negative") {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
      const Td lg = rng_uniform<double>(rng, -5, 5, {3});
      const Td d = rng_uniform<double>(rng, -2, 2, {3, 4});
      CHECK(detection_loss(lg, d, plan).item() >= 0.0);
    }
  }
  SUBCASE("missing ground truth is an error") {
    Rng rng(0);
    const DetectorConfig cfg;
    CHECK_THROWS(detection_loss(Td::zeros({3}), Td::zeros({3, 4}), cands, {}, cfg, kHeadDeltaWeights, rng));
  }
}

TEST_CASE("nms matches a brute-force oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<ScoredBox> boxes;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
      // coarse scores force ties
      boxes.push_back({{x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)}, double(rng.below(5))});
    }
    const double thr = rng.uniform(0.1, 0.8);
    // a box survives iff every better-ranked survivor overlaps it at most thr
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
    std::vector<bool> alive(n, false);
    for (std::size_t r = 0; r < n; ++r) {
      bool ok = true;
      for (std::size_t q = 0; q < r; ++q) {
        if (alive[order[q]] && iou(boxes[order[q]].box, boxes[order[r]].box) > thr) ok = false;
      }
      alive[order[r]] = ok;
    }
    std::vector<std::size_t> expect;
    for (std::size_t i : order)
      if (alive[i]) expect.push_back(i);
    CHECK(nms(boxes, thr) == expect);
    const std::size_t cap = 1 + rng.below(4);
    const auto capped = nms(boxes, thr, cap);
    CHECK(capped == std::vector<std::size_t>(expect.begin(), expect.begin() + std::min(cap, expect.size())));
  }
}

TEST_CASE("detect") {
  const DetectorConfig cfg;
  auto p = init_params(cfg, 9);
  const Image page = blob_page(128, 60, 50);
  const Image query = resize_bilinear(crop(page, {45, 35, 75, 65}), 64, 64);

  const auto a = detect<double>(p, cfg, query, page, nullptr, AugMode::Infer, nullptr, 3);
  const auto b = detect<double>(p, cfg, query, page, nullptr, AugMode::Infer, nullptr, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].box == b[i].box);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].query_class == 3);
    if (i > 0) CHECK(a[i - 1].score >= a[i].score);
  }

  fill(p.head_out.bias, -50.0);
  CHECK(detect<double>(p, cfg, query, page, nullptr, AugMode::Infer, nullptr, 3).empty());
}

TEST_CASE("shifting the target by one stride shifts the objectness map by one cell") {
  const DetectorConfig cfg;
  const auto p = init_params(cfg, 12);
  const Image page = blob_page(96, 40, 44);
  const Image shifted = shift_wrap(page, 8, 0);
  const Td fq = extract_features(to_tensor<double>(resize_bilinear(crop(page, {28, 32, 52, 56}), 64, 64)), p);
  const Td o1 = rpn_forward(match_features(fq, extract_features(to_tensor<double>(page), p)), p).objectness;
  const Td o2 = rpn_forward(match_features(fq, extract_features(to_tensor<double>(shifted), p)), p).objectness;
  const std::size_t H = o1.dim(1), W = o1.dim(2);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      CHECK(o2.data()[y * W + (x + 1) % W] == doctest::Approx(o1.data()[y * W + x]).epsilon(1e-12));
    }
  const auto arg = [](const Td& t) {
    return std::size_t(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
  };
  const std::size_t a1 = arg(o1), a2 = arg(o2);
  CHECK(a2 / W == a1 / W);
  CHECK(a2 % W == (a1 % W + 1) % W);
}

TEST_CASE("noise reaches sigma through matching and through the relation head") {
  const DetectorConfig cfg = toy_detector_config();
  Rng rng(5);
  const auto params = DetectorParams<double>::init(cfg, rng);
  const SigmaParams<double> sigma(SigmaVariant::ChannelWise, cfg.query_geometry());
  const Td target = rng_uniform<double>(rng, 0, 1, {1, 32, 32});
  const Td query = rng_uniform<double>(rng, 0, 1, {1, 16, 16});
  const Td eps = rng_normal<double>(rng, cfg.query_geometry().shape());
  const std::vector<Box> gt{{4, 4, 22, 20}};
  QueryNoise<double> noise{&sigma, &eps, nullptr};

  for (int detach_matching = 0; detach_matching < 2; ++detach_matching) {
    ForwardOptions o;
    o.detach_query_for_matching = detach_matching == 1;
    o.detach_query_for_relation = detach_matching == 0;
    Rng srng(1);
    const auto fwd = forward_train(params, cfg, query, target, gt, noise, srng, nullptr, o);
    const auto g = backward(fwd.loss);
    REQUIRE(g.contains(sigma.values()));
    double norm = 0;
    for (double v : g.at(sigma.values()).data()) norm += v * v;
    CHECK(norm > 0);
  }
}

TEST_CASE("checkpoint names and shape checks") {
  const DetectorConfig cfg;
  const auto p = init_params(cfg, 1);
  const auto ck = p.to_checkpoint();
  for (const auto& t : ck) {
    const bool known = t.name.starts_with("backbone/") || t.name.starts_with("rpn/") || t.name.starts_with("relation/");
    CHECK(known);
  }
  const auto back = DetectorParams<double>::from_checkpoint(cfg, ck);
  CHECK(back.to_checkpoint() == ck);

  auto bad = ck;
  bad[0].shape.back() += 1;
  bad[0].values.resize(numel(bad[0].shape));
  CHECK_THROWS_AS(DetectorParams<double>::from_checkpoint(cfg, bad), CheckpointError);

  const auto c = p.clone();
  Td w = c.backbone[0].weight;
  w.mutable_data()[0] += 1.0;
  CHECK(p.backbone[0].weight.data()[0] != c.backbone[0].weight.data()[0]);
}
