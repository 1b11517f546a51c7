#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "osfa/eval.hpp"

using namespace osfa;

namespace {

Box at(double x, double y, double s = 10) { return {x, y, x + s, y + s}; }

// Straightforward single-image AP: sort, greedy match, monotone envelope,
// sum over recall steps. Assumes distinct scores.
double reference_ap(std::vector<ScoredBox> dets, const std::vector<Box>& gt) {
  std::sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<bool> used(gt.size(), false);
  std::vector<double> prec, rec;
  double tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double o = iou(dets[i].box, gt[g]);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= 0.5 && !used[static_cast<std::size_t>(best)]) {
      used[static_cast<std::size_t>(best)] = true;
      tp += 1;
    }
    prec.push_back(tp / static_cast<double>(i + 1));
    rec.push_back(tp / static_cast<double>(gt.size()));
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, last_r = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - last_r) * prec[i];
    last_r = rec[i];
  }
  return ap;
}

BlockResult block(std::vector<std::size_t> thr, std::vector<std::optional<double>> v) {
  BlockResult b;
  b.thr = std::move(thr);
  b.thresholded = std::move(v);
  return b;
}

LabeledResult labeled(const std::string& label, std::uint64_t seed, std::optional<double> seen0,
                      std::optional<double> unseen0, const std::string& source) {
  LabeledResult r;
  r.label = label;
  r.seed = seed;
  r.source = source;
  r.result.seen = block({0, 80}, {seen0, std::nullopt});
  r.result.unseen = block({0}, {unseen0});
  return r;
}

}  // namespace

TEST_CASE("ap50 examples") {
  const Box g0 = at(0, 0), g1 = at(50, 50);
  CHECK(*ap50({{g0, 0.9}}, {g0}) == 1.0);
  CHECK(*ap50({}, {g0}) == 0.0);
  CHECK_FALSE(ap50({}, {}).has_value());
  CHECK(*ap50({{g0, 0.3}}, {}) == 0.0);

  // TP, FP, TP over two gt: 0.5 * 1 + 0.5 * 2/3
  const double ap = *ap50({{g0, 0.9}, {at(100, 100), 0.8}, {g1, 0.7}}, {g0, g1});
  CHECK(ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-14));

  // a duplicate on a claimed gt is a false positive
  CHECK(*ap50({{g0, 0.9}, {at(1, 0), 0.8}}, {g0}) == 1.0);
  CHECK(*ap50({{at(1, 0), 0.9}, {g0, 0.8}}, {g0, g1}) == doctest::Approx(0.5));
  // IoU just under the threshold does not match
  CHECK(*ap50({{at(0, 0, 10), 0.9}}, {{0, 0, 20.01, 10}}) == 0.0);
}

TEST_CASE("tied scores form one operating point") {
  const Box g = at(0, 0);
  const double a = *ap50({{g, 0.5}, {at(40, 40), 0.5}}, {g});
  const double b = *ap50({{at(40, 40), 0.5}, {g, 0.5}}, {g});
  CHECK(a == 0.5);
  CHECK(b == 0.5);
}

TEST_CASE("ap50 matches a reference implementation") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Box> gt;
    const std::size_t ng = 1 + rng.below(4);
    for (std::size_t i = 0; i < ng; ++i) gt.push_back(at(rng.uniform(0, 60), rng.uniform(0, 60), 12));
    std::vector<ScoredBox> dets;
    const std::size_t nd = rng.below(8);
    for (std::size_t i = 0; i < nd; ++i) {
      const Box& near = gt[rng.below(gt.size())];
      const double jx = rng.uniform(-6, 6), jy = rng.uniform(-6, 6);
      dets.push_back({at(near.xmin + jx, near.ymin + jy, 12), rng.uniform(0, 1)});
    }
    CAPTURE(trial);
    const double got = *ap50(dets, gt);
    CHECK(got == doctest::Approx(reference_ap(dets, gt)).epsilon(1e-12));
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
    // input order never matters
    std::reverse(dets.begin(), dets.end());
    CHECK(*ap50(dets, gt) == got);
  }
}

TEST_CASE("multi-image ap and ignore boxes") {
  const Box g = at(0, 0);
  std::vector<ImageDetections> imgs(2);
  imgs[0].gt = {g};
  imgs[0].detections = {{g, 0.9}};
  imgs[1].detections = {{g, 0.95}};
  CHECK(*ap50(imgs) == 0.5);
  imgs[1].ignore = {g};
  CHECK(*ap50(imgs) == 1.0);

  // only an ignored box and a detection on it: nothing to score
  std::vector<ImageDetections> lone(1);
  lone[0].ignore = {g};
  lone[0].detections = {{g, 0.9}};
  CHECK_FALSE(ap50(lone).has_value());
}

TEST_CASE("thresholded mean") {
  const std::map<int, double> ap{{0, 0.2}, {1, 0.6}, {2, 1.0}};
  const std::map<int, std::size_t> counts{{0, 10}, {1, 100}, {2, 100}};
  CHECK(*thresholded_map(ap, counts, 0) == doctest::Approx(0.6));
  CHECK(*thresholded_map(ap, counts, 100) == doctest::Approx(0.8));
  CHECK_FALSE(thresholded_map(ap, counts, 101).has_value());
  CHECK_THROWS_AS(thresholded_map(ap, {{0, 1}}, 0), std::invalid_argument);
}

TEST_CASE("threshold defaults") {
  CHECK(kSeenThresholds == std::vector<std::size_t>{0, 80, 160, 320});
  CHECK(kUnseenThresholds == std::vector<std::size_t>{0, 20, 40, 80, 100});
}

TEST_CASE("oracle detections score perfectly") {
  GeneratorConfig g;
  g.n_seen = 3;
  g.n_unseen = 2;
  g.train_pages = 4;
  g.test_pages = 12;
  g.seed = 2;
  const Dataset ds = generate_dataset(g);
  EvalOptions o;
  o.thr_seen = {0, 1000000};
  o.thr_unseen = {0};
  const EvalResult r = evaluate_with(ds, oracle_detector(ds), o);
  CHECK(*r.seen.thresholded[0] == 1.0);
  CHECK_FALSE(r.seen.thresholded[1].has_value());
  CHECK(*r.unseen.thresholded[0] == 1.0);
  CHECK(r.seen.counts == [&] {
    std::map<int, std::size_t> c;
    for (int id : ds.class_ids(ClassSplit::Seen)) c[id] = ds.stored_counts.at(id);
    return c;
  }());
  for (const auto& [c, v] : r.unseen.per_class_ap50) CHECK(v == 1.0);

  // no detections at all scores zero on every class with gt
  const EvalResult z = evaluate_with(ds, [](int, const Image&, std::size_t) { return std::vector<Detection>{}; }, o);
  CHECK(*z.seen.thresholded[0] == 0.0);

  // removing the query instance leaves a perfect oracle perfect
  o.exclude_query_instance = true;
  CHECK(*evaluate_with(ds, oracle_detector(ds), o).seen.thresholded[0] == 1.0);

  CHECK(EvalResult::from_json(r.to_json()) == r);
  CHECK_THROWS_AS(EvalResult::from_json("{\"seen\": 3}"), std::invalid_argument);
}

TEST_CASE("report aggregation") {
  const std::vector<LabeledResult> rs{labeled("+Ours", 0, 0.2, 0.1, "a.json"),
                                      labeled("+Ours", 1, 0.4, std::nullopt, "b.json"),
                                      labeled("Default", 0, 0.3, 0.05, "c.json")};
  const ReportTable t = report(rs);
  CHECK(t.rows == std::vector<std::string>{"Default", "+Ours"});
  const ReportCell& c = t.seen.at("+Ours")[0];
  CHECK(*c.mean == doctest::Approx(0.3));
  CHECK(c.std == doctest::Approx(std::sqrt(0.02)).epsilon(1e-12));
  CHECK(c.n_seeds == 2);
  CHECK_FALSE(t.seen.at("+Ours")[1].mean.has_value());
  CHECK(t.unseen.at("+Ours")[0].n_seeds == 1);
  CHECK(t.unseen.at("+Ours")[0].std == 0.0);
  CHECK(t.seen.at("Default")[0].std == 0.0);

  const std::string text = render_text(t);
  CHECK(text.find(kEmptyBucket) != std::string::npos);
  CHECK(text.find("0.300") != std::string::npos);
  CHECK(text.find("+Channel-wise") != std::string::npos);

  const std::string csv = render_csv(t);
  CHECK(csv.rfind("block,variant,thr,mean_ap50,std_ap50,n_seeds\n", 0) == 0);
  CHECK(parse_csv(csv) == t);
  CHECK_THROWS_AS(parse_csv("a,b\n"), std::invalid_argument);

  auto bad = rs;
  bad[1].result.seen.thr = {0, 40};
  try {
    report(bad);
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("a.json") != std::string::npos);
    CHECK(msg.find("b.json") != std::string::npos);
  }
  CHECK_THROWS_AS(report({}), std::invalid_argument);
}

TEST_CASE("unknown labels follow the canonical rows") {
  const ReportTable t = report({labeled("custom", 0, 0.5, 0.5, "x"), labeled("+Rcrop", 0, 0.5, 0.5, "y")});
  CHECK(t.rows == std::vector<std::string>{"+Rcrop", "custom"});
  CHECK(render_text(t).find("custom") != std::string::npos);
}

TEST_CASE("per-title averaging") {
  const std::map<int, double> ap{{0, 1.0}, {1, 0.0}, {2, 0.0}};
  const std::map<int, std::size_t> counts{{0, 5}, {1, 5}, {2, 50}};
  const std::map<int, std::string> titles{{0, "a"}, {1, "b"}, {2, "b"}};
  CHECK(*thresholded_map(ap, counts, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(*thresholded_map(ap, counts, 0, titles) == doctest::Approx(0.5));
  // a title with no class over the threshold drops out entirely
  CHECK(*thresholded_map(ap, counts, 10, titles) == 0.0);
  CHECK_FALSE(thresholded_map(ap, counts, 100, titles).has_value());
  // one shared title is the pooled mean
  CHECK(*thresholded_map(ap, counts, 0, {}) == *thresholded_map(ap, counts, 0));

  GeneratorConfig g;
  g.n_seen = 3;
  g.n_unseen = 2;
  g.train_pages = 4;
  g.test_pages = 12;
  g.seed = 2;
  Dataset ds = generate_dataset(g);
  ds.classes[0].title = "a";
  ds.classes[1].title = "b";
  ds.classes[2].title = "b";
  const DetectFn oracle = oracle_detector(ds);
  const DetectFn only_zero = [&](int cls, const Image& q, std::size_t page) {
    return cls == 0 ? oracle(cls, q, page) : std::vector<Detection>{};
  };
  EvalOptions o;
  o.thr_seen = {0};
  o.thr_unseen = {0};
  const EvalResult pooled = evaluate_with(ds, only_zero, o);
  o.average_over_titles = true;
  const EvalResult titled = evaluate_with(ds, only_zero, o);
  CHECK(*pooled.seen.thresholded[0] == doctest::Approx(1.0 / 3.0));
  CHECK(*titled.seen.thresholded[0] == doctest::Approx(0.5));
  CHECK(titled.seen.per_class_ap50 == pooled.seen.per_class_ap50);
}
