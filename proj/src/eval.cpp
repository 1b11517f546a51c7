#include "osfa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace osfa {

using nlohmann::json;

namespace {

struct Ranked {
  double score;
  std::size_t image;
  Box box;
};

bool ranks_before(const Ranked& a, const Ranked& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image != b.image) return a.image < b.image;
  if (a.box.xmin != b.box.xmin) return a.box.xmin < b.box.xmin;
  if (a.box.ymin != b.box.ymin) return a.box.ymin < b.box.ymin;
  if (a.box.xmax != b.box.xmax) return a.box.xmax < b.box.xmax;
  return a.box.ymax < b.box.ymax;
}

}  // namespace

std::optional<double> ap50(const std::vector<ImageDetections>& images, double iou_threshold) {
  std::size_t n_gt = 0;
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < images.size(); ++i) {
    n_gt += images[i].gt.size();
    const auto& img = images[i];
    const auto hits = [&](const std::vector<Box>& boxes, const Box& box) {
      return std::any_of(boxes.begin(), boxes.end(), [&](const Box& b) { return iou(box, b) >= iou_threshold; });
    };
    for (const auto& d : img.detections) {
      if (!hits(img.gt, d.box) && hits(img.ignore, d.box)) continue;
      ranked.push_back({d.score, i, d.box});
    }
  }
  if (n_gt == 0) {
    return ranked.empty() ? std::nullopt : std::optional<double>(0.0);
  }
  std::sort(ranked.begin(), ranked.end(), ranks_before);

  std::vector<std::vector<bool>> claimed(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) claimed[i].assign(images[i].gt.size(), false);

  // (recall, precision) at the end of every group of tied scores
  std::vector<double> rec, prec;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& img = images[r.image];
    double best = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < img.gt.size(); ++j) {
      const double v = iou(r.box, img.gt[j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      if (!claimed[r.image][best_j]) {
        claimed[r.image][best_j] = true;
        ++tp;
      } else {
        ++fp;
      }
    } else {
      ++fp;
    }
    const bool group_end = k + 1 == ranked.size() || ranked[k + 1].score != r.score;
    if (group_end && tp + fp > 0) {
      rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
      prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
  }

  // monotone envelope, then area under the step function
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    if (rec[i] != prev_r) {
      ap += (rec[i] - prev_r) * prec[i];
      prev_r = rec[i];
    }
  }
  return ap;
}

std::optional<double> ap50(const std::vector<ScoredBox>& detections, const std::vector<Box>& gt) {
  return ap50(std::vector<ImageDetections>{{detections, gt, {}}});
}

std::optional<double> thresholded_map(const std::map<int, double>& per_class_ap,
                                      const std::map<int, std::size_t>& counts, std::size_t thr) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [cls, ap] : per_class_ap) {
    const auto it = counts.find(cls);
    if (it == counts.end()) {
      throw std::invalid_argument("thresholded_map: no appearance count for class " + std::to_string(cls));
    }
    if (it->second >= thr) {
      sum += ap;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::optional<double> thresholded_map(const std::map<int, double>& per_class_ap,
                                      const std::map<int, std::size_t>& counts, std::size_t thr,
                                      const std::map<int, std::string>& groups) {
  std::map<std::string, std::map<int, double>> by_group;
  for (const auto& [cls, ap] : per_class_ap) {
    const auto g = groups.find(cls);
    by_group[g == groups.end() ? std::string() : g->second][cls] = ap;
  }
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [_, aps] : by_group) {
    if (const auto m = thresholded_map(aps, counts, thr)) {
      sum += *m;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

BlockResult score_block(const Dataset& ds, ClassSplit split, const std::map<int, QueryChoice>& pool,
                        const std::map<int, std::vector<std::vector<ScoredBox>>>& dets,
                        const std::vector<std::size_t>& thr, bool exclude_query, bool by_title) {
  BlockResult b;
  b.thr = thr;
  const auto counts = appearance_counts(ds, PageSplit::Test);
  for (const auto& [cls, per_page] : dets) {
    if (ds.class_info(cls).split != split) continue;
    std::vector<ImageDetections> images(ds.test.size());
    for (std::size_t p = 0; p < ds.test.size(); ++p) {
      images[p].detections = per_page[p];
      for (std::size_t i = 0; i < ds.test[p].instances.size(); ++i) {
        const auto& inst = ds.test[p].instances[i];
        if (inst.class_id != cls) continue;
        const bool is_query = pool.at(cls).ref == InstanceRef{p, i};
        (exclude_query && is_query ? images[p].ignore : images[p].gt).push_back(inst.box);
      }
    }
    const auto ap = ap50(images);
    if (ap) {
      b.per_class_ap50[cls] = *ap;
      b.counts[cls] = counts.at(cls);
    }
  }
  std::map<int, std::string> titles;
  for (const auto& [cls, _] : b.per_class_ap50) titles[cls] = ds.class_info(cls).title;
  for (const auto t : thr) {
    b.thresholded.push_back(by_title ? thresholded_map(b.per_class_ap50, b.counts, t, titles)
                                     : thresholded_map(b.per_class_ap50, b.counts, t));
  }
  return b;
}

}  // namespace

EvalResult evaluate_with(const Dataset& dataset, const DetectFn& detect, const EvalOptions& options) {
  const auto pool = query_pool(dataset, PageSplit::Test, options.query_seed, options.query_size);
  std::map<int, std::vector<std::vector<ScoredBox>>> dets;
  for (const auto& [cls, choice] : pool) {
    auto& per_page = dets[cls];
    per_page.resize(dataset.test.size());
    for (std::size_t p = 0; p < dataset.test.size(); ++p) {
      for (const auto& d : detect(cls, choice.patch, p)) per_page[p].push_back({d.box, d.score});
    }
  }
  EvalResult r;
  r.seen = score_block(dataset, ClassSplit::Seen, pool, dets, options.thr_seen, options.exclude_query_instance,
                       options.average_over_titles);
  r.unseen = score_block(dataset, ClassSplit::Unseen, pool, dets, options.thr_unseen,
                         options.exclude_query_instance, options.average_over_titles);
  return r;
}

template <typename T>
EvalResult evaluate(const DetectorParams<T>& params, const DetectorConfig& cfg, const Dataset& dataset,
                    const EvalOptions& options) {
  std::vector<TargetEncoding<T>> targets;
  targets.reserve(dataset.test.size());
  for (const auto& page : dataset.test) targets.push_back(encode_target(params, page.image));
  int cached_class = -1;
  std::optional<QueryEncoding<T>> query;
  const DetectFn fn = [&](int cls, const Image& q, std::size_t page) {
    if (cls != cached_class || !query) {
      query = encode_query<T>(params, cfg, q, nullptr, AugMode::Infer, nullptr);
      cached_class = cls;
    }
    return detect_encoded(params, cfg, *query, targets[page], cls);
  };
  return evaluate_with(dataset, fn, options);
}

template EvalResult evaluate<float>(const DetectorParams<float>&, const DetectorConfig&, const Dataset&,
                                    const EvalOptions&);
template EvalResult evaluate<double>(const DetectorParams<double>&, const DetectorConfig&, const Dataset&,
                                     const EvalOptions&);

DetectFn oracle_detector(const Dataset& dataset) {
  return [&dataset](int cls, const Image&, std::size_t page) {
    std::vector<Detection> out;
    for (const auto& inst : dataset.test.at(page).instances) {
      if (inst.class_id == cls) out.push_back({inst.box, 1.0, cls});
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json block_json(const BlockResult& b) {
  json ap = json::object(), counts = json::object(), th = json::array();
  for (const auto& [c, v] : b.per_class_ap50) ap[std::to_string(c)] = v;
  for (const auto& [c, v] : b.counts) counts[std::to_string(c)] = v;
  for (const auto& v : b.thresholded) th.push_back(v ? json(*v) : json(nullptr));
  return {{"per_class_ap50", ap}, {"counts", counts}, {"thr", b.thr}, {"thresholded", th}};
}

BlockResult block_from(const json& j) {
  BlockResult b;
  for (const auto& [k, v] : j.at("per_class_ap50").items()) b.per_class_ap50[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("counts").items()) b.counts[std::stoi(k)] = v.get<std::size_t>();
  b.thr = j.at("thr").get<std::vector<std::size_t>>();
  for (const auto& v : j.at("thresholded")) {
    b.thresholded.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  if (b.thresholded.size() != b.thr.size()) throw std::invalid_argument("thresholded and thr lengths differ");
  return b;
}

}  // namespace

std::string EvalResult::to_json() const {
  return json{{"seen", block_json(seen)}, {"unseen", block_json(unseen)}}.dump(1) + "\n";
}

EvalResult EvalResult::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    return {block_from(j.at("seen")), block_from(j.at("unseen"))};
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed eval result: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

const std::vector<std::string>& canonical_rows() {
  static const std::vector<std::string> rows = {"Default", "+Ours",          "+Gblur",         "+Solarize",
                                                "+Rcrop",  "+Fixed",         "+Single",        "+Channel-wise",
                                                "+Position-wise", "+Position-Channel"};
  return rows;
}

namespace {

std::vector<ReportCell> aggregate(const std::vector<const BlockResult*>& blocks) {
  const std::size_t n_thr = blocks.front()->thr.size();
  std::vector<ReportCell> cells(n_thr);
  for (std::size_t t = 0; t < n_thr; ++t) {
    std::vector<double> v;
    for (const auto* b : blocks) {
      if (b->thresholded[t]) v.push_back(*b->thresholded[t]);
    }
    ReportCell& c = cells[t];
    c.n_seeds = v.size();
    if (v.empty()) continue;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    c.mean = mean;
    if (v.size() > 1) {
      double ss = 0;
      for (const double x : v) ss += (x - mean) * (x - mean);
      c.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
  }
  return cells;
}

std::string fmt(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string cell_text(const ReportCell& c, int precision) {
  if (!c.mean) return kEmptyBucket;
  return fmt(*c.mean, precision) + "\xC2\xB1" + fmt(c.std, precision);
}

// Display width in code points (the marker and the plus-minus sign are multibyte).
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (const unsigned char ch : s) n += (ch & 0xC0) != 0x80;
  return n;
}

std::string pad(const std::string& s, std::size_t w) {
  const std::size_t d = display_width(s);
  return d >= w ? s : s + std::string(w - d, ' ');
}

void render_block_table(std::ostringstream& out, const ReportTable& t, const std::string& title,
                        const std::vector<std::pair<std::string, std::string>>& rows, int precision) {
  std::vector<std::pair<std::string, std::string>> present;
  for (const auto& r : rows) {
    if (t.seen.count(r.second)) present.push_back(r);
  }
  if (present.empty()) return;
  const std::size_t label_w = 20, cell_w = static_cast<std::size_t>(precision) * 2 + 6;
  out << title << "\n";
  std::string head = pad("", label_w) + pad("seen", cell_w * t.thr_seen.size()) + "| unseen";
  out << head << "\n";
  std::string thr = pad("thr", label_w);
  for (const auto v : t.thr_seen) thr += pad(std::to_string(v), cell_w);
  thr += "| ";
  for (const auto v : t.thr_unseen) thr += pad(std::to_string(v), cell_w);
  out << thr << "\n";
  for (const auto& [shown, key] : present) {
    std::string line = pad(shown, label_w);
    for (const auto& c : t.seen.at(key)) line += pad(cell_text(c, precision), cell_w);
    line += "| ";
    for (const auto& c : t.unseen.at(key)) line += pad(cell_text(c, precision), cell_w);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << "\n";
  }
  out << "\n";
}

std::string csv_number(const std::optional<double>& v) {
  if (!v) return kEmptyBucket;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

}  // namespace

ReportTable report(const std::vector<LabeledResult>& results) {
  if (results.empty()) throw std::invalid_argument("report needs at least one result");
  const auto& first = results.front();
  for (const auto& r : results) {
    if (r.result.seen.thr != first.result.seen.thr || r.result.unseen.thr != first.result.unseen.thr) {
      throw std::invalid_argument("thr lists differ between '" + first.source + "' and '" + r.source + "'");
    }
    if (r.result.seen.thresholded.size() != r.result.seen.thr.size() ||
        r.result.unseen.thresholded.size() != r.result.unseen.thr.size()) {
      throw std::invalid_argument("'" + r.source + "': thresholded values do not match its thr list");
    }
  }
  ReportTable t;
  t.thr_seen = first.result.seen.thr;
  t.thr_unseen = first.result.unseen.thr;
  std::vector<std::string> labels;
  for (const auto& r : results) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
  }
  for (const auto& known : canonical_rows()) {
    if (std::find(labels.begin(), labels.end(), known) != labels.end()) t.rows.push_back(known);
  }
  for (const auto& l : labels) {
    if (std::find(t.rows.begin(), t.rows.end(), l) == t.rows.end()) t.rows.push_back(l);
  }
  for (const auto& label : t.rows) {
    std::vector<const BlockResult*> seen, unseen;
    for (const auto& r : results) {
      if (r.label != label) continue;
      seen.push_back(&r.result.seen);
      unseen.push_back(&r.result.unseen);
    }
    t.seen[label] = aggregate(seen);
    t.unseen[label] = aggregate(unseen);
  }
  return t;
}

std::string render_text(const ReportTable& t, int precision) {
  std::ostringstream out;
  render_block_table(out, t, "AP50 by augmentation (mean\xC2\xB1std over seeds)",
                     {{"Default", "Default"}, {"+Ours", "+Ours"}, {"+Gblur", "+Gblur"}, {"+Solarize", "+Solarize"},
                      {"+Rcrop", "+Rcrop"}},
                     precision);
  const std::string channel_key = t.seen.count("+Channel-wise") ? "+Channel-wise" : "+Ours";
  render_block_table(out, t, "AP50 by learnable variance (mean\xC2\xB1std over seeds)",
                     {{"Default", "Default"}, {"+Fixed", "+Fixed"}, {"+Single", "+Single"},
                      {"+Channel-wise", channel_key}, {"+Position-wise", "+Position-wise"},
                      {"+Position-Channel", "+Position-Channel"}},
                     precision);
  std::vector<std::pair<std::string, std::string>> others;
  for (const auto& r : t.rows) {
    if (std::find(canonical_rows().begin(), canonical_rows().end(), r) == canonical_rows().end()) {
      others.emplace_back(r, r);
    }
  }
  render_block_table(out, t, "AP50, other rows", others, precision);
  return out.str();
}

std::string render_csv(const ReportTable& t) {
  std::ostringstream out;
  out << "block,variant,thr,mean_ap50,std_ap50,n_seeds\n";
  for (const auto& [block, thr, cells] :
       {std::tuple{"seen", &t.thr_seen, &t.seen}, std::tuple{"unseen", &t.thr_unseen, &t.unseen}}) {
    for (const auto& label : t.rows) {
      const auto& row = cells->at(label);
      for (std::size_t i = 0; i < thr->size(); ++i) {
        const auto& c = row[i];
        out << block << "," << label << "," << (*thr)[i] << "," << csv_number(c.mean) << ","
            << (c.mean ? csv_number(c.std) : std::string(kEmptyBucket)) << "," << c.n_seeds << "\n";
      }
    }
  }
  return out.str();
}

ReportTable parse_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "block,variant,thr,mean_ap50,std_ap50,n_seeds") {
    throw std::invalid_argument("report CSV: unexpected header");
  }
  ReportTable t;
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 6) throw std::invalid_argument("report CSV line " + std::to_string(n) + ": expected 6 fields");
    const bool seen = f[0] == "seen";
    if (!seen && f[0] != "unseen") throw std::invalid_argument("report CSV line " + std::to_string(n) + ": bad block");
    ReportCell c;
    try {
      if (f[3] != kEmptyBucket) {
        c.mean = std::stod(f[3]);
        c.std = std::stod(f[4]);
      }
      c.n_seeds = std::stoul(f[5]);
      const std::size_t thr = std::stoul(f[2]);
      auto& thr_list = seen ? t.thr_seen : t.thr_unseen;
      auto& row = (seen ? t.seen : t.unseen)[f[1]];
      if (row.size() == thr_list.size()) thr_list.push_back(thr);
      row.push_back(c);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("report CSV line " + std::to_string(n) + ": bad number");
    }
    if (std::find(t.rows.begin(), t.rows.end(), f[1]) == t.rows.end()) t.rows.push_back(f[1]);
  }
  return t;
}

}  // namespace osfa
