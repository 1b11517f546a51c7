#include "osfa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

namespace osfa {

using nlohmann::json;

std::string_view to_string(ClassSplit s) { return s == ClassSplit::Seen ? "seen" : "unseen"; }
std::string_view to_string(PageSplit s) { return s == PageSplit::Train ? "train" : "test"; }

ClassSplit parse_class_split(std::string_view s) {
  if (s == "seen") return ClassSplit::Seen;
  if (s == "unseen") return ClassSplit::Unseen;
  throw DataError("unknown class split '" + std::string(s) + "'");
}

PageSplit parse_page_split(std::string_view s) {
  if (s == "train") return PageSplit::Train;
  if (s == "test") return PageSplit::Test;
  throw DataError("unknown page split '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Styles

std::array<double, 8> FaceStyle::embedding() const {
  return {(head_aspect - 0.8) / 0.45,
          (eye_spacing - 0.22) / 0.18,
          (eye_size - 0.09) / 0.07,
          eye_shape / 3.0 * 2.0,
          (mouth_curve + 0.12) / 0.24,
          hair_shape / 3.0 * 2.0,
          hair_fill / 2.0 * 2.0,
          (line_weight - 0.05) / 0.05};
}

double style_distance(const FaceStyle& a, const FaceStyle& b) {
  const auto ea = a.embedding(), eb = b.embedding();
  double acc = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) acc += (ea[i] - eb[i]) * (ea[i] - eb[i]);
  return std::sqrt(acc);
}

std::vector<FaceStyle> draw_styles(std::size_t n, double margin, Rng& rng) {
  std::vector<FaceStyle> out;
  constexpr int kMaxAttempts = 100000;
  for (int attempt = 0; out.size() < n; ++attempt) {
    if (attempt == kMaxAttempts) {
      throw DataError("cannot draw " + std::to_string(n) + " styles with margin " + std::to_string(margin));
    }
    FaceStyle s;
    s.head_aspect = rng.uniform(0.8, 1.25);
    s.eye_spacing = rng.uniform(0.22, 0.40);
    s.eye_size = rng.uniform(0.09, 0.16);
    s.eye_shape = static_cast<int>(rng.below(4));
    s.mouth_curve = rng.uniform(-0.12, 0.12);
    s.hair_shape = static_cast<int>(rng.below(4));
    s.hair_fill = static_cast<int>(rng.below(3));
    s.line_weight = rng.uniform(0.05, 0.10);
    const bool far = std::all_of(out.begin(), out.end(),
                                 [&](const FaceStyle& o) { return style_distance(o, s) >= margin; });
    if (far) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Face rasterizer. Face-local coordinates: u right, v down, head radius ~0.75.

namespace {

double band(double dist, double half_width) { return std::abs(dist) < half_width ? 1.0 : 0.0; }

double ellipse_dist(double u, double v, double rx, double ry) {
  const double e = std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
  return (e - 1.0) * std::min(rx, ry);
}

double hairline(const FaceStyle& s, double u, double ry) {
  switch (s.hair_shape) {
    case 0:
      return -0.25 * ry;
    case 1: {
      const double t = u * 5.0 - std::floor(u * 5.0);
      return -0.18 * ry - 0.22 * ry * std::abs(2.0 * t - 1.0);
    }
    case 2:
      return -0.45 * ry + 0.35 * ry * (u + 0.75) / 1.5;
    default:
      return -0.28 * ry + 0.09 * std::sin(u * 11.0);
  }
}

double face_ink(const FaceStyle& s, const Pose& pose, double u, double v) {
  const double lw = s.line_weight * 0.5;
  const double rx = 0.75, ry = std::min(0.95, 0.75 * s.head_aspect);
  double ink = 0;

  // hair: region above the hairline within an enlarged head ellipse
  const double hv = v + 0.06;
  const double outer = ellipse_dist(u, hv, rx * 1.14, ry * 1.12);
  const double line = hairline(s, u, ry);
  const bool in_hair = outer < 0 && v < line;
  if (in_hair) {
    if (s.hair_fill == 2) {
      ink = 1.0;
    } else if (s.hair_fill == 1 && std::sin((u + v) * 28.0) > 0.2) {
      ink = 1.0;
    }
  }
  if (outer < lw && outer > -lw && v < line + lw) ink = 1.0;
  if (band(v - line, lw) > 0 && outer < 0) ink = 1.0;

  // head outline below the hairline
  const double head = ellipse_dist(u, v, rx, ry);
  if (v >= line && band(head, lw) > 0) ink = 1.0;
  if (in_hair || head > lw) return ink;

  // eyes
  const double ey = 0.08 * ry;
  const double es = s.eye_size;
  const double open = 1.0 + 0.3 * pose.expression[0];
  for (const double side : {-1.0, 1.0}) {
    const double du = u - side * s.eye_spacing, dv = v - ey;
    switch (s.eye_shape) {
      case 0:
        if (ellipse_dist(du, dv, es * 0.8, es * 0.8 * open) < 0) ink = 1.0;
        break;
      case 1: {
        const double ring = ellipse_dist(du, dv, es, es * open);
        if (band(ring, lw * 0.8) > 0 || ellipse_dist(du, dv, es * 0.4, es * 0.4 * open) < 0) ink = 1.0;
        break;
      }
      case 2:
        if (std::abs(du) < es && band(dv + 0.6 * es * open * (1.0 - (du / es) * (du / es)), lw) > 0) ink = 1.0;
        break;
      default: {
        const bool body = ellipse_dist(du, dv, es * 0.8, es * 1.5 * open) < 0;
        const bool highlight = ellipse_dist(du + 0.3 * es, dv + 0.5 * es, es * 0.3, es * 0.3) < 0;
        if (body && !highlight) ink = 1.0;
        break;
      }
    }
    // brow
    const double by = ey - es * 1.9 * std::max(open, 0.8);
    const double tilt = 0.35 * pose.expression[2] * side;
    if (std::abs(du) < es * 1.1 && band(v - (by + tilt * du), lw * 0.8) > 0) ink = 1.0;
  }

  // mouth
  const double my = 0.5 * ry, mw = 0.2;
  const double curve = s.mouth_curve + 0.08 * pose.expression[1];
  if (std::abs(u) < mw && band(v - (my + curve * (1.0 - (u / mw) * (u / mw))), lw) > 0) ink = 1.0;
  return ink;
}

}  // namespace

std::optional<Box> draw_face(Image& page, const FaceStyle& style, const Pose& pose, double cx, double cy,
                             double face_size) {
  const double R = 0.5 * face_size * pose.scale / 0.75;  // pixels per face unit
  const double reach = 1.25 * R;
  const double th = pose.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const long x0 = std::max(0L, static_cast<long>(std::floor(cx - reach)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(cy - reach)));
  const long x1 = std::min(static_cast<long>(page.width), static_cast<long>(std::ceil(cx + reach)));
  const long y1 = std::min(static_cast<long>(page.height), static_cast<long>(std::ceil(cy + reach)));
  constexpr int kSub = 3;
  long bx0 = x1, by0 = y1, bx1 = x0 - 1, by1 = y0 - 1;
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x) {
      double acc = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub - cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub - cy;
          // rotate by -theta into the face frame
          const double u = (c * px + s * py) / R;
          const double v = (-s * px + c * py) / R;
          acc += face_ink(style, pose, u, v);
        }
      }
      const double ink = acc / (kSub * kSub);
      if (ink <= 0) continue;
      auto& p = page.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
      p = std::min<std::uint8_t>(p, static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - 0.95 * ink))));
      if (ink >= 0.3) {
        bx0 = std::min(bx0, x);
        by0 = std::min(by0, y);
        bx1 = std::max(bx1, x);
        by1 = std::max(by1, y);
      }
    }
  }
  if (bx1 < bx0) return std::nullopt;
  return Box{static_cast<double>(bx0), static_cast<double>(by0), static_cast<double>(bx1 + 1),
             static_cast<double>(by1 + 1)};
}

// ---------------------------------------------------------------------------
// Generation

void GeneratorConfig::validate() const {
  if (n_seen < 1) throw std::invalid_argument("n_seen must be >= 1, got " + std::to_string(n_seen));
  if (n_unseen < 1) throw std::invalid_argument("n_unseen must be >= 1, got " + std::to_string(n_unseen));
  if (train_pages < 1 || test_pages < 1) throw std::invalid_argument("page counts must be >= 1");
  if (!(zipf_s >= 0)) throw std::invalid_argument("zipf_s must be >= 0");
  if (min_instances < 1 || max_instances < min_instances) {
    throw std::invalid_argument("instances per page must satisfy 1 <= min <= max");
  }
  if (!(scale_lo > 0 && scale_lo <= scale_hi)) throw std::invalid_argument("invalid scale range");
  if (page_size < 2 * face_size) throw std::invalid_argument("page_size too small for the face size");
}

const CharacterClass& Dataset::class_info(int class_id) const {
  for (const auto& c : classes) {
    if (c.class_id == class_id) return c;
  }
  throw DataError("unknown class id " + std::to_string(class_id));
}

std::vector<int> Dataset::class_ids(ClassSplit s) const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.split == s) out.push_back(c.class_id);
  }
  return out;
}

std::vector<double> zipf_weights(std::size_t n, double s) {
  std::vector<double> w(n);
  for (std::size_t r = 0; r < n; ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), s);
  return w;
}

ZipfSampler::ZipfSampler(std::vector<int> ranked, double s) : ranked_(std::move(ranked)) {
  if (ranked_.empty()) throw std::invalid_argument("ZipfSampler needs at least one class");
  const auto w = zipf_weights(ranked_.size(), s);
  cdf_.resize(w.size());
  std::partial_sum(w.begin(), w.end(), cdf_.begin());
}

int ZipfSampler::draw(Rng& rng) const {
  const double u = rng.uniform() * cdf_.back();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return ranked_[std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), ranked_.size() - 1)];
}

double rank_frequency_slope(const std::map<int, std::size_t>& counts) {
  std::vector<double> f;
  for (const auto& [_, n] : counts) {
    if (n > 0) f.push_back(static_cast<double>(n));
  }
  if (f.size() < 2) throw std::invalid_argument("rank_frequency_slope needs at least two nonzero counts");
  std::sort(f.rbegin(), f.rend());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double x = std::log(static_cast<double>(i + 1)), y = std::log(f[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace {

void add_screentone(Image& img, Rng& rng) {
  for (auto& p : img.pixels) {
    p = static_cast<std::uint8_t>(255 - rng.below(6));
  }
  const std::size_t patches = rng.below(3);
  for (std::size_t k = 0; k < patches; ++k) {
    const std::size_t w = std::min(30 + rng.below(90), img.width - 1);
    const std::size_t h = std::min(30 + rng.below(90), img.height - 1);
    const std::size_t x0 = rng.below(img.width - w), y0 = rng.below(img.height - h);
    const std::size_t pitch = 4 + rng.below(3);
    for (std::size_t y = y0; y < y0 + h; ++y) {
      for (std::size_t x = x0; x < x0 + w; ++x) {
        if (x % pitch == 0 && y % pitch == 0) img.at(x, y) = 200;
      }
    }
  }
}

std::string page_id(PageSplit split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", std::string(to_string(split)).c_str(), index);
  return buf;
}

Page make_page(const GeneratorConfig& cfg, const std::vector<FaceStyle>& styles, const ZipfSampler& zipf,
               PageSplit split, std::size_t index, Rng rng) {
  constexpr int kPageAttempts = 50;
  constexpr int kPlacementAttempts = 60;
  const double S = static_cast<double>(cfg.page_size);
  for (int attempt = 0; attempt < kPageAttempts; ++attempt) {
    Page page;
    page.id = page_id(split, index);
    page.file = page.id + ".png";
    page.width = page.height = cfg.page_size;
    page.image = Image(cfg.page_size, cfg.page_size);
    add_screentone(page.image, rng);
    const std::size_t k = cfg.min_instances + rng.below(cfg.max_instances - cfg.min_instances + 1);
    bool ok = true;
    for (std::size_t i = 0; i < k && ok; ++i) {
      const int cls = zipf.draw(rng);
      ok = false;
      for (int t = 0; t < kPlacementAttempts && !ok; ++t) {
        Pose pose;
        pose.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
        pose.scale = cfg.scale_lo < cfg.scale_hi ? rng.uniform(cfg.scale_lo, cfg.scale_hi) : cfg.scale_lo;
        for (auto& e : pose.expression) e = rng.uniform(-1.0, 1.0);
        const double reach = 1.25 * 0.5 * cfg.face_size * pose.scale / 0.75 + 1;
        if (S - 2 * reach <= 0) continue;
        const double cx = rng.uniform(reach, S - reach), cy = rng.uniform(reach, S - reach);
        // dry run on a blank canvas to get the tight box before committing ink
        Image scratch(cfg.page_size, cfg.page_size);
        const auto box = draw_face(scratch, styles[static_cast<std::size_t>(cls)], pose, cx, cy, cfg.face_size);
        if (!box) continue;
        const bool clear = std::all_of(page.instances.begin(), page.instances.end(), [&](const Instance& o) {
          return iou(o.box, *box) <= cfg.max_pair_iou;
        });
        if (!clear) continue;
        draw_face(page.image, styles[static_cast<std::size_t>(cls)], pose, cx, cy, cfg.face_size);
        page.instances.push_back({cls, *box, pose});
        ok = true;
      }
    }
    if (ok) return page;
  }
  throw DataError("page " + page_id(split, index) + ": infeasible layout after " + std::to_string(kPageAttempts) +
                  " attempts");
}

}  // namespace

Dataset generate_dataset(const GeneratorConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  const Rng root(config.seed);
  Rng style_rng = root.fork(1);
  const auto n_classes = static_cast<std::size_t>(config.n_seen + config.n_unseen);
  const auto styles = draw_styles(n_classes, config.style_margin, style_rng);
  for (std::size_t c = 0; c < n_classes; ++c) {
    ds.classes.push_back({static_cast<int>(c),
                          static_cast<int>(c) < config.n_seen ? ClassSplit::Seen : ClassSplit::Unseen, styles[c], ""});
  }

  // frequency ranks: seen classes in id order for train; the test pool is a
  // seeded shuffle of seen and unseen together
  std::vector<int> train_pool = ds.class_ids(ClassSplit::Seen);
  std::vector<int> test_pool(n_classes);
  std::iota(test_pool.begin(), test_pool.end(), 0);
  Rng rank_rng = root.fork(2);
  for (std::size_t i = test_pool.size(); i > 1; --i) std::swap(test_pool[i - 1], test_pool[rank_rng.below(i)]);
  const ZipfSampler train_zipf(train_pool, config.zipf_s), test_zipf(test_pool, config.zipf_s);

  const Rng train_rng = root.fork(3), test_rng = root.fork(4);
  for (std::size_t i = 0; i < config.train_pages; ++i) {
    ds.train.push_back(make_page(config, styles, train_zipf, PageSplit::Train, i, train_rng.fork(i)));
    for (const auto& inst : ds.train.back().instances) ds.train_draws.push_back(inst.class_id);
  }
  for (std::size_t i = 0; i < config.test_pages; ++i) {
    ds.test.push_back(make_page(config, styles, test_zipf, PageSplit::Test, i, test_rng.fork(i)));
    for (const auto& inst : ds.test.back().instances) ds.test_draws.push_back(inst.class_id);
  }
  ds.stored_counts = count_draws(ds.test_draws);
  return ds;
}

std::map<int, std::size_t> appearance_counts(const Dataset& dataset, PageSplit split) {
  std::map<int, std::size_t> out;
  for (const auto& page : dataset.pages(split)) {
    for (const auto& inst : page.instances) ++out[inst.class_id];
  }
  return out;
}

std::map<int, std::size_t> count_draws(const std::vector<int>& draws) {
  std::map<int, std::size_t> out;
  for (const int c : draws) ++out[c];
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

json sidecar(const Dataset& ds, PageSplit split) {
  json pages = json::array();
  for (const auto& p : ds.pages(split)) {
    json inst = json::array();
    for (const auto& i : p.instances) {
      inst.push_back({{"class_id", i.class_id},
                      {"xmin", i.box.xmin},
                      {"ymin", i.box.ymin},
                      {"xmax", i.box.xmax},
                      {"ymax", i.box.ymax}});
    }
    pages.push_back({{"id", p.id}, {"file", p.file}, {"instances", inst}});
  }
  json classes = json::array();
  for (const auto& c : ds.classes) {
    json jc = {{"class_id", c.class_id}, {"split", to_string(c.split)}};
    if (!c.title.empty()) jc["title"] = c.title;
    classes.push_back(jc);
  }
  return {{"pages", pages}, {"classes", classes}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename V>
V field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw DataError(where + ": missing '" + key + "'");
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw DataError(where + ": '" + key + "' has the wrong type");
  }
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto split : {PageSplit::Train, PageSplit::Test}) {
    const auto sub = dir / std::string(to_string(split));
    std::filesystem::create_directories(sub);
    for (const auto& p : dataset.pages(split)) {
      if (!p.image.empty()) write_png(sub / p.file, p.image);
    }
    write_text(dir / (std::string(to_string(split)) + ".json"), sidecar(dataset, split).dump(1) + "\n");
  }
  const auto& c = dataset.config;
  json counts = json::object();
  for (const auto& [cls, n] : dataset.stored_counts) counts[std::to_string(cls)] = n;
  const json manifest = {{"generator",
                          {{"n_seen", c.n_seen},
                           {"n_unseen", c.n_unseen},
                           {"train_pages", c.train_pages},
                           {"test_pages", c.test_pages},
                           {"zipf_s", c.zipf_s},
                           {"seed", c.seed},
                           {"page_size", c.page_size}}},
                         {"test_appearance_counts", counts}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir, bool load_images) {
  Dataset ds;
  std::set<int> seen_ids;
  for (const auto split : {PageSplit::Train, PageSplit::Test}) {
    const std::string name(to_string(split));
    const auto path = dir / (name + ".json");
    const json j = read_json(path);
    const std::string where = path.string();
    const auto classes = field<json>(j, "classes", where);
    if (!classes.is_array()) throw DataError(where + ": 'classes' must be an array");
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const std::string cw = where + ": classes[" + std::to_string(k) + "]";
      const int id = field<int>(classes[k], "class_id", cw);
      const auto split_name = field<std::string>(classes[k], "split", cw);
      const std::string title = classes[k].contains("title") ? field<std::string>(classes[k], "title", cw) : "";
      if (seen_ids.insert(id).second) ds.classes.push_back({id, parse_class_split(split_name), std::nullopt, title});
    }
    const auto pages = field<json>(j, "pages", where);
    if (!pages.is_array()) throw DataError(where + ": 'pages' must be an array");
    auto& out = split == PageSplit::Train ? ds.train : ds.test;
    for (std::size_t k = 0; k < pages.size(); ++k) {
      const std::string pw = where + ": pages[" + std::to_string(k) + "]";
      Page p;
      p.id = field<std::string>(pages[k], "id", pw);
      p.file = field<std::string>(pages[k], "file", pw);
      const auto inst = field<json>(pages[k], "instances", pw);
      for (std::size_t m = 0; m < inst.size(); ++m) {
        const std::string iw = pw + ".instances[" + std::to_string(m) + "]";
        Instance i;
        i.class_id = field<int>(inst[m], "class_id", iw);
        i.box = {field<double>(inst[m], "xmin", iw), field<double>(inst[m], "ymin", iw),
                 field<double>(inst[m], "xmax", iw), field<double>(inst[m], "ymax", iw)};
        if (!i.box.valid()) throw DataError(iw + ": degenerate box " + to_string(i.box));
        p.instances.push_back(i);
      }
      if (load_images) {
        p.image = read_png(dir / name / p.file);
        p.width = p.image.width;
        p.height = p.image.height;
      }
      out.push_back(std::move(p));
    }
  }
  for (const auto& p : ds.train) {
    for (const auto& i : p.instances) {
      if (!seen_ids.count(i.class_id)) throw DataError("page " + p.id + ": unknown class " + std::to_string(i.class_id));
      if (ds.class_info(i.class_id).split != ClassSplit::Seen) {
        throw DataError("page " + p.id + ": unseen class " + std::to_string(i.class_id) + " in the train split");
      }
      ds.train_draws.push_back(i.class_id);
    }
  }
  for (const auto& p : ds.test) {
    for (const auto& i : p.instances) ds.test_draws.push_back(i.class_id);
  }
  const auto manifest_path = dir / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    const json m = read_json(manifest_path);
    if (m.contains("test_appearance_counts")) {
      for (const auto& [k, v] : m.at("test_appearance_counts").items()) ds.stored_counts[std::stoi(k)] = v.get<std::size_t>();
    }
    if (m.contains("generator")) {
      const auto& g = m.at("generator");
      ds.config.n_seen = g.value("n_seen", ds.config.n_seen);
      ds.config.n_unseen = g.value("n_unseen", ds.config.n_unseen);
      ds.config.train_pages = g.value("train_pages", ds.config.train_pages);
      ds.config.test_pages = g.value("test_pages", ds.config.test_pages);
      ds.config.zipf_s = g.value("zipf_s", ds.config.zipf_s);
      ds.config.seed = g.value("seed", ds.config.seed);
      ds.config.page_size = g.value("page_size", ds.config.page_size);
    }
  } else {
    ds.stored_counts = count_draws(ds.test_draws);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Manga109-style XML

namespace pt = boost::property_tree;

namespace {

const pt::ptree* child(const pt::ptree& node, const std::string& name) {
  const auto it = node.find(name);
  return it == node.not_found() ? nullptr : &it->second;
}

std::string attr(const pt::ptree& node, const std::string& name, const std::string& path) {
  const auto a = node.get_optional<std::string>("<xmlattr>." + name);
  if (!a) throw DataError(path + ": missing attribute '" + name + "'");
  return *a;
}

long int_attr(const pt::ptree& node, const std::string& name, const std::string& path) {
  const std::string s = attr(node, name, path);
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw DataError(path + ": attribute '" + name + "' is not an integer: '" + s + "'");
  return v;
}

AnnotationFragment parse_tree(const pt::ptree& tree) {
  const pt::ptree* book = child(tree, "book");
  if (!book) throw DataError("book: missing root element");
  AnnotationFragment frag;
  frag.title = book->get<std::string>("<xmlattr>.title", "");

  const pt::ptree* chars = child(*book, "characters");
  if (!chars) throw DataError("book/characters: missing element");
  std::set<std::string> ids;
  std::size_t ci = 0;
  for (const auto& [tag, node] : *chars) {
    if (tag != "character") continue;
    const std::string path = "book/characters/character[" + std::to_string(ci++) + "]";
    AnnotatedCharacter c{attr(node, "id", path), attr(node, "name", path)};
    if (!ids.insert(c.id).second) throw DataError(path + ": duplicate character id '" + c.id + "'");
    frag.characters.push_back(c);
  }

  const pt::ptree* pages = child(*book, "pages");
  if (!pages) throw DataError("book/pages: missing element");
  std::size_t pi = 0;
  for (const auto& [tag, node] : *pages) {
    if (tag != "page") continue;
    const std::string path = "book/pages/page[" + std::to_string(pi++) + "]";
    AnnotatedPage page;
    page.index = static_cast<int>(int_attr(node, "index", path));
    const long w = int_attr(node, "width", path), h = int_attr(node, "height", path);
    if (w <= 0 || h <= 0) throw DataError(path + ": page extent must be positive");
    page.width = static_cast<std::size_t>(w);
    page.height = static_cast<std::size_t>(h);
    std::size_t fi = 0;
    for (const auto& [ftag, fnode] : node) {
      if (ftag != "face") continue;  // frame, text and body elements are ignored
      const std::string fpath = path + "/face[" + std::to_string(fi++) + "]";
      AnnotatedFace f;
      f.id = attr(fnode, "id", fpath);
      f.character = attr(fnode, "character", fpath);
      if (!ids.count(f.character)) throw DataError(fpath + ": unknown character id '" + f.character + "'");
      const long x0 = int_attr(fnode, "xmin", fpath), y0 = int_attr(fnode, "ymin", fpath);
      const long x1 = int_attr(fnode, "xmax", fpath), y1 = int_attr(fnode, "ymax", fpath);
      if (x0 < 0 || y0 < 0) throw DataError(fpath + ": negative coordinate");
      if (x0 >= x1) throw DataError(fpath + ": xmin " + std::to_string(x0) + " >= xmax " + std::to_string(x1));
      if (y0 >= y1) throw DataError(fpath + ": ymin " + std::to_string(y0) + " >= ymax " + std::to_string(y1));
      if (x1 > w || y1 > h) throw DataError(fpath + ": box exceeds the page extent");
      f.box = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1), static_cast<double>(y1)};
      page.faces.push_back(f);
    }
    frag.pages.push_back(page);
  }
  return frag;
}

}  // namespace

AnnotationFragment parse_manga109_xml_string(const std::string& xml) {
  pt::ptree tree;
  std::istringstream in(xml);
  try {
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw DataError(std::string("malformed XML: ") + e.what());
  }
  return parse_tree(tree);
}

AnnotationFragment parse_manga109_xml(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manga109_xml_string(ss.str());
}

namespace {
std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string integral(double v) { return std::to_string(std::lround(v)); }
}  // namespace

std::string serialize_manga109_xml(const AnnotationFragment& f) {
  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"utf-8\"?>\n";
  out << "<book title=\"" << xml_escape(f.title) << "\">\n  <characters>\n";
  for (const auto& c : f.characters) {
    out << "    <character id=\"" << xml_escape(c.id) << "\" name=\"" << xml_escape(c.name) << "\"/>\n";
  }
  out << "  </characters>\n  <pages>\n";
  for (const auto& p : f.pages) {
    out << "    <page index=\"" << p.index << "\" width=\"" << p.width << "\" height=\"" << p.height << "\">\n";
    for (const auto& face : p.faces) {
      out << "      <face id=\"" << xml_escape(face.id) << "\" xmin=\"" << integral(face.box.xmin) << "\" ymin=\""
          << integral(face.box.ymin) << "\" xmax=\"" << integral(face.box.xmax) << "\" ymax=\""
          << integral(face.box.ymax) << "\" character=\"" << xml_escape(face.character) << "\"/>\n";
    }
    out << "    </page>\n";
  }
  out << "  </pages>\n</book>\n";
  return out.str();
}

std::size_t AnnotationFragment::face_count() const {
  std::size_t n = 0;
  for (const auto& p : pages) n += p.faces.size();
  return n;
}

Dataset AnnotationFragment::to_dataset(PageSplit split, ClassSplit class_split) const {
  Dataset ds;
  std::map<std::string, int> class_of;
  for (const auto& c : characters) {
    const int id = static_cast<int>(ds.classes.size());
    class_of[c.id] = id;
    ds.classes.push_back({id, class_split, std::nullopt, title});
  }
  auto& out = split == PageSplit::Train ? ds.train : ds.test;
  auto& draws = split == PageSplit::Train ? ds.train_draws : ds.test_draws;
  for (const auto& p : pages) {
    Page page;
    page.id = title + "_" + std::to_string(p.index);
    page.width = p.width;
    page.height = p.height;
    for (const auto& f : p.faces) {
      page.instances.push_back({class_of.at(f.character), f.box, {}});
      draws.push_back(class_of.at(f.character));
    }
    out.push_back(std::move(page));
  }
  ds.stored_counts = appearance_counts(ds, PageSplit::Test);
  return ds;
}

// ---------------------------------------------------------------------------
// Episodes

std::map<int, std::vector<InstanceRef>> occurrences(const std::vector<Page>& pages) {
  std::map<int, std::vector<InstanceRef>> out;
  for (std::size_t p = 0; p < pages.size(); ++p) {
    for (std::size_t i = 0; i < pages[p].instances.size(); ++i) {
      out[pages[p].instances[i].class_id].push_back({p, i});
    }
  }
  return out;
}

Image query_patch(const Page& page, const Instance& inst, std::size_t size) {
  if (page.image.empty()) throw DataError("page " + page.id + " has no image");
  const Image c = crop(page.image, inst.box);
  return resize_bilinear(c, size, size);
}

EpisodeSampler::EpisodeSampler(const Dataset& dataset, PageSplit split, std::size_t query_size,
                               EpisodeSampling mode)
    : dataset_(&dataset), split_(split), query_size_(query_size), mode_(mode), occ_(occurrences(dataset.pages(split))) {
  for (const auto& [cls, refs] : occ_) {
    if (split == PageSplit::Train && dataset.class_info(cls).split != ClassSplit::Seen) {
      throw DataError("class " + std::to_string(cls) + " is unseen but occurs in the train split");
    }
    classes_.push_back(cls);
    for (const auto& r : refs) flat_.emplace_back(cls, r);
  }
  if (classes_.empty()) throw DataError(std::string(to_string(split)) + " split has no instances");
}

Episode EpisodeSampler::sample(Rng& rng) const {
  Episode ep;
  if (mode_ == EpisodeSampling::ClassUniform) {
    ep.class_id = classes_[rng.below(classes_.size())];
  } else {
    ep.class_id = flat_[rng.below(flat_.size())].first;
  }
  const auto& refs = occ_.at(ep.class_id);
  ep.query = refs[rng.below(refs.size())];
  if (refs.size() >= 2) {
    std::size_t t = rng.below(refs.size() - 1);
    if (refs[t] == ep.query) t = refs.size() - 1;
    ep.target = refs[t];
  } else {
    ep.target = ep.query;
    ep.degenerate = true;
  }
  const auto& pages = dataset_->pages(split_);
  const Page& qp = pages[ep.query.page];
  ep.query_patch = query_patch(qp, qp.instances[ep.query.instance], query_size_);
  ep.target_page = ep.target.page;
  for (const auto& inst : pages[ep.target_page].instances) {
    if (inst.class_id == ep.class_id) ep.gt.push_back(inst.box);
  }
  return ep;
}

Episode sample_episode(const Dataset& dataset, PageSplit split, Rng& rng, std::size_t query_size) {
  return EpisodeSampler(dataset, split, query_size).sample(rng);
}

std::map<int, QueryChoice> query_pool(const Dataset& dataset, PageSplit split, std::uint64_t seed,
                                      std::size_t query_size) {
  const auto& pages = dataset.pages(split);
  std::map<int, QueryChoice> out;
  const Rng root(seed);
  for (const auto& [cls, refs] : occurrences(pages)) {
    Rng r = root.fork(static_cast<std::uint64_t>(cls));
    const InstanceRef ref = refs[r.below(refs.size())];
    const Page& p = pages[ref.page];
    out[cls] = {ref, query_patch(p, p.instances[ref.instance], query_size)};
  }
  return out;
}

}  // namespace osfa
