#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fixture_mutations.hpp"
#include "json.hpp"
#include "osfa/data.hpp"

using namespace osfa;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 3) {
  GeneratorConfig c;
  c.n_seen = 2;
  c.n_unseen = 1;
  c.train_pages = 6;
  c.test_pages = 10;
  c.seed = seed;
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("osfa_test_data_" + name);
  fs::remove_all(d);
  return d;
}

// Ten classes with identical occurrence counts on small pages.
Dataset balanced_dataset() {
  Dataset ds;
  for (int c = 0; c < 10; ++c) ds.classes.push_back({c, ClassSplit::Seen, std::nullopt, ""});
  for (std::size_t p = 0; p < 10; ++p) {
    Page page;
    page.id = "p" + std::to_string(p);
    page.width = page.height = 64;
    page.image = Image(64, 64, 200);
    for (int c = 0; c < 10; ++c) {
      if ((c + p) % 5 == 0) page.instances.push_back({c, {4.0 + c, 4, 20.0 + c, 20}, {}});
    }
    ds.train.push_back(page);
  }
  return ds;
}

}  // namespace

TEST_CASE("generator split contract") {
  const Dataset ds = generate_dataset(small_config());
  CHECK(ds.classes.size() == 3);
  CHECK(ds.class_ids(ClassSplit::Seen) == std::vector<int>{0, 1});
  CHECK(ds.class_ids(ClassSplit::Unseen) == std::vector<int>{2});
  for (const auto& p : ds.train)
    for (const auto& i : p.instances) CHECK(ds.class_info(i.class_id).split == ClassSplit::Seen);
  CHECK(ds.test.size() == 10);
  for (const auto& p : ds.test) {
    CHECK(p.instances.size() >= 1);
    CHECK(p.instances.size() <= 6);
    CHECK(p.width == 256);
    CHECK(p.image.width == 256);
  }
}

TEST_CASE("generator invariants") {
  GeneratorConfig cfg = small_config(11);
  cfg.test_pages = 20;
  const Dataset ds = generate_dataset(cfg);
  for (const auto* pages : {&ds.train, &ds.test}) {
    for (const auto& p : *pages) {
      for (std::size_t a = 0; a < p.instances.size(); ++a) {
        const auto& in = p.instances[a];
        CHECK(in.box.valid());
        CHECK(in.box.xmin >= 0);
        CHECK(in.box.ymin >= 0);
        CHECK(in.box.xmax <= 256);
        CHECK(in.box.ymax <= 256);
        CHECK(std::abs(in.pose.rotation_deg) <= 25.0);
        CHECK(in.pose.scale >= 0.6);
        CHECK(in.pose.scale <= 1.4);
        for (std::size_t b = a + 1; b < p.instances.size(); ++b) CHECK(iou(in.box, p.instances[b].box) <= 0.3);
      }
    }
  }
  const auto styles = [&] {
    std::vector<FaceStyle> s;
    for (const auto& c : ds.classes) s.push_back(*c.style);
    return s;
  }();
  for (std::size_t a = 0; a < styles.size(); ++a)
    for (std::size_t b = a + 1; b < styles.size(); ++b) CHECK(style_distance(styles[a], styles[b]) >= cfg.style_margin);
}

TEST_CASE("generator validation") {
  GeneratorConfig c;
  c.n_seen = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.n_unseen = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.min_instances = 7;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("infeasible layouts name the page") {
  GeneratorConfig c = small_config();
  c.page_size = 64;
  c.min_instances = 6;
  c.max_instances = 6;
  c.max_pair_iou = 0.0;
  try {
    generate_dataset(c);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("page ") != std::string::npos);
  }
}

TEST_CASE("same seed gives identical pages and files") {
  const Dataset a = generate_dataset(small_config(5));
  const Dataset b = generate_dataset(small_config(5));
  REQUIRE(a.test.size() == b.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    CHECK(a.test[i].image == b.test[i].image);
    CHECK(a.test[i].instances == b.test[i].instances);
  }
  const Dataset c = generate_dataset(small_config(6));
  CHECK(c.test[0].image != a.test[0].image);

  const fs::path d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  write_dataset(a, d1);
  write_dataset(b, d2);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(d1))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), d1));
  CHECK(files.size() == a.train.size() + a.test.size() + 3);
  for (const auto& f : files) CHECK(read_file(d1 / f) == read_file(d2 / f));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("zipf draws follow the rank-frequency law") {
  std::vector<int> ranked(20);
  for (int i = 0; i < 20; ++i) ranked[i] = 19 - i;
  const ZipfSampler z(ranked, 1.0);
  Rng rng(123);
  std::vector<int> draws;
  for (int i = 0; i < 10000; ++i) draws.push_back(z.draw(rng));
  const double slope = rank_frequency_slope(count_draws(draws));
  CHECK(slope >= -1.15);
  CHECK(slope <= -0.85);
  // the most frequent class is rank 1
  const auto counts = count_draws(draws);
  const auto top = std::max_element(counts.begin(), counts.end(),
                                    [](const auto& x, const auto& y) { return x.second < y.second; });
  CHECK(top->first == 19);

  const auto w = zipf_weights(3, 2.0);
  CHECK(w == std::vector<double>{1.0, 0.25, 1.0 / 9});
}

TEST_CASE("appearance counts") {
  const Dataset ds = generate_dataset(small_config(9));
  for (auto split : {PageSplit::Train, PageSplit::Test}) {
    const auto counts = appearance_counts(ds, split);
    std::map<int, std::size_t> recount;
    std::size_t total = 0, summed = 0;
    for (const auto& p : ds.pages(split)) {
      total += p.instances.size();
      for (const auto& i : p.instances) ++recount[i.class_id];
    }
    for (const auto& [c, n] : counts) summed += n;
    CHECK(summed == total);
    for (const auto& [c, n] : recount) CHECK(counts.at(c) == n);
  }
  CHECK(count_draws(ds.test_draws) == ds.stored_counts);
  const auto tc = appearance_counts(ds, PageSplit::Test);
  for (const auto& [c, n] : tc) {
    if (n > 0) CHECK(ds.stored_counts.at(c) == n);
  }
  Dataset empty;
  CHECK(appearance_counts(empty, PageSplit::Test).empty());
}

TEST_CASE("on-disk round trip and sidecar shape") {
  const Dataset ds = generate_dataset(small_config(4));
  const fs::path dir = scratch_dir("rt");
  write_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  CHECK(back.config.seed == ds.config.seed);
  REQUIRE(back.test.size() == ds.test.size());
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    CHECK(back.test[i].image == ds.test[i].image);
    CHECK(back.test[i].id == ds.test[i].id);
    REQUIRE(back.test[i].instances.size() == ds.test[i].instances.size());
    for (std::size_t k = 0; k < ds.test[i].instances.size(); ++k) {
      CHECK(back.test[i].instances[k].class_id == ds.test[i].instances[k].class_id);
      CHECK(back.test[i].instances[k].box == ds.test[i].instances[k].box);
    }
  }
  CHECK(back.stored_counts == ds.stored_counts);
  for (const auto& c : back.classes) CHECK(c.title.empty());

  // titles survive the sidecar when present
  Dataset titled = ds;
  for (auto& c : titled.classes) c.title = "book" + std::to_string(c.class_id);
  const fs::path tdir = scratch_dir("rt_title");
  write_dataset(titled, tdir);
  for (const auto& c : load_dataset(tdir).classes) CHECK(c.title == "book" + std::to_string(c.class_id));
  fs::remove_all(tdir);

  for (const char* split : {"train", "test"}) {
    const auto j = nlohmann::json::parse(read_file(dir / (std::string(split) + ".json")));
    REQUIRE(j.is_object());
    REQUIRE(j.at("pages").is_array());
    REQUIRE(j.at("classes").is_array());
    for (const auto& p : j["pages"]) {
      CHECK(p.at("id").is_string());
      CHECK(p.at("file").is_string());
      CHECK(fs::exists(dir / split / p["file"].get<std::string>()));
      for (const auto& in : p.at("instances")) {
        CHECK(in.at("class_id").is_number_integer());
        for (const char* k : {"xmin", "ymin", "xmax", "ymax"}) CHECK(in.at(k).is_number());
      }
    }
    for (const auto& c : j["classes"]) {
      CHECK(c.at("class_id").is_number_integer());
      const std::string s = c.at("split").get<std::string>();
      CHECK((s == "seen" || s == "unseen"));
    }
  }

  // an unseen class in the train sidecar is rejected
  auto j = nlohmann::json::parse(read_file(dir / "train.json"));
  j["pages"][0]["instances"][0]["class_id"] = 2;
  std::ofstream(dir / "train.json") << j.dump();
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST_CASE("manga109 fixture") {
  const AnnotationFragment f = parse_manga109_xml(osfa::testing::kFixturePath);
  CHECK(f.characters.size() == 2);
  CHECK(f.face_count() == 3);
  const Dataset ds = f.to_dataset();
  CHECK(ds.classes.size() == 2);
  std::size_t n = 0;
  for (const auto& p : ds.test) n += p.instances.size();
  CHECK(n == 3);
  CHECK(ds.test[0].width == 1654);
  CHECK(ds.test[0].instances[0].box == Box{120, 200, 260, 350});
  CHECK(ds.test[0].instances[1].class_id == 1);
  for (const auto& c : ds.classes) CHECK(c.title == f.title);

  CHECK(parse_manga109_xml_string(serialize_manga109_xml(f)) == f);
}

TEST_CASE("malformed fixtures are rejected with element paths") {
  const std::string base = [] {
    std::ifstream in(osfa::testing::kFixturePath);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }();
  for (const auto& m : osfa::testing::fixture_mutations()) {
    CAPTURE(m.name);
    const auto pos = base.find(m.from);
    REQUIRE(pos != std::string::npos);
    std::string xml = base;
    xml.replace(pos, m.from.size(), m.to);
    try {
      parse_manga109_xml_string(xml);
      FAIL("accepted: " << m.name);
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).rfind(m.path + ":", 0) == 0);
    }
  }
  CHECK_THROWS_AS(parse_manga109_xml_string("<book><characters>"), DataError);
}

TEST_CASE("frame, text and body elements are ignored") {
  const std::string xml = R"(<book title="t"><characters><character id="a" name="A"/></characters><pages>
    <page index="0" width="100" height="100">
      <frame id="x" xmin="0" ymin="0" xmax="50" ymax="50"/>
      <text id="y" xmin="1" ymin="1" xmax="9" ymax="9">hi</text>
      <face id="f" xmin="10" ymin="10" xmax="30" ymax="30" character="a"/>
      <body id="b" xmin="5" ymin="5" xmax="60" ymax="90" character="a"/>
    </page></pages></book>)";
  CHECK(parse_manga109_xml_string(xml).face_count() == 1);
}

TEST_CASE("episode sampling") {
  const Dataset ds = generate_dataset(small_config(2));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Episode e = sample_episode(ds, PageSplit::Train, rng, 32);
    CHECK(ds.class_info(e.class_id).split == ClassSplit::Seen);
    CHECK(e.query_patch.width == 32);
    CHECK(!e.gt.empty());
    const auto& page = ds.train[e.target_page];
    std::size_t of_class = 0;
    for (const auto& in : page.instances) of_class += in.class_id == e.class_id;
    CHECK(e.gt.size() == of_class);
  }

  const Dataset bal = balanced_dataset();
  const EpisodeSampler s(bal, PageSplit::Train, 16);
  std::map<int, int> freq;
  Rng r2(99);
  for (int i = 0; i < 10000; ++i) {
    const Episode e = s.sample(r2);
    ++freq[e.class_id];
    CHECK_FALSE(e.degenerate);
    CHECK(!(e.query == e.target));
  }
  for (const auto& [c, n] : freq) {
    CHECK(n >= 700);
    CHECK(n <= 1300);
  }
  CHECK(freq.size() == 10);
}

TEST_CASE("single-occurrence class yields a degenerate episode") {
  Dataset ds;
  ds.classes.push_back({0, ClassSplit::Seen, std::nullopt});
  Page p;
  p.id = "only";
  p.width = p.height = 32;
  p.image = Image(32, 32, 100);
  p.instances.push_back({0, {2, 2, 20, 20}, {}});
  ds.train.push_back(p);
  Rng rng(0);
  const Episode e = EpisodeSampler(ds, PageSplit::Train, 16).sample(rng);
  CHECK(e.degenerate);
  CHECK(e.query == e.target);
}

TEST_CASE("query pool") {
  const Dataset ds = generate_dataset(small_config(8));
  const auto a = query_pool(ds, PageSplit::Test, 4, 32);
  const auto b = query_pool(ds, PageSplit::Test, 4, 32);
  REQUIRE(a.size() == b.size());
  for (const auto& [c, q] : a) {
    CHECK(b.at(c).ref == q.ref);
    CHECK(b.at(c).patch == q.patch);
    CHECK(q.patch.width == 32);
    CHECK(ds.test[q.ref.page].instances[q.ref.instance].class_id == c);
  }
  std::set<int> present;
  for (const auto& p : ds.test)
    for (const auto& i : p.instances) present.insert(i.class_id);
  CHECK(a.size() == present.size());
}
