#pragma once

// Synthetic manga pages with a long-tailed cast, Manga109-style annotation
// ingestion, and episode sampling.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osfa/box.hpp"
#include "osfa/gaussaug.hpp"
#include "osfa/image.hpp"
#include "osfa/rng.hpp"

namespace osfa {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ClassSplit { Seen, Unseen };
enum class PageSplit { Train, Test };

std::string_view to_string(ClassSplit s);
std::string_view to_string(PageSplit s);
ClassSplit parse_class_split(std::string_view s);
PageSplit parse_page_split(std::string_view s);

/// Procedural face parameters. Discrete fields pick a drawing primitive;
/// continuous ones are in face-local units (head radius ~ 1).
struct FaceStyle {
  double head_aspect = 1.0;   // height / width, [0.8, 1.25]
  double eye_spacing = 0.3;   // [0.22, 0.40]
  double eye_size = 0.12;     // [0.09, 0.16]
  int eye_shape = 0;          // 0 dot, 1 ring + pupil, 2 closed arc, 3 tall with highlight
  double mouth_curve = 0.0;   // [-0.12, 0.12], positive smiles
  int hair_shape = 0;         // 0 straight bangs, 1 spikes, 2 side part, 3 wavy
  int hair_fill = 0;          // 0 outline, 1 hatched, 2 solid
  double line_weight = 0.07;  // [0.05, 0.10]

  /// Normalized coordinates used for the distinctness margin.
  std::array<double, 8> embedding() const;
  bool operator==(const FaceStyle&) const = default;
};

double style_distance(const FaceStyle& a, const FaceStyle& b);

struct CharacterClass {
  int class_id = 0;
  ClassSplit split = ClassSplit::Seen;
  std::optional<FaceStyle> style;  // absent for loaded or parsed data
  std::string title;               // source book for parsed annotations, empty otherwise
  bool operator==(const CharacterClass&) const = default;
};

struct Pose {
  double rotation_deg = 0;
  double scale = 1;
  std::array<double, 3> expression{};  // eye openness, mouth bend, brow tilt; each in [-1, 1]
  bool operator==(const Pose&) const = default;
};

struct Instance {
  int class_id = 0;
  Box box;
  Pose pose;
  bool operator==(const Instance&) const = default;
};

struct Page {
  std::string id;
  std::string file;  // relative to the split directory
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Instance> instances;
  Image image;  // empty for annotation-only pages
};

struct GeneratorConfig {
  int n_seen = 20;
  int n_unseen = 10;
  std::size_t train_pages = 200;
  std::size_t test_pages = 100;
  double zipf_s = 1.0;
  std::uint64_t seed = 0;
  std::size_t page_size = 256;
  std::size_t min_instances = 1;
  std::size_t max_instances = 6;
  double rotation_deg = 25.0;
  double scale_lo = 0.6;
  double scale_hi = 1.4;
  double face_size = 32.0;  // nominal head diameter in pixels at scale 1
  double max_pair_iou = 0.3;
  double style_margin = 0.3;

  void validate() const;
};

struct Dataset {
  GeneratorConfig config;
  std::vector<CharacterClass> classes;
  std::vector<Page> train;
  std::vector<Page> test;
  /// Class of every instance placed, in generation order, per split.
  std::vector<int> train_draws;
  std::vector<int> test_draws;
  /// Stored test-split appearance counts.
  std::map<int, std::size_t> stored_counts;

  const std::vector<Page>& pages(PageSplit s) const { return s == PageSplit::Train ? train : test; }
  const CharacterClass& class_info(int class_id) const;
  std::vector<int> class_ids(ClassSplit s) const;
};

/// Unnormalized Zipf weights 1/r^s for ranks 1..n.
std::vector<double> zipf_weights(std::size_t n, double s);

/// Draws class ids with probability proportional to 1/rank^s; ranked[0] is rank 1.
class ZipfSampler {
 public:
  ZipfSampler(std::vector<int> ranked, double s);
  int draw(Rng& rng) const;

 private:
  std::vector<int> ranked_;
  std::vector<double> cdf_;
};

/// Least-squares slope of log(frequency) on log(rank), frequencies sorted
/// descending, zero counts dropped.
double rank_frequency_slope(const std::map<int, std::size_t>& counts);

/// Draw `n` styles pairwise at least `margin` apart (style_distance).
std::vector<FaceStyle> draw_styles(std::size_t n, double margin, Rng& rng);

/// Rasterizes one face onto `page` (darkest ink wins) and returns its tight
/// ink bounding box, or std::nullopt if no pixel received ink.
std::optional<Box> draw_face(Image& page, const FaceStyle& style, const Pose& pose, double cx, double cy,
                             double face_size);

Dataset generate_dataset(const GeneratorConfig& config);

/// Per-class instance counts over the pages of a split.
std::map<int, std::size_t> appearance_counts(const Dataset& dataset, PageSplit split);
std::map<int, std::size_t> count_draws(const std::vector<int>& draws);

// ---------------------------------------------------------------------------
// On disk: <dir>/<split>/<page>.png, <dir>/<split>.json, <dir>/manifest.json

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
/// Reads pages, images and class registry. Throws DataError on malformed sidecars.
Dataset load_dataset(const std::filesystem::path& dir, bool load_images = true);

// ---------------------------------------------------------------------------
// Manga109-style XML

struct AnnotatedFace {
  std::string id;
  std::string character;
  Box box;
  bool operator==(const AnnotatedFace&) const = default;
};

struct AnnotatedPage {
  int index = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<AnnotatedFace> faces;
  bool operator==(const AnnotatedPage&) const = default;
};

struct AnnotatedCharacter {
  std::string id;
  std::string name;
  bool operator==(const AnnotatedCharacter&) const = default;
};

struct AnnotationFragment {
  std::string title;
  std::vector<AnnotatedCharacter> characters;
  std::vector<AnnotatedPage> pages;
  bool operator==(const AnnotationFragment&) const = default;

  std::size_t face_count() const;
  /// Class ids follow character order; faces become instances, pages keep geometry.
  Dataset to_dataset(PageSplit split = PageSplit::Test, ClassSplit class_split = ClassSplit::Seen) const;
};

/// Throws DataError whose message starts with the offending element path,
/// e.g. "book/pages/page[1]/face[0]: ...".
AnnotationFragment parse_manga109_xml(const std::filesystem::path& path);
AnnotationFragment parse_manga109_xml_string(const std::string& xml);
std::string serialize_manga109_xml(const AnnotationFragment& fragment);

// ---------------------------------------------------------------------------
// Episodes

enum class EpisodeSampling { ClassUniform, InstanceUniform };

struct InstanceRef {
  std::size_t page = 0;
  std::size_t instance = 0;
  bool operator==(const InstanceRef&) const = default;
};

struct Episode {
  int class_id = 0;
  InstanceRef query;
  InstanceRef target;
  Image query_patch;  // cropped gt instance resized to the query resolution
  std::size_t target_page = 0;
  std::vector<Box> gt;  // every box of class_id on the target page
  bool degenerate = false;  // query and target are the same occurrence
};

/// class -> occurrences in page order.
std::map<int, std::vector<InstanceRef>> occurrences(const std::vector<Page>& pages);

/// Crop the instance box and resize to size x size.
Image query_patch(const Page& page, const Instance& inst, std::size_t size);

class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& dataset, PageSplit split, std::size_t query_size,
                 EpisodeSampling mode = EpisodeSampling::ClassUniform);

  Episode sample(Rng& rng) const;
  const std::vector<int>& classes() const { return classes_; }

 private:
  const Dataset* dataset_;
  PageSplit split_;
  std::size_t query_size_;
  EpisodeSampling mode_;
  std::map<int, std::vector<InstanceRef>> occ_;
  std::vector<int> classes_;
  std::vector<std::pair<int, InstanceRef>> flat_;
};

Episode sample_episode(const Dataset& dataset, PageSplit split, Rng& rng, std::size_t query_size = 64);

struct QueryChoice {
  InstanceRef ref;
  Image patch;
};

/// One seeded reference instance per class present in the split.
std::map<int, QueryChoice> query_pool(const Dataset& dataset, PageSplit split, std::uint64_t seed,
                                      std::size_t query_size = 64);

}  // namespace osfa
