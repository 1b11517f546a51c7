// osfa: dataset generation, training, evaluation and reporting.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "osfa/checkpoint.hpp"
#include "osfa/data.hpp"
#include "osfa/engine.hpp"
#include "osfa/eval.hpp"
#include "osfa/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace osfa;

namespace {

// Bad user input; exits with 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::size_t> parse_thr(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (tok.empty() || pos != tok.size() || tok[0] == '-') throw UsageError("bad threshold '" + tok + "' in '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty threshold list");
  return out;
}

// Config file, then --set overrides, then explicit flags.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value config file");
    cmd->add_option("--set", sets, "override key=value (repeatable)");
  }

  TrainConfig resolve() const {
    TrainConfig cfg = file.empty() ? TrainConfig{} : load_train_config(file);
    for (const auto& s : sets) {
      const auto [k, v] = split_assignment(s);
      cfg.set(k, v);
    }
    return cfg;
  }
};

void ensure_empty_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

// ---------------------------------------------------------------------------

struct GenData {
  GeneratorConfig gen;
  std::string out;
  bool force = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen-data", "generate a synthetic long-tail dataset");
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--seed", gen.seed);
    c->add_option("--n-seen", gen.n_seen);
    c->add_option("--n-unseen", gen.n_unseen);
    c->add_option("--train-pages", gen.train_pages);
    c->add_option("--test-pages", gen.test_pages);
    c->add_option("--zipf-s", gen.zipf_s);
    c->add_option("--min-instances", gen.min_instances);
    c->add_option("--max-instances", gen.max_instances);
    c->add_option("--style-margin", gen.style_margin);
    c->add_flag("--force", force, "replace a non-empty output directory");
    c->callback([this] { run(); });
  }

  void run() {
    try {
      gen.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    ensure_empty_dir(out, force);
    const Dataset ds = generate_dataset(gen);
    write_dataset(ds, out);
    const auto counts = appearance_counts(ds, PageSplit::Test);
    std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test pages to " << out << "\n";
    std::cout << "class,split,train_count,test_count\n";
    const auto train_counts = appearance_counts(ds, PageSplit::Train);
    const auto count_of = [](const std::map<int, std::size_t>& m, int c) {
      const auto it = m.find(c);
      return it == m.end() ? std::size_t{0} : it->second;
    };
    for (const auto& c : ds.classes) {
      std::cout << c.class_id << "," << to_string(c.split) << "," << count_of(train_counts, c.class_id) << ","
                << count_of(counts, c.class_id) << "\n";
    }
    const auto nonzero = std::count_if(counts.begin(), counts.end(), [](const auto& kv) { return kv.second > 0; });
    if (nonzero >= 2) {
      std::cout << "test rank-frequency log-log slope: " << rank_frequency_slope(counts) << "\n";
    } else {
      std::cout << "test rank-frequency log-log slope: n/a (fewer than two classes appear)\n";
    }
  }
};

struct Train {
  ConfigFlags config;
  std::string data, out, variant;
  std::optional<std::size_t> epochs, episodes;
  std::optional<std::uint64_t> seed;
  bool force = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train one detector");
    c->add_option("--data", data, "dataset directory")->required();
    c->add_option("--out", out, "run directory")->required();
    c->add_option("--variant", variant, "none|fixed|single|channel|position|position_channel|gblur|solarize|rcrop");
    c->add_option("--epochs", epochs);
    c->add_option("--episodes", episodes, "episodes per epoch");
    c->add_option("--seed", seed, "sets the weight, noise and episode seeds");
    c->add_flag("--force", force);
    config.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    TrainConfig cfg = config.resolve();
    if (!variant.empty()) cfg.set("aug_variant", variant);
    if (epochs) cfg.epochs = *epochs;
    if (episodes) cfg.episodes_per_epoch = *episodes;
    if (seed) cfg.seed_weights = cfg.seed_noise = cfg.seed_episodes = *seed;
    cfg.validate();
    if (!fs::is_directory(data)) throw UsageError("dataset directory " + data + " does not exist");
    const Dataset ds = load_dataset(data);
    ensure_empty_dir(out, force);
    std::cout << cfg.to_text() << std::flush;
    TrainOptions options;
    options.out_dir = out;
    options.on_epoch = [&](std::size_t epoch, double loss) {
      std::cout << "epoch " << epoch << "/" << cfg.epochs << " loss " << loss << "\n" << std::flush;
    };
    train(cfg, ds, options);
    std::cout << (fs::path(out) / "run.json").string() << "\n";
  }
};

struct EvalThr {
  std::string thr, thr_seen, thr_unseen;

  void add(CLI::App* c) {
    c->add_option("--thr", thr, "thresholds for both blocks, e.g. 0,2,4");
    c->add_option("--thr-seen", thr_seen, "seen-class thresholds (default 0,80,160,320)");
    c->add_option("--thr-unseen", thr_unseen, "unseen-class thresholds (default 0,20,40,80,100)");
  }

  void apply(EvalOptions& o) const {
    if (!thr.empty()) o.thr_seen = o.thr_unseen = parse_thr(thr);
    if (!thr_seen.empty()) o.thr_seen = parse_thr(thr_seen);
    if (!thr_unseen.empty()) o.thr_unseen = parse_thr(thr_unseen);
  }
};

void write_detection_dump(const fs::path& path, const Dataset& ds, const DetectFn& detect, const EvalOptions& o) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "image_id,query_class,xmin,ymin,xmax,ymax,score\n";
  char buf[256];
  const auto pool = query_pool(ds, PageSplit::Test, o.query_seed, o.query_size);
  for (const auto& [cls, q] : pool) {
    for (std::size_t p = 0; p < ds.test.size(); ++p) {
      for (const auto& d : detect(cls, q.patch, p)) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", ds.test[p].id.c_str(), cls,
                      d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax, d.score);
        out << buf;
      }
    }
  }
}

struct Eval {
  std::string data, run_dir, out;
  EvalThr thr;
  bool oracle = false, exclude_query = false, per_title = false;
  std::uint64_t query_seed = 0;
  std::string dump;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "score a trained run on the test split");
    c->add_option("--data", data, "dataset directory")->required();
    c->add_option("--run", run_dir, "run directory with model.ckpt and config.txt");
    c->add_option("--out", out, "where eval.json and eval.csv go (default: the run directory)");
    c->add_option("--query-seed", query_seed);
    c->add_flag("--oracle-gt", oracle, "debug: emit the ground truth as detections");
    c->add_flag("--exclude-query", exclude_query, "ignore detections on the query instance itself");
    c->add_flag("--per-title", per_title, "average classes within each title, then over titles");
    c->add_option("--dump", dump, "write every detection to this CSV");
    thr.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    if (!oracle && run_dir.empty()) throw UsageError("--run is required unless --oracle-gt is given");
    if (out.empty()) out = run_dir;
    if (out.empty()) throw UsageError("--out is required with --oracle-gt and no --run");
    EvalOptions o;
    o.query_seed = query_seed;
    o.exclude_query_instance = exclude_query;
    o.average_over_titles = per_title;
    thr.apply(o);
    if (!fs::is_directory(data)) throw UsageError("dataset directory " + data + " does not exist");
    const Dataset ds = load_dataset(data);

    EvalResult result;
    std::string label = "Oracle";
    std::uint64_t seed = 0;
    if (oracle) {
      const DetectFn detect = oracle_detector(ds);
      result = evaluate_with(ds, detect, o);
      if (!dump.empty()) write_detection_dump(dump, ds, detect, o);
    } else {
      const fs::path ckpt = fs::path(run_dir) / "model.ckpt";
      if (!fs::exists(ckpt)) throw UsageError("missing checkpoint " + ckpt.string());
      const TrainConfig cfg = load_train_config(fs::path(run_dir) / "config.txt");
      const auto params = DetectorParams<float>::from_checkpoint(cfg.detector, load_checkpoint(ckpt));
      o.query_size = cfg.detector.query_size;
      result = evaluate(params, cfg.detector, ds, o);
      label = std::string(row_label(cfg.aug_variant));
      seed = cfg.seed_weights;
      if (!dump.empty()) {
        const DetectFn detect = [&](int cls, const Image& query, std::size_t page) {
          const auto q = encode_query<float>(params, cfg.detector, query, nullptr, AugMode::Infer, nullptr);
          return detect_encoded(params, cfg.detector, q, encode_target(params, ds.test[page].image), cls);
        };
        write_detection_dump(dump, ds, detect, o);
      }
    }
    fs::create_directories(out);
    write_text(fs::path(out) / "eval.json", result.to_json());
    if (!oracle && !fs::equivalent(out, run_dir)) {
      fs::copy_file(fs::path(run_dir) / "config.txt", fs::path(out) / "config.txt",
                    fs::copy_options::overwrite_existing);
    }
    const ReportTable table = report({{label, seed, result, (fs::path(out) / "eval.json").string()}});
    write_text(fs::path(out) / "eval.csv", render_csv(table));
    std::cout << render_text(table);
  }
};

// Label and seed of an eval.json, from the config.txt beside it.
LabeledResult load_labeled(const fs::path& eval_json) {
  LabeledResult r;
  r.source = eval_json.string();
  r.result = EvalResult::from_json(read_text(eval_json));
  const fs::path cfg_path = eval_json.parent_path() / "config.txt";
  if (fs::exists(cfg_path)) {
    const TrainConfig cfg = load_train_config(cfg_path);
    r.label = std::string(row_label(cfg.aug_variant));
    r.seed = cfg.seed_weights;
  } else {
    r.label = eval_json.parent_path().filename().string();
  }
  return r;
}

std::vector<fs::path> find_eval_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_regular_file(in)) {
      out.emplace_back(in);
    } else if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.is_regular_file() && e.path().filename() == "eval.json") out.push_back(e.path());
      }
    } else {
      throw UsageError("no such file or directory: " + in);
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw UsageError("no eval.json found");
  return out;
}

struct Report {
  std::vector<std::string> inputs;
  std::string format = "text", out;
  int precision = 3;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report", "aggregate eval results into comparison tables");
    c->add_option("inputs", inputs, "eval.json files or directories searched recursively")->required();
    c->add_option("--format", format)->check(CLI::IsMember({"text", "csv"}));
    c->add_option("--precision", precision);
    c->add_option("--out", out, "write here instead of stdout");
    c->callback([this] { run(); });
  }

  void run() {
    std::vector<LabeledResult> results;
    for (const auto& p : find_eval_files(inputs)) results.push_back(load_labeled(p));
    ReportTable table;
    try {
      table = report(results);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const std::string text = format == "csv" ? render_csv(table) : render_text(table, precision);
    if (out.empty()) {
      std::cout << text;
    } else {
      write_text(out, text);
    }
  }
};

struct RunMatrix {
  ConfigFlags config;
  std::string data, out, variants, seeds = "0,1,2,3,4";
  std::size_t jobs = 1;
  std::optional<std::size_t> epochs, episodes;
  EvalThr thr;
  bool force = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("run-matrix", "train and evaluate every variant x seed");
    c->add_option("--data", data)->required();
    c->add_option("--out", out)->required();
    c->add_option("--variants", variants, "comma list (default: all nine)");
    c->add_option("--seeds", seeds);
    c->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
    c->add_option("--epochs", epochs);
    c->add_option("--episodes", episodes);
    c->add_flag("--force", force);
    config.add(c);
    thr.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    TrainConfig base = config.resolve();
    if (epochs) base.epochs = *epochs;
    if (episodes) base.episodes_per_epoch = *episodes;
    base.validate();
    std::vector<AugVariant> vs;
    if (variants.empty()) {
      vs = all_aug_variants();
    } else {
      std::stringstream ss(variants);
      std::string tok;
      while (std::getline(ss, tok, ',')) vs.push_back(parse_aug_variant(tok));
    }
    std::vector<std::uint64_t> seed_list;
    for (auto s : parse_thr(seeds)) seed_list.push_back(s);
    EvalOptions o;
    thr.apply(o);
    o.query_size = base.detector.query_size;
    if (!fs::is_directory(data)) throw UsageError("dataset directory " + data + " does not exist");
    const Dataset ds = load_dataset(data);
    ensure_empty_dir(out, force);
    write_text(fs::path(out) / "config.txt", base.to_text());

    std::mutex io;
    const auto entries = run_matrix(vs, seed_list, ds, base, out, jobs, [&](MatrixEntry& e) {
      const auto params =
          DetectorParams<float>::from_checkpoint(base.detector, load_checkpoint(e.dir / "model.ckpt"));
      write_text(e.dir / "eval.json", evaluate(params, base.detector, ds, o).to_json());
      const std::lock_guard lock(io);
      std::cout << e.tag() << " done\n" << std::flush;
    });
    std::size_t failed = 0;
    for (const auto& e : entries) {
      if (!e.error.empty()) {
        ++failed;
        std::cerr << e.tag() << " failed: " << e.error << "\n";
      }
    }
    std::vector<LabeledResult> results;
    for (const auto& p : find_eval_files({out})) results.push_back(load_labeled(p));
    const ReportTable table = report(results);
    write_text(fs::path(out) / "report.txt", render_text(table));
    write_text(fs::path(out) / "report.csv", render_csv(table));
    std::cout << render_text(table);
    if (failed > 0) throw std::runtime_error(std::to_string(failed) + " run(s) failed");
  }
};

struct GradCheck {
  GradCheckOptions options;
  std::string corrupt;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gradcheck", "finite-difference checks of sigma and network gradients");
    c->add_option("--seed", options.seed);
    c->add_option("--per-group", options.per_group, "random scalars per parameter group")
        ->check(CLI::PositiveNumber);
    c->add_option("--corrupt", corrupt, "test hook: perturb the backward rule of this op");
    c->callback([this] { run(); });
  }

  void run() {
    if (!corrupt.empty()) debug::corrupt_backward(corrupt);
    bool ok = true;
    std::cout << "group,checked,max_rel_error,tolerance,status\n";
    for (const auto& r : check_all(options)) {
      ok = ok && r.passed();
      std::cout << r.group << "," << r.checked << "," << r.max_rel_error << "," << r.tolerance << ","
                << (r.passed() ? "pass" : "FAIL") << "\n";
    }
    if (!ok) throw std::runtime_error("gradient check failed");
  }
};

struct DumpSigma {
  std::string run_dir, ckpt;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("dump-sigma", "per-channel |sigma| as CSV");
    c->add_option("--run", run_dir, "run directory");
    c->add_option("--checkpoint", ckpt, "checkpoint file");
    c->callback([this] { run(); });
  }

  void run() {
    if (ckpt.empty() == run_dir.empty()) throw UsageError("give exactly one of --run and --checkpoint");
    const fs::path path = ckpt.empty() ? fs::path(run_dir) / "model.ckpt" : fs::path(ckpt);
    if (!fs::exists(path)) throw UsageError("missing checkpoint " + path.string());
    const auto tensors = load_checkpoint(path);
    const auto it = std::find_if(tensors.begin(), tensors.end(),
                                 [](const NamedTensor& t) { return t.name.starts_with("sigma/"); });
    if (it == tensors.end()) throw UsageError(path.string() + " holds no sigma tensor");
    const SigmaVariant v = parse_sigma_variant(std::string_view(it->name).substr(6));
    FeatureGeometry g{1, 1, 1};
    if (v == SigmaVariant::ChannelWise) g.channels = it->shape.at(0);
    if (v == SigmaVariant::PositionWise) g = {1, it->shape.at(0), it->shape.at(1)};
    if (v == SigmaVariant::PositionChannel) g = {it->shape.at(0), it->shape.at(1), it->shape.at(2)};
    const SigmaParams<double> sigma(v, g, std::vector<double>(it->values.begin(), it->values.end()));
    std::cout << "channel,abs_sigma\n";
    const auto abs = sigma.abs_per_channel();
    char buf[64];
    for (std::size_t i = 0; i < abs.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, abs[i]);
      std::cout << buf;
    }
  }
};

struct ParseAnnotations {
  std::string xml;
  bool round_trip = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("parse-annotations", "validate a Manga109-format XML file");
    c->add_option("xml", xml)->required();
    c->add_flag("--print", round_trip, "print the re-serialized XML");
    c->callback([this] { run(); });
  }

  void run() {
    if (!fs::exists(xml)) throw UsageError("no such file: " + xml);
    AnnotationFragment f;
    try {
      f = parse_manga109_xml(xml);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
    std::cout << "title: " << f.title << "\ncharacters: " << f.characters.size() << "\npages: " << f.pages.size()
              << "\nfaces: " << f.face_count() << "\n";
    for (const auto& c : f.characters) {
      std::size_t n = 0;
      for (const auto& p : f.pages) n += std::count_if(p.faces.begin(), p.faces.end(), [&](const AnnotatedFace& a) {
        return a.character == c.id;
      });
      std::cout << "  " << c.id << " " << c.name << ": " << n << "\n";
    }
    if (round_trip) std::cout << serialize_manga109_xml(f);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"one-shot face detection with learnable feature-space noise"};
  app.require_subcommand(1);
  GenData gen;
  Train tr;
  Eval ev;
  Report rep;
  RunMatrix mat;
  GradCheck gc;
  DumpSigma ds;
  ParseAnnotations pa;
  gen.add(app);
  tr.add(app);
  ev.add(app);
  rep.add(app);
  mat.add(app);
  gc.add(app);
  ds.add(app);
  pa.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
