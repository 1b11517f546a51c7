#include "osfa/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace osfa {

using nlohmann::json;

namespace {

struct VariantInfo {
  AugVariant variant;
  const char* name;
  const char* label;
};

constexpr VariantInfo kVariants[] = {
    {AugVariant::None, "none", "Default"},
    {AugVariant::Fixed, "fixed", "+Fixed"},
    {AugVariant::Single, "single", "+Single"},
    {AugVariant::Channel, "channel", "+Ours"},
    {AugVariant::Position, "position", "+Position-wise"},
    {AugVariant::PositionChannel, "position_channel", "+Position-Channel"},
    {AugVariant::Gblur, "gblur", "+Gblur"},
    {AugVariant::Solarize, "solarize", "+Solarize"},
    {AugVariant::Rcrop, "rcrop", "+Rcrop"},
};

const VariantInfo& info(AugVariant v) {
  for (const auto& i : kVariants) {
    if (i.variant == v) return i;
  }
  throw std::logic_error("unhandled AugVariant");
}

}  // namespace

std::string_view to_string(AugVariant v) { return info(v).name; }
std::string_view row_label(AugVariant v) { return info(v).label; }

AugVariant parse_aug_variant(std::string_view name) {
  for (const auto& i : kVariants) {
    if (name == i.name) return i.variant;
  }
  throw ConfigError("unknown aug_variant '" + std::string(name) +
                    "' (expected none, fixed, single, channel, position, position_channel, gblur, solarize, rcrop)");
}

std::optional<SigmaVariant> sigma_variant(AugVariant v) {
  switch (v) {
    case AugVariant::Fixed:
      return SigmaVariant::Fixed;
    case AugVariant::Single:
      return SigmaVariant::Single;
    case AugVariant::Channel:
      return SigmaVariant::ChannelWise;
    case AugVariant::Position:
      return SigmaVariant::PositionWise;
    case AugVariant::PositionChannel:
      return SigmaVariant::PositionChannel;
    default:
      return std::nullopt;
  }
}

const std::vector<AugVariant>& all_aug_variants() {
  static const std::vector<AugVariant> all = {AugVariant::None,     AugVariant::Fixed,    AugVariant::Single,
                                              AugVariant::Channel,  AugVariant::Position, AugVariant::PositionChannel,
                                              AugVariant::Gblur,    AugVariant::Solarize, AugVariant::Rcrop};
  return all;
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(x)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : TrainConfig{}.resolved()) out.push_back(k);
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "epochs") {
    epochs = parse_u64(key, v);
  } else if (key == "episodes_per_epoch") {
    episodes_per_epoch = parse_u64(key, v);
  } else if (key == "learning_rate") {
    learning_rate = parse_double(key, v);
  } else if (key == "optimizer") {
    if (v == "sgd") {
      optimizer = OptimizerKind::Sgd;
    } else if (v == "sgd_momentum") {
      optimizer = OptimizerKind::SgdMomentum;
    } else {
      throw ConfigError("optimizer: expected sgd or sgd_momentum, got '" + v + "'");
    }
  } else if (key == "momentum") {
    momentum = parse_double(key, v);
  } else if (key == "aug_variant") {
    aug_variant = parse_aug_variant(v);
  } else if (key == "seed_weights") {
    seed_weights = parse_u64(key, v);
  } else if (key == "seed_noise") {
    seed_noise = parse_u64(key, v);
  } else if (key == "seed_episodes") {
    seed_episodes = parse_u64(key, v);
  } else if (key == "dtype") {
    if (v == "float32") {
      dtype = Dtype::Float32;
    } else if (v == "float64") {
      dtype = Dtype::Float64;
    } else {
      throw ConfigError("dtype: expected float32 or float64, got '" + v + "'");
    }
  } else if (key == "clip_norm") {
    clip_norm = parse_double(key, v);
  } else if (key == "sigma_init") {
    sigma_init = parse_double(key, v);
  } else if (key == "sampling") {
    if (v == "class") {
      sampling = EpisodeSampling::ClassUniform;
    } else if (v == "instance") {
      sampling = EpisodeSampling::InstanceUniform;
    } else {
      throw ConfigError("sampling: expected class or instance, got '" + v + "'");
    }
  } else if (key == "rcrop_resize") {
    rcrop_resize = parse_u64(key, v);
  } else if (key == "flip_query") {
    flip_query = parse_bool(key, v);
  } else if (key == "flip_target") {
    flip_target = parse_bool(key, v);
  } else if (key == "gblur_variance_lo") {
    image_aug.gblur.variance_lo = parse_double(key, v);
  } else if (key == "gblur_variance_hi") {
    image_aug.gblur.variance_hi = parse_double(key, v);
  } else if (key == "solarize_probability") {
    image_aug.solarize.probability = parse_double(key, v);
  } else if (key == "solarize_threshold") {
    image_aug.solarize.threshold = static_cast<int>(parse_u64(key, v));
  } else if (key == "query_size") {
    detector.query_size = parse_u64(key, v);
  } else if (key == "rpn_top_n") {
    detector.rpn_top_n = parse_u64(key, v);
  } else if (key == "sample_cap") {
    detector.sample_cap = parse_u64(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> TrainConfig::resolved() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"episodes_per_epoch", std::to_string(episodes_per_epoch)},
      {"learning_rate", fmt_double(learning_rate)},
      {"optimizer", optimizer == OptimizerKind::Sgd ? "sgd" : "sgd_momentum"},
      {"momentum", fmt_double(momentum)},
      {"aug_variant", std::string(to_string(aug_variant))},
      {"seed_weights", std::to_string(seed_weights)},
      {"seed_noise", std::to_string(seed_noise)},
      {"seed_episodes", std::to_string(seed_episodes)},
      {"dtype", dtype == Dtype::Float32 ? "float32" : "float64"},
      {"clip_norm", fmt_double(clip_norm)},
      {"sigma_init", fmt_double(sigma_init)},
      {"sampling", sampling == EpisodeSampling::ClassUniform ? "class" : "instance"},
      {"rcrop_resize", std::to_string(rcrop_resize)},
      {"flip_query", flip_query ? "true" : "false"},
      {"flip_target", flip_target ? "true" : "false"},
      {"gblur_variance_lo", fmt_double(image_aug.gblur.variance_lo)},
      {"gblur_variance_hi", fmt_double(image_aug.gblur.variance_hi)},
      {"solarize_probability", fmt_double(image_aug.solarize.probability)},
      {"solarize_threshold", std::to_string(image_aug.solarize.threshold)},
      {"query_size", std::to_string(detector.query_size)},
      {"rpn_top_n", std::to_string(detector.rpn_top_n)},
      {"sample_cap", std::to_string(detector.sample_cap)},
  };
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : resolved()) out += k + " = " + v + "\n";
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be >= 1");
  if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (rcrop_resize < image_aug.rcrop.width || rcrop_resize < image_aug.rcrop.height) {
    throw ConfigError("rcrop_resize must be >= the crop size");
  }
  if (!(image_aug.gblur.variance_lo > 0 && image_aug.gblur.variance_lo < image_aug.gblur.variance_hi)) {
    throw ConfigError("gblur variance range must satisfy 0 < lo < hi");
  }
  if (!(image_aug.solarize.probability >= 0 && image_aug.solarize.probability <= 1)) {
    throw ConfigError("solarize_probability must be in [0, 1]");
  }
  try {
    detector.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("detector: ") + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

std::pair<std::string, std::string> split_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + s + "'");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  try {
    for (const auto& [k, v] : parse_kv(ss.str())) cfg.set(k, v);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
void opt_step(const std::vector<Tensor<T>>& params, const std::vector<const Tensor<T>*>& grads, T lr,
              OptimizerState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("opt_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  const bool momentum = state.kind == OptimizerKind::SgdMomentum;
  if (momentum && state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.size(), T(0));
  }
  if (momentum && state.velocity.size() != params.size()) {
    throw ShapeError("opt_step: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i] != nullptr && grads[i]->shape() != params[i].shape()) {
      throw ShapeError("opt_step: gradient " + to_string(grads[i]->shape()) + " for parameter " +
                       to_string(params[i].shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i];
    auto pv = p.mutable_data();
    const T* g = grads[i] != nullptr ? grads[i]->data().data() : nullptr;
    if (!momentum) {
      if (g == nullptr) continue;
      for (std::size_t k = 0; k < pv.size(); ++k) pv[k] -= lr * g[k];
      continue;
    }
    auto& v = state.velocity[i];
    for (std::size_t k = 0; k < pv.size(); ++k) {
      v[k] = state.momentum * v[k] + (g != nullptr ? g[k] : T(0));
      pv[k] -= lr * v[k];
    }
  }
}

template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) {
    for (const T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads) {
      for (T& x : g.mutable_data()) x *= f;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

template <typename T>
TrainState<T> TrainState<T>::init(const TrainConfig& cfg) {
  cfg.validate();
  Rng weights(cfg.seed_weights);
  TrainState s{DetectorParams<T>::init(cfg.detector, weights), std::nullopt, {}};
  if (const auto sv = sigma_variant(cfg.aug_variant)) {
    s.sigma.emplace(*sv, cfg.detector.query_geometry(), static_cast<T>(cfg.sigma_init));
  }
  s.optimizer.kind = cfg.optimizer;
  s.optimizer.momentum = static_cast<T>(cfg.momentum);
  return s;
}

template <typename T>
std::vector<Tensor<T>> TrainState<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params.named()) out.push_back(p.tensor);
  if (sigma && sigma->trainable()) out.push_back(sigma->values());
  return out;
}

template <typename T>
std::vector<NamedTensor> TrainState<T>::to_checkpoint() const {
  auto out = params.to_checkpoint();
  if (sigma) out.push_back(to_named(sigma->checkpoint_name(), sigma->values()));
  return out;
}

template <typename T>
StepInput<T> step_input(const Dataset& dataset, const Episode& episode, const Image& query, bool flip_target) {
  const Page& page = dataset.train.at(episode.target_page);
  StepInput<T> in{to_tensor<T>(query), to_tensor<T>(flip_target ? hflip(page.image) : page.image), episode.gt, {}};
  for (const auto& inst : page.instances) {
    if (inst.class_id != episode.class_id) in.hard_negatives.push_back(inst.box);
  }
  if (flip_target) {
    const auto w = static_cast<double>(page.image.width);
    for (auto& b : in.gt) b = hflip(b, w);
    for (auto& b : in.hard_negatives) b = hflip(b, w);
  }
  return in;
}

template <typename T>
StepStats train_step(TrainState<T>& state, const TrainConfig& cfg, const StepInput<T>& input, Rng& noise_rng,
                     Rng& sample_rng) {
  QueryNoise<T> noise;
  if (state.sigma) {
    noise.sigma = &*state.sigma;
    noise.rng = &noise_rng;
  }
  ForwardOptions options;
  options.hard_negatives = input.hard_negatives;
  const TrainForward<T> fwd = forward_train(state.params, cfg.detector, input.query, input.target, input.gt, noise,
                                            sample_rng, nullptr, options);
  StepStats stats;
  stats.loss = static_cast<double>(fwd.loss.item());
  stats.rpn_loss = static_cast<double>(fwd.rpn_loss.item());
  stats.head_loss = static_cast<double>(fwd.head_loss.item());
  if (!std::isfinite(stats.loss)) throw NumericError("non-finite loss");
  const GradMap<T> grads = backward(fwd.loss);

  const std::vector<Tensor<T>> params = state.trainable();
  std::vector<Tensor<T>> g;
  g.reserve(params.size());
  for (const auto& p : params) {
    const Tensor<T>* found = grads.find(p);
    g.push_back(found != nullptr ? Tensor<T>(found->shape(), std::vector<T>(found->data().begin(), found->data().end()))
                                 : Tensor<T>::zeros(p.shape()));
  }
  stats.grad_norm = clip_global_norm(g, cfg.clip_norm);
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& t : g) ptrs.push_back(&t);
  opt_step(params, ptrs, static_cast<T>(cfg.learning_rate), state.optimizer);
  return stats;
}

EpisodeDraw draw_episode(const TrainConfig& cfg, const Dataset& dataset, const EpisodeSampler& sampler,
                         std::size_t global_index) {
  Rng episode_rng = Rng(cfg.seed_episodes).fork(global_index);
  const Rng noise_root = Rng(cfg.seed_noise).fork(global_index);
  EpisodeDraw d;
  d.episode = sampler.sample(episode_rng);
  d.sample_rng = episode_rng.fork(1);
  d.noise_rng = noise_root.fork(0);
  Rng aug = noise_root.fork(1);
  const std::size_t q = cfg.detector.query_size;
  switch (cfg.aug_variant) {
    case AugVariant::Gblur:
      d.query = gaussian_blur(d.episode.query_patch, aug, cfg.image_aug.gblur);
      break;
    case AugVariant::Solarize:
      d.query = solarize(d.episode.query_patch, aug, cfg.image_aug.solarize);
      break;
    case AugVariant::Rcrop: {
      const Page& page = dataset.train[d.episode.query.page];
      const Image big = query_patch(page, page.instances[d.episode.query.instance], cfg.rcrop_resize);
      const Image crop = random_crop(big, aug, cfg.image_aug.rcrop);
      d.query = crop.width == q && crop.height == q ? crop : resize_bilinear(crop, q, q);
      break;
    }
    default:
      d.query = d.episode.query_patch;
  }
  Rng flip = noise_root.fork(2);
  if (flip.bernoulli(0.5) && cfg.flip_query) d.query = hflip(d.query);
  d.flip_target = flip.bernoulli(0.5) && cfg.flip_target;
  return d;
}

namespace {

template <typename T>
SigmaSnapshot snapshot(const SigmaParams<T>& sigma, std::size_t epoch, double init) {
  SigmaSnapshot s;
  s.epoch = epoch;
  const auto v = sigma.values().data();
  s.min_abs = std::numeric_limits<double>::infinity();
  for (const T x : v) {
    const double a = std::abs(static_cast<double>(x));
    s.mean_abs += a;
    s.min_abs = std::min(s.min_abs, a);
    s.max_abs = std::max(s.max_abs, a);
    s.max_dev_from_init = std::max(s.max_dev_from_init, std::abs(static_cast<double>(x) - init));
  }
  s.mean_abs /= static_cast<double>(v.size());
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TrainError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string RunRecord::to_json() const {
  json cfg = json::object();
  for (const auto& [k, v] : config.resolved()) cfg[k] = v;
  json snaps = json::array();
  for (const auto& s : sigma_snapshots) {
    snaps.push_back({{"epoch", s.epoch},
                     {"mean_abs", s.mean_abs},
                     {"min_abs", s.min_abs},
                     {"max_abs", s.max_abs},
                     {"max_dev_from_init", s.max_dev_from_init}});
  }
  const json j = {{"config", cfg},
                  {"loss_curve", loss_curve},
                  {"sigma_snapshots", snaps},
                  {"final_abs_sigma", final_abs_sigma},
                  {"checkpoint", checkpoint}};
  return j.dump(1) + "\n";
}

template <typename T>
TrainResult<T> train_typed(const TrainConfig& cfg, const Dataset& dataset, const TrainOptions& options) {
  cfg.validate();
  for (const auto& page : dataset.train) {
    for (const auto& inst : page.instances) {
      if (dataset.class_info(inst.class_id).split != ClassSplit::Seen) {
        throw TrainError("train split contains unseen class " + std::to_string(inst.class_id) + " on page " + page.id);
      }
    }
  }
  const auto start = std::chrono::steady_clock::now();
  TrainResult<T> out{RunRecord{}, TrainState<T>::init(cfg)};
  auto& state = out.state;
  out.record.config = cfg;
  const EpisodeSampler sampler(dataset, PageSplit::Train, cfg.detector.query_size, cfg.sampling);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      const std::size_t g = epoch * cfg.episodes_per_epoch + e;
      EpisodeDraw d = draw_episode(cfg, dataset, sampler, g);
      const StepInput<T> input = step_input<T>(dataset, d.episode, d.query, d.flip_target);
      try {
        total += train_step(state, cfg, input, d.noise_rng, d.sample_rng).loss;
      } catch (const NumericError& err) {
        throw TrainError("non-finite value in epoch " + std::to_string(epoch) + " episode " + std::to_string(e) +
                         " (global " + std::to_string(g) + "), seeds weights=" + std::to_string(cfg.seed_weights) +
                         " noise=" + std::to_string(cfg.seed_noise) + " episodes=" +
                         std::to_string(cfg.seed_episodes) + ": " + err.what());
      }
    }
    const double mean = total / static_cast<double>(cfg.episodes_per_epoch);
    out.record.loss_curve.push_back(mean);
    if (state.sigma) out.record.sigma_snapshots.push_back(snapshot(*state.sigma, epoch + 1, cfg.sigma_init));
    if (options.on_epoch) options.on_epoch(epoch + 1, mean);
  }
  if (state.sigma) out.record.final_abs_sigma = state.sigma->abs_per_channel();

  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    out.record.checkpoint = "model.ckpt";
    save_checkpoint(options.out_dir / "model.ckpt", state.to_checkpoint());
    write_file(options.out_dir / "config.txt", cfg.to_text());
    write_file(options.out_dir / "run.json", out.record.to_json());
  }
  out.record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

RunRecord train(const TrainConfig& cfg, const Dataset& dataset, const TrainOptions& options) {
  if (cfg.dtype == Dtype::Float64) return train_typed<double>(cfg, dataset, options).record;
  return train_typed<float>(cfg, dataset, options).record;
}

// ---------------------------------------------------------------------------
// Matrix

std::string MatrixEntry::tag() const { return std::string(to_string(variant)) + "_seed" + std::to_string(seed); }

std::vector<MatrixEntry> run_matrix(const std::vector<AugVariant>& variants, const std::vector<std::uint64_t>& seeds,
                                    const Dataset& dataset, const TrainConfig& base,
                                    const std::filesystem::path& out_dir, std::size_t jobs,
                                    const std::function<void(MatrixEntry&)>& after_run) {
  if (variants.empty() || seeds.empty()) throw ConfigError("run_matrix needs at least one variant and one seed");
  std::vector<MatrixEntry> entries;
  for (const auto v : variants) {
    for (const auto s : seeds) {
      MatrixEntry e;
      e.variant = v;
      e.seed = s;
      if (!out_dir.empty()) e.dir = out_dir / e.tag();
      entries.push_back(std::move(e));
    }
  }
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      auto& e = entries[i];
      TrainConfig cfg = base;
      cfg.aug_variant = e.variant;
      cfg.seed_weights = cfg.seed_noise = cfg.seed_episodes = e.seed;
      try {
        e.record = train(cfg, dataset, {e.dir, {}});
        if (after_run) after_run(e);
      } catch (const std::exception& err) {
        e.error = err.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, entries.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return entries;
}

#define OSFA_INSTANTIATE(T)                                                                                    \
  template void opt_step<T>(const std::vector<Tensor<T>>&, const std::vector<const Tensor<T>*>&, T,           \
                            OptimizerState<T>&);                                                               \
  template double clip_global_norm<T>(std::vector<Tensor<T>>&, double);                                       \
  template struct TrainState<T>;                                                                               \
  template StepInput<T> step_input<T>(const Dataset&, const Episode&, const Image&, bool);                        \
  template StepStats train_step<T>(TrainState<T>&, const TrainConfig&, const StepInput<T>&, Rng&, Rng&);      \
  template TrainResult<T> train_typed<T>(const TrainConfig&, const Dataset&, const TrainOptions&);
OSFA_INSTANTIATE(float)
OSFA_INSTANTIATE(double)
#undef OSFA_INSTANTIATE

}  // namespace osfa
