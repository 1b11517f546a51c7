#pragma once

// Episodic training: detector weights and noise scales share one SGD step.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "osfa/data.hpp"
#include "osfa/detector.hpp"
#include "osfa/gaussaug.hpp"

namespace osfa {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AugVariant { None, Fixed, Single, Channel, Position, PositionChannel, Gblur, Solarize, Rcrop };

std::string_view to_string(AugVariant v);
/// none | fixed | single | channel | position | position_channel | gblur | solarize | rcrop
AugVariant parse_aug_variant(std::string_view name);
/// Table label: "Default", "+Ours" (channel), "+Fixed", ...
std::string_view row_label(AugVariant v);
std::optional<SigmaVariant> sigma_variant(AugVariant v);
const std::vector<AugVariant>& all_aug_variants();

enum class OptimizerKind { Sgd, SgdMomentum };
enum class Dtype { Float32, Float64 };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t episodes_per_epoch = 300;
  double learning_rate = 0.002;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double momentum = 0.9;
  AugVariant aug_variant = AugVariant::Channel;
  std::uint64_t seed_weights = 0;
  std::uint64_t seed_noise = 0;
  std::uint64_t seed_episodes = 0;
  Dtype dtype = Dtype::Float32;
  double clip_norm = 10.0;
  double sigma_init = kInitialSigma;
  EpisodeSampling sampling = EpisodeSampling::ClassUniform;
  std::size_t rcrop_resize = 80;  // query resized to this before the 64x64 random crop
  bool flip_query = false;        // horizontal flip with probability 0.5
  bool flip_target = false;       // same for the target page and its boxes
  DetectorConfig detector;
  ImageAugConfig image_aug;

  void validate() const;
  /// Throws ConfigError on an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  /// Fully resolved flat key=value view, in a fixed key order.
  std::vector<std::pair<std::string, std::string>> resolved() const;
  std::string to_text() const;
  static std::vector<std::string> keys();
};

/// Parses "key = value" lines; '#' starts a comment. Throws ConfigError with
/// the line number on malformed lines.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
/// "key=value"
std::pair<std::string, std::string> split_assignment(const std::string& s);

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  T momentum = T(0.9);
  std::vector<std::vector<T>> velocity;  // lazily sized on the first step
};

/// p <- p - lr * g (Sgd) or v <- mu v + g; p <- p - lr * v (SgdMomentum).
/// A missing gradient (nullptr) counts as zero. Throws ShapeError on mismatch.
template <typename T>
void opt_step(const std::vector<Tensor<T>>& params, const std::vector<const Tensor<T>*>& grads, T lr,
              OptimizerState<T>& state);

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Training

template <typename T>
struct TrainState {
  DetectorParams<T> params;
  std::optional<SigmaParams<T>> sigma;
  OptimizerState<T> optimizer;

  static TrainState init(const TrainConfig& cfg);
  /// Detector tensors followed by sigma when it is trainable.
  std::vector<Tensor<T>> trainable() const;
  std::vector<NamedTensor> to_checkpoint() const;
};

/// Everything one optimization step consumes.
template <typename T>
struct StepInput {
  Tensor<T> query;
  Tensor<T> target;
  std::vector<Box> gt;
  std::vector<Box> hard_negatives;  // other classes on the target page
};

struct StepStats {
  double loss = 0;
  double rpn_loss = 0;
  double head_loss = 0;
  double grad_norm = 0;
};

/// Step input for a drawn episode on a training page.
template <typename T>
StepInput<T> step_input(const Dataset& dataset, const Episode& episode, const Image& query,
                        bool flip_target = false);

/// Forward, backward, clip, and one optimizer step on theta and sigma.
template <typename T>
StepStats train_step(TrainState<T>& state, const TrainConfig& cfg, const StepInput<T>& input, Rng& noise_rng,
                     Rng& sample_rng);

/// Rngs and query image for one episode; a pure function of the seed triple
/// and the global episode index.
struct EpisodeDraw {
  Episode episode;
  Image query;  // after image-space augmentation
  bool flip_target = false;
  Rng noise_rng{0};
  Rng sample_rng{0};
};

EpisodeDraw draw_episode(const TrainConfig& cfg, const Dataset& dataset, const EpisodeSampler& sampler,
                         std::size_t global_index);

struct SigmaSnapshot {
  std::size_t epoch = 0;
  double mean_abs = 0;
  double min_abs = 0;
  double max_abs = 0;
  double max_dev_from_init = 0;  // max |sigma - sigma_init|
};

struct RunRecord {
  TrainConfig config;
  std::vector<double> loss_curve;  // mean loss per epoch
  std::vector<SigmaSnapshot> sigma_snapshots;
  std::vector<double> final_abs_sigma;  // per channel
  std::string checkpoint;
  double seconds = 0;  // wall time, not serialized

  std::string to_json() const;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep nothing on disk
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

template <typename T>
struct TrainResult {
  RunRecord record;
  TrainState<T> state;
};

template <typename T>
TrainResult<T> train_typed(const TrainConfig& cfg, const Dataset& dataset, const TrainOptions& options = {});

/// Dispatches on cfg.dtype. Writes run.json, model.ckpt and config.txt into
/// options.out_dir when it is set.
RunRecord train(const TrainConfig& cfg, const Dataset& dataset, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Matrix

struct MatrixEntry {
  AugVariant variant = AugVariant::None;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::optional<RunRecord> record;
  std::string error;  // nonempty when the run failed
  std::string tag() const;
};

/// Trains every (variant, seed) pair; the seed sets all three seeds of the
/// triple. Failures are recorded and the matrix continues. `after_run` is
/// invoked for every successful entry from the worker that trained it.
std::vector<MatrixEntry> run_matrix(const std::vector<AugVariant>& variants, const std::vector<std::uint64_t>& seeds,
                                    const Dataset& dataset, const TrainConfig& base,
                                    const std::filesystem::path& out_dir, std::size_t jobs = 1,
                                    const std::function<void(MatrixEntry&)>& after_run = {});

}  // namespace osfa
