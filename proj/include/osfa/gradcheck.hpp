#pragma once

// Finite-difference checks of the detector and noise-scale gradients.

#include <cstdint>
#include <string>
#include <vector>

#include "osfa/detector.hpp"
#include "osfa/gaussaug.hpp"

namespace osfa {

struct GradCheckResult {
  std::string group;  // parameter group, or "sigma/<variant>"
  std::size_t checked = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  std::size_t per_group = 5;  // random scalars per detector parameter group
  double theta_tolerance = 1e-3;
  double sigma_tolerance = 1e-4;
};

/// |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Two-stage toy detector: 32x32 target, 16x16 query, small widths.
DetectorConfig toy_detector_config();

/// Loss of a fixed toy episode with frozen proposals, samples and eps.
class ToyProblem {
 public:
  explicit ToyProblem(std::uint64_t seed, const SigmaParams<double>* sigma = nullptr);

  const DetectorConfig& config() const { return cfg_; }
  DetectorParams<double>& params() { return params_; }
  double loss(const SigmaParams<double>* sigma) const;
  /// Reverse-mode gradients for every detector tensor and sigma.
  GradMap<double> gradients(const SigmaParams<double>* sigma) const;

 private:
  Tensor<double> forward(const SigmaParams<double>* sigma) const;

  DetectorConfig cfg_;
  DetectorParams<double> params_;
  Tensor<double> query_, target_, epsilon_;
  std::vector<Box> gt_;
  TrainPlan plan_;
};

/// One result per detector parameter group, in named() order.
std::vector<GradCheckResult> check_theta(const GradCheckOptions& options = {});

/// Every entry of sigma for one trainable variant.
GradCheckResult check_sigma(SigmaVariant variant, const GradCheckOptions& options = {});

/// Single, ChannelWise, PositionWise and PositionChannel, then the theta groups.
std::vector<GradCheckResult> check_all(const GradCheckOptions& options = {});

}  // namespace osfa
