#pragma once

// Learnable Gaussian augmentation of query features, plus the image-space
// baselines it is compared against.
//
// Noise is drawn with the reparameterization n = sigma * eps, eps ~ N(0, 1),
// so the sampled tensor is differentiable in sigma: dn/dsigma = eps at every
// element the sigma entry broadcasts to. Five granularities are supported:
//
//   Fixed            scalar, frozen at its initial value
//   Single           scalar, learned
//   ChannelWise      [C], learned (one std per feature channel)
//   PositionWise     [H, W], learned, shared across channels
//   PositionChannel  [C, H, W], learned
//
// Only the variance sigma^2 enters the distribution, so sigma is stored and
// updated unconstrained; reports show |sigma|.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "osfa/image.hpp"
#include "osfa/rng.hpp"
#include "osfa/tensor.hpp"

namespace osfa {

enum class SigmaVariant { Fixed, Single, ChannelWise, PositionWise, PositionChannel };

std::string_view to_string(SigmaVariant v);
/// Accepts fixed | single | channel | position | position_channel.
SigmaVariant parse_sigma_variant(std::string_view name);

inline constexpr double kInitialSigma = 0.1;

/// Geometry of the query feature map the noise is added to.
struct FeatureGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  Shape shape() const { return {channels, height, width}; }
  bool operator==(const FeatureGeometry&) const = default;
};

Shape sigma_shape(SigmaVariant variant, const FeatureGeometry& geometry);

template <typename T>
class SigmaParams {
 public:
  SigmaParams(SigmaVariant variant, FeatureGeometry geometry, T init = static_cast<T>(kInitialSigma));
  /// Restores previously trained values; shape must match the variant.
  SigmaParams(SigmaVariant variant, FeatureGeometry geometry, std::vector<T> values);

  SigmaVariant variant() const { return variant_; }
  const FeatureGeometry& geometry() const { return geometry_; }
  bool trainable() const { return variant_ != SigmaVariant::Fixed; }

  const Tensor<T>& values() const { return values_; }
  Tensor<T>& values() { return values_; }

  /// "sigma/<variant>"
  std::string checkpoint_name() const;

  /// |sigma| averaged over the positions belonging to each channel.
  std::vector<double> abs_per_channel() const;

 private:
  SigmaVariant variant_;
  FeatureGeometry geometry_;
  Tensor<T> values_;
};

enum class AugMode { Train, Infer };

/// sigma broadcast to the full [C,H,W] geometry (differentiable).
template <typename T>
Tensor<T> broadcast_sigma(const SigmaParams<T>& sigma);

/// n = broadcast(sigma) * eps for a caller-supplied eps of the feature shape.
template <typename T>
Tensor<T> noise_from_epsilon(const SigmaParams<T>& sigma, const Tensor<T>& eps);

/// Draws eps ~ N(0,1) of shape [C,H,W] (row-major order, independent of the
/// variant) and returns sigma * eps.
template <typename T>
Tensor<T> sample_noise(const SigmaParams<T>& sigma, const FeatureGeometry& geometry, Rng& rng);

/// Train: fq + sample_noise(sigma). Infer: fq itself; rng is not touched.
template <typename T>
Tensor<T> augment_query(const Tensor<T>& fq, const SigmaParams<T>& sigma, AugMode mode, Rng& rng);

/// Train-mode augmentation with a frozen eps tensor.
template <typename T>
Tensor<T> augment_query_with(const Tensor<T>& fq, const SigmaParams<T>& sigma, const Tensor<T>& eps);

/// sigma <- sigma - lr * grad, in place, unclamped. Throws for Fixed.
template <typename T>
void sigma_step(SigmaParams<T>& sigma, const Tensor<T>& grad, T lr);

// ---------------------------------------------------------------------------
// Image-space baselines (applied to the query patch only)

struct GaussianBlurConfig {
  std::size_t kernel_size = 3;
  double variance_lo = 0.1;
  double variance_hi = 2.0;
};

struct SolarizeConfig {
  double probability = 0.5;
  int threshold = 100;
};

struct RandomCropConfig {
  std::size_t width = 64;
  std::size_t height = 64;
};

struct ImageAugConfig {
  GaussianBlurConfig gblur;
  SolarizeConfig solarize;
  RandomCropConfig rcrop;
};

/// Normalized (sum 1) size x size Gaussian kernel with the given variance, row-major.
std::vector<double> gaussian_kernel(std::size_t size, double variance);

/// Blur with a fixed variance; reflect-padded borders, rounded to 8 bits.
Image gaussian_blur(const Image& img, double variance, std::size_t kernel_size = 3);
/// Blur with variance ~ U(lo, hi).
Image gaussian_blur(const Image& img, Rng& rng, const GaussianBlurConfig& cfg = {});

/// Every pixel p >= threshold becomes 255 - p.
Image solarize_applied(const Image& img, int threshold = 100);
/// Applies solarize_applied with the configured probability.
Image solarize(const Image& img, Rng& rng, const SolarizeConfig& cfg = {});

/// Reflect-pads to the crop size if needed, then takes a window at a
/// uniformly random valid offset.
Image random_crop(const Image& img, Rng& rng, const RandomCropConfig& cfg = {});

}  // namespace osfa
