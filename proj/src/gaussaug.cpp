#include "osfa/gaussaug.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace osfa {

std::string_view to_string(SigmaVariant v) {
  switch (v) {
    case SigmaVariant::Fixed:
      return "fixed";
    case SigmaVariant::Single:
      return "single";
    case SigmaVariant::ChannelWise:
      return "channel";
    case SigmaVariant::PositionWise:
      return "position";
    case SigmaVariant::PositionChannel:
      return "position_channel";
  }
  return "?";
}

SigmaVariant parse_sigma_variant(std::string_view name) {
  for (const auto v : {SigmaVariant::Fixed, SigmaVariant::Single, SigmaVariant::ChannelWise,
                       SigmaVariant::PositionWise, SigmaVariant::PositionChannel}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown sigma variant '" + std::string(name) + "'");
}

Shape sigma_shape(SigmaVariant variant, const FeatureGeometry& g) {
  switch (variant) {
    case SigmaVariant::Fixed:
    case SigmaVariant::Single:
      return {};
    case SigmaVariant::ChannelWise:
      return {g.channels};
    case SigmaVariant::PositionWise:
      return {g.height, g.width};
    case SigmaVariant::PositionChannel:
      return {g.channels, g.height, g.width};
  }
  return {};
}

namespace {

std::vector<std::size_t> broadcast_axes(SigmaVariant variant) {
  switch (variant) {
    case SigmaVariant::ChannelWise:
      return {0};
    case SigmaVariant::PositionWise:
      return {1, 2};
    case SigmaVariant::PositionChannel:
      return {0, 1, 2};
    default:
      return {};
  }
}

void require_geometry(const FeatureGeometry& expected, const Shape& got, const char* what) {
  if (got != expected.shape()) {
    throw ShapeError(std::string(what) + ": feature shape " + to_string(got) +
                     " does not match sigma geometry " + to_string(expected.shape()));
  }
}

}  // namespace

template <typename T>
SigmaParams<T>::SigmaParams(SigmaVariant variant, FeatureGeometry geometry, T init)
    : SigmaParams(variant, geometry, std::vector<T>(numel(sigma_shape(variant, geometry)), init)) {}

template <typename T>
SigmaParams<T>::SigmaParams(SigmaVariant variant, FeatureGeometry geometry, std::vector<T> values)
    : variant_(variant), geometry_(geometry) {
  if (geometry.channels == 0 || geometry.height == 0 || geometry.width == 0) {
    throw ShapeError("sigma geometry must be positive");
  }
  values_ = Tensor<T>(sigma_shape(variant, geometry), std::move(values), trainable());
}

template <typename T>
std::string SigmaParams<T>::checkpoint_name() const {
  return "sigma/" + std::string(to_string(variant_));
}

template <typename T>
std::vector<double> SigmaParams<T>::abs_per_channel() const {
  const auto v = values_.data();
  const std::size_t C = geometry_.channels, P = geometry_.height * geometry_.width;
  std::vector<double> out(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    switch (variant_) {
      case SigmaVariant::Fixed:
      case SigmaVariant::Single:
        out[c] = std::abs(static_cast<double>(v[0]));
        break;
      case SigmaVariant::ChannelWise:
        out[c] = std::abs(static_cast<double>(v[c]));
        break;
      case SigmaVariant::PositionWise:
      case SigmaVariant::PositionChannel: {
        const std::size_t base = variant_ == SigmaVariant::PositionWise ? 0 : c * P;
        double acc = 0;
        for (std::size_t p = 0; p < P; ++p) acc += std::abs(static_cast<double>(v[base + p]));
        out[c] = acc / static_cast<double>(P);
        break;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_sigma(const SigmaParams<T>& sigma) {
  const auto& v = sigma.values();
  if (sigma.variant() == SigmaVariant::PositionChannel) {
    return v;
  }
  return expand(v, sigma.geometry().shape(), broadcast_axes(sigma.variant()));
}

template <typename T>
Tensor<T> noise_from_epsilon(const SigmaParams<T>& sigma, const Tensor<T>& eps) {
  require_geometry(sigma.geometry(), eps.shape(), "noise_from_epsilon");
  return mul(broadcast_sigma(sigma), eps);
}

template <typename T>
Tensor<T> sample_noise(const SigmaParams<T>& sigma, const FeatureGeometry& geometry, Rng& rng) {
  if (!(geometry == sigma.geometry())) {
    throw ShapeError("sample_noise: geometry " + to_string(geometry.shape()) +
                     " does not match sigma geometry " + to_string(sigma.geometry().shape()));
  }
  return noise_from_epsilon(sigma, rng_normal<T>(rng, geometry.shape()));
}

template <typename T>
Tensor<T> augment_query(const Tensor<T>& fq, const SigmaParams<T>& sigma, AugMode mode, Rng& rng) {
  require_geometry(sigma.geometry(), fq.shape(), "augment_query");
  if (mode == AugMode::Infer) {
    return fq;
  }
  return add(fq, sample_noise(sigma, sigma.geometry(), rng));
}

template <typename T>
Tensor<T> augment_query_with(const Tensor<T>& fq, const SigmaParams<T>& sigma, const Tensor<T>& eps) {
  require_geometry(sigma.geometry(), fq.shape(), "augment_query");
  return add(fq, noise_from_epsilon(sigma, eps));
}

template <typename T>
void sigma_step(SigmaParams<T>& sigma, const Tensor<T>& grad, T lr) {
  if (!sigma.trainable()) {
    throw std::logic_error("sigma_step on the Fixed variant");
  }
  if (grad.shape() != sigma.values().shape()) {
    throw ShapeError("sigma_step: gradient " + to_string(grad.shape()) + " vs sigma " +
                     to_string(sigma.values().shape()));
  }
  auto v = sigma.values().mutable_data();
  const auto g = grad.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] -= lr * g[i];
  }
}

template class SigmaParams<float>;
template class SigmaParams<double>;
#define OSFA_INSTANTIATE(T)                                                                   \
  template Tensor<T> broadcast_sigma<T>(const SigmaParams<T>&);                               \
  template Tensor<T> noise_from_epsilon<T>(const SigmaParams<T>&, const Tensor<T>&);          \
  template Tensor<T> sample_noise<T>(const SigmaParams<T>&, const FeatureGeometry&, Rng&);    \
  template Tensor<T> augment_query<T>(const Tensor<T>&, const SigmaParams<T>&, AugMode, Rng&); \
  template Tensor<T> augment_query_with<T>(const Tensor<T>&, const SigmaParams<T>&,           \
                                           const Tensor<T>&);                                 \
  template void sigma_step<T>(SigmaParams<T>&, const Tensor<T>&, T);
OSFA_INSTANTIATE(float)
OSFA_INSTANTIATE(double)
#undef OSFA_INSTANTIATE

// ---------------------------------------------------------------------------
// Image-space baselines

std::vector<double> gaussian_kernel(std::size_t size, double variance) {
  if (size % 2 == 0) {
    throw std::invalid_argument("gaussian kernel size must be odd");
  }
  if (!(variance > 0)) {
    throw std::invalid_argument("gaussian kernel variance must be positive");
  }
  const long r = static_cast<long>(size / 2);
  std::vector<double> k;
  double total = 0;
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      k.push_back(std::exp(-static_cast<double>(dx * dx + dy * dy) / (2.0 * variance)));
      total += k.back();
    }
  }
  for (auto& v : k) v /= total;
  return k;
}

Image gaussian_blur(const Image& img, double variance, std::size_t kernel_size) {
  if (img.width < kernel_size || img.height < kernel_size) {
    throw ImageError("gaussian_blur: image " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + " smaller than the kernel");
  }
  const auto k = gaussian_kernel(kernel_size, variance);
  const long r = static_cast<long>(kernel_size / 2);
  const long W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  const auto reflect = [](long i, long n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); };
  Image out(img.width, img.height);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      std::size_t idx = 0;
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx) {
          acc += k[idx++] * img.at(static_cast<std::size_t>(reflect(x + dx, W)),
                                   static_cast<std::size_t>(reflect(y + dy, H)));
        }
      }
      out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) =
          static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
    }
  }
  return out;
}

Image gaussian_blur(const Image& img, Rng& rng, const GaussianBlurConfig& cfg) {
  if (img.width < cfg.kernel_size || img.height < cfg.kernel_size) {
    throw ImageError("gaussian_blur: image smaller than the kernel");
  }
  const double variance = rng.uniform(cfg.variance_lo, cfg.variance_hi);
  return gaussian_blur(img, variance, cfg.kernel_size);
}

Image solarize_applied(const Image& img, int threshold) {
  Image out = img;
  for (auto& p : out.pixels) {
    if (p >= threshold) p = static_cast<std::uint8_t>(255 - p);
  }
  return out;
}

Image solarize(const Image& img, Rng& rng, const SolarizeConfig& cfg) {
  return rng.bernoulli(cfg.probability) ? solarize_applied(img, cfg.threshold) : img;
}

Image random_crop(const Image& img, Rng& rng, const RandomCropConfig& cfg) {
  const Image padded = reflect_pad(img, cfg.width, cfg.height);
  const std::size_t ox = rng.below(padded.width - cfg.width + 1);
  const std::size_t oy = rng.below(padded.height - cfg.height + 1);
  Image out(cfg.width, cfg.height);
  for (std::size_t y = 0; y < cfg.height; ++y) {
    for (std::size_t x = 0; x < cfg.width; ++x) {
      out.at(x, y) = padded.at(ox + x, oy + y);
    }
  }
  return out;
}

}  // namespace osfa
