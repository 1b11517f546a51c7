#include "osfa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace osfa {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

DetectorConfig toy_detector_config() {
  DetectorConfig cfg;
  cfg.image_size = 32;
  cfg.query_size = 16;
  cfg.backbone = {{4, 2}, {6, 4}};
  cfg.match_channels = 4;
  cfg.rpn_channels = 4;
  cfg.instance_channels = 4;
  cfg.pool_size = 3;
  cfg.head_hidden = 6;
  cfg.anchor_scale = 2.0;
  cfg.rpn_top_n = 8;
  cfg.sample_cap = 16;
  return cfg;
}

namespace {

Tensor<double> random_image(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor<double>({1, h, w}, std::move(v));
}

}  // namespace

ToyProblem::ToyProblem(std::uint64_t seed, const SigmaParams<double>* sigma) : cfg_(toy_detector_config()) {
  const Rng root(seed);
  Rng init_rng = root.fork(0), data_rng = root.fork(1), eps_rng = root.fork(2), sample_rng = root.fork(3);
  params_ = DetectorParams<double>::init(cfg_, init_rng);
  // the default small output gains leave most relation units flat; rescale
  // so every group carries a measurable gradient
  for (auto& ref : params_.named()) {
    if (ref.name.ends_with("/bias")) {
      for (auto& x : ref.tensor.mutable_data()) x = init_rng.uniform(-0.1, 0.1);
    }
  }
  target_ = random_image(cfg_.image_size, cfg_.image_size, data_rng);
  query_ = random_image(cfg_.query_size, cfg_.query_size, data_rng);
  gt_ = {{4, 5, 20, 23}, {14, 2, 30, 16}};
  const FeatureGeometry g = cfg_.query_geometry();
  std::vector<double> eps(g.channels * g.height * g.width);
  for (auto& e : eps) e = eps_rng.normal();
  epsilon_ = Tensor<double>({g.channels, g.height, g.width}, std::move(eps));

  QueryNoise<double> noise;
  noise.sigma = sigma;
  noise.epsilon = sigma != nullptr ? &epsilon_ : nullptr;
  ForwardOptions options;
  options.hard_negatives = {{16, 16, 31, 31}};
  plan_ = forward_train(params_, cfg_, query_, target_, gt_, noise, sample_rng, nullptr, options).plan;
}

Tensor<double> ToyProblem::forward(const SigmaParams<double>* sigma) const {
  QueryNoise<double> noise;
  noise.sigma = sigma;
  noise.epsilon = sigma != nullptr ? &epsilon_ : nullptr;
  Rng unused(0);
  return forward_train(params_, cfg_, query_, target_, gt_, noise, unused, &plan_).loss;
}

double ToyProblem::loss(const SigmaParams<double>* sigma) const {
  NoGradGuard no_grad;
  return forward(sigma).item();
}

GradMap<double> ToyProblem::gradients(const SigmaParams<double>* sigma) const {
  return backward(forward(sigma));
}

namespace {

double central_difference(const std::function<double()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2 * h);
}

}  // namespace

std::vector<GradCheckResult> check_theta(const GradCheckOptions& options) {
  ToyProblem toy(options.seed);
  const GradMap<double> grads = toy.gradients(nullptr);
  const auto named = toy.params().named();

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (!members.contains(named[i].group)) order.push_back(named[i].group);
    members[named[i].group].push_back(i);
  }

  Rng pick(Rng(options.seed).fork(7));
  std::vector<GradCheckResult> out;
  for (const auto& group : order) {
    GradCheckResult r{group, 0, 0, options.theta_tolerance};
    std::size_t total = 0;
    for (std::size_t i : members[group]) total += named[i].tensor.size();
    for (std::size_t k = 0; k < options.per_group; ++k) {
      std::size_t flat = pick.below(total);
      std::size_t idx = 0;
      for (std::size_t i : members[group]) {
        if (flat < named[i].tensor.size()) {
          idx = i;
          break;
        }
        flat -= named[i].tensor.size();
      }
      Tensor<double> t = named[idx].tensor;
      const Tensor<double>* g = grads.find(t);
      const double analytic = g != nullptr ? g->data()[flat] : 0.0;
      const double numeric =
          central_difference([&] { return toy.loss(nullptr); }, t.mutable_data()[flat], options.step);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, numeric));
      ++r.checked;
    }
    out.push_back(r);
  }
  return out;
}

GradCheckResult check_sigma(SigmaVariant variant, const GradCheckOptions& options) {
  if (variant == SigmaVariant::Fixed) throw std::invalid_argument("check_sigma: the fixed variant has no gradient");
  const DetectorConfig cfg = toy_detector_config();
  SigmaParams<double> sigma(variant, cfg.query_geometry());
  // distinct entries so a swapped index cannot cancel out
  Rng init(Rng(options.seed).fork(9));
  for (auto& s : sigma.values().mutable_data()) s = init.uniform(0.05, 0.5);
  ToyProblem toy(options.seed, &sigma);
  const GradMap<double> grads = toy.gradients(&sigma);
  const Tensor<double>* g = grads.find(sigma.values());

  GradCheckResult r{sigma.checkpoint_name(), 0, 0, options.sigma_tolerance};
  auto values = sigma.values().mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double analytic = g != nullptr ? g->data()[i] : 0.0;
    const double numeric = central_difference([&] { return toy.loss(&sigma); }, values[i], options.step);
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, numeric));
    ++r.checked;
  }
  return r;
}

std::vector<GradCheckResult> check_all(const GradCheckOptions& options) {
  std::vector<GradCheckResult> out;
  for (auto v : {SigmaVariant::Single, SigmaVariant::ChannelWise, SigmaVariant::PositionWise,
                 SigmaVariant::PositionChannel}) {
    out.push_back(check_sigma(v, options));
  }
  for (auto& r : check_theta(options)) out.push_back(r);
  return out;
}

}  // namespace osfa
