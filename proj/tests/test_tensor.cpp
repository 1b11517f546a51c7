#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fd.hpp"
#include "osfa/checkpoint.hpp"
#include "osfa/rng.hpp"
#include "osfa/tensor.hpp"

using namespace osfa;
using osfa::testing::max_fd_error;
using osfa::testing::random_param;
using Td = Tensor<double>;

namespace {
std::vector<double> vals(const Td& t) { return {t.data().begin(), t.data().end()}; }
}  // namespace

TEST_CASE("elementwise examples") {
  const Td a({2}, {1, 2}), b({2}, {3, 4});
  CHECK(vals(add(a, b)) == std::vector<double>{4, 6});
  CHECK(vals(relu(Td({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
  const Td x({2, 2}, {1.5, -2, 3, 4});
  const Td z = mul(x, Td::scalar(0));
  CHECK(z.shape() == Shape{2, 2});
  for (double v : z.data()) CHECK(v == 0);
}

TEST_CASE("shape mismatch names both shapes") {
  const Td a({2, 3}, std::vector<double>(6, 1)), b({3, 2}, std::vector<double>(6, 1));
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  // no silent broadcasting beyond a scalar
  CHECK_THROWS_AS(add(Td({2}, {1, 2}), Td({1}, {1})), ShapeError);
}

TEST_CASE("conv2d examples") {
  Rng rng(1);
  const Td img({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(vals(conv2d(img, Td({1, 1, 1, 1}, {1}), 1, 0)) == vals(img));

  const Td ones({1, 3, 3}, std::vector<double>(9, 1));
  const Td k({1, 1, 3, 3}, std::vector<double>(9, 1));
  const Td out = conv2d(ones, k, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out.item() == 9);

  const Td zero = conv2d(random_param({2, 5, 5}, rng), Td::zeros({3, 2, 3, 3}), 1, 1);
  CHECK(zero.shape() == Shape{3, 5, 5});
  for (double v : zero.data()) CHECK(v == 0);

  CHECK(conv2d(random_param({1, 9, 7}, rng), Td::zeros({1, 1, 3, 3}), 2, 1).shape() == Shape{1, 5, 4});
  CHECK_THROWS(conv2d(random_param({1, 2, 2}, rng), Td::zeros({1, 1, 3, 3}), 1, 0));
  CHECK_THROWS(conv2d(random_param({1, 4, 4}, rng), Td::zeros({1, 1, 2, 2}), 1, 0));
}

TEST_CASE("reduce examples") {
  CHECK(sum(Td({3}, {1, 2, 3})).item() == 6);
  CHECK(mean(Td({2}, {2, 4})).item() == 3);
  CHECK(reduce(ReduceOp::Max, Td({1}, {-7.5})).item() == -7.5);
  const Td m({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(vals(reduce(ReduceOp::Sum, m, {0})) == std::vector<double>{5, 7, 9});
  CHECK(vals(reduce(ReduceOp::Max, m, {1})) == std::vector<double>{3, 6});
}

TEST_CASE("backward examples") {
  const Td x = Td::parameter({1}, {3});
  const auto g = backward(mul(x, x));
  CHECK(g.at(x).item() == 6);

  Rng rng(5);
  const Td sigma = Td::parameter({2}, {0.3, -0.7});
  const Td eps = rng_normal<double>(rng, {2, 4, 4});
  const Td loss = sum(mul(expand(sigma, {2, 4, 4}, {0}), eps));
  const auto gs = backward(loss);
  for (std::size_t c = 0; c < 2; ++c) {
    double acc = 0;
    for (std::size_t i = 0; i < 16; ++i) acc += eps.data()[c * 16 + i];
    CHECK(gs.at(sigma).data()[c] == doctest::Approx(acc).epsilon(1e-12));
  }

  CHECK_THROWS_AS(backward(Td({1}, {1.0})), GraphError);
  CHECK_THROWS_AS(backward(mul(Td::parameter({2}, {1, 2}), Td::scalar(2))), GraphError);
}

TEST_CASE("no-grad guard records nothing") {
  const Td x = Td::parameter({2}, {1, 2});
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(mul(x, x).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("non-finite forward values are an error") {
  CHECK_THROWS_AS(exp(Td({1}, {1000.0})), NumericError);
}

TEST_CASE("every differentiable op matches finite differences") {
  Rng rng(11);
  const double tol = 1e-6;
  SUBCASE("add sub mul neg exp abs sigmoid scale") {
    auto f = [](const std::vector<Td>& in) {
      const Td t = add(mul(in[0], in[1]), sub(neg(in[0]), exp(in[1])));
      return sum(add(sigmoid(t), scale(abs(in[0]), 0.5)));
    };
    CHECK(max_fd_error(f, {random_param({3, 2}, rng), random_param({3, 2}, rng)}) < tol);
  }
  SUBCASE("relu away from the kink") {
    auto f = [](const std::vector<Td>& in) { return sum(mul(relu(in[0]), in[0])); };
    CHECK(max_fd_error(f, {Td::parameter({4}, {-0.8, -0.3, 0.4, 1.1})}) < tol);
  }
  SUBCASE("reshape expand concat transpose take") {
    auto f = [](const std::vector<Td>& in) {
      const Td e = expand(in[0], {2, 3, 4}, {1});
      const Td c = concat<double>({reshape(e, {6, 4}), in[1]}, 0);
      const std::size_t idx[] = {0, 2, 7, 2};
      const Td t = take(transpose(c), 1, std::span<const std::size_t>(idx));
      return sum(mul(t, t));
    };
    CHECK(max_fd_error(f, {random_param({3}, rng), random_param({2, 4}, rng)}) < tol);
  }
  SUBCASE("reductions") {
    auto f = [](const std::vector<Td>& in) {
      const Td a = reduce(ReduceOp::Mean, in[0], {1});
      const Td b = reduce(ReduceOp::Max, in[0], {0, 2});
      return add(sum(mul(a, a)), sum(mul(b, b)));
    };
    CHECK(max_fd_error(f, {random_param({3, 4, 2}, rng)}) < tol);
  }
  SUBCASE("conv2d with bias, stride and padding") {
    auto f = [](const std::vector<Td>& in) {
      const Td y = conv2d(in[0], in[1], in[2], 2, 1);
      return sum(mul(y, y));
    };
    CHECK(max_fd_error(f, {random_param({2, 7, 6}, rng), random_param({3, 2, 3, 3}, rng),
                           random_param({3}, rng)}) < tol);
  }
  SUBCASE("matmul softmax") {
    auto f = [](const std::vector<Td>& in) {
      const Td s = softmax_rows(matmul(in[0], in[1]));
      return sum(mul(s, s));
    };
    CHECK(max_fd_error(f, {random_param({3, 4}, rng), random_param({4, 5}, rng)}) < tol);
  }
  SUBCASE("cosine map") {
    auto f = [](const std::vector<Td>& in) {
      const Td c = cosine_map(in[0], in[1]);
      return sum(mul(c, c));
    };
    CHECK(max_fd_error(f, {random_param({3}, rng), random_param({3, 2, 4}, rng)}) < tol);
  }
  SUBCASE("bce with logits") {
    const std::vector<double> targets{1, 0, 0, 1, 1};
    auto f = [&](const std::vector<Td>& in) { return bce_with_logits(in[0], std::span<const double>(targets)); };
    CHECK(max_fd_error(f, {random_param({5}, rng, -3, 3)}) < tol);
  }
  SUBCASE("roi align") {
    const std::vector<FeatureRect> rects{{0.3, 0.6, 3.2, 4.1}, {1.5, 0.0, 5.0, 2.5}};
    auto f = [&](const std::vector<Td>& in) {
      const Td r = roi_align(in[0], std::span<const FeatureRect>(rects), 3);
      return sum(mul(r, r));
    };
    CHECK(max_fd_error(f, {random_param({2, 5, 6}, rng)}) < tol);
  }
}

TEST_CASE("backward is bit-identical across runs") {
  auto run = [] {
    Rng rng(3);
    const Td w = random_param({4, 2, 3, 3}, rng);
    const Td x = rng_normal<double>(rng, {2, 8, 8});
    return vals(backward(sum(relu(conv2d(x, w, 1, 1)))).at(w));
  };
  CHECK(run() == run());
}

TEST_CASE("rng determinism and streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  const Rng root(9);
  Rng f1 = root.fork(1), f1b = root.fork(1), f2 = root.fork(2);
  CHECK(f1.next_u64() == f1b.next_u64());
  CHECK(f1.next_u64() != f2.next_u64());
  CHECK(root.counter() == 0);

  Rng r1(7), r2(7);
  CHECK(vals(rng_normal<double>(r1, {3, 5})) == vals(rng_normal<double>(r2, {3, 5})));
}

TEST_CASE("rng normal moments") {
  Rng rng(2024);
  const Td x = rng_normal<double>(rng, {100000});
  const double m = mean(x).item();
  double var = 0;
  for (double v : x.data()) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / (x.size() - 1));
  CHECK(m >= -0.02);
  CHECK(m <= 0.02);
  CHECK(sd >= 0.99);
  CHECK(sd <= 1.01);
}

TEST_CASE("rng uniform range") {
  Rng rng(8);
  const Td u = rng_uniform<double>(rng, 0.1, 2.0, {50000});
  const auto [lo, hi] = std::minmax_element(u.data().begin(), u.data().end());
  CHECK(*lo >= 0.1);
  CHECK(*hi < 2.0);
  CHECK_THROWS_AS(rng_uniform<double>(rng, 2.0, 2.0, {3}), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(4);
  const std::vector<NamedTensor> ts{to_named("a/weight", rng_normal<float>(rng, {2, 3})),
                                    to_named("sigma/channel", Tensor<float>::full({5}, 0.1f)),
                                    to_named("s", Tensor<float>::scalar(-2.5f))};
  const auto bytes = encode_checkpoint(ts);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "OSFA1");
  CHECK(decode_checkpoint(bytes) == ts);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
}
