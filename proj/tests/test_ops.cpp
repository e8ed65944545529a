#include <catch_amalgamated.hpp>

#include "idportrait/nn.hpp"
#include "test_support.hpp"

using namespace idportrait;
using idportrait::testing::probe_gradient;
using idportrait::testing::random_tensor;

namespace {

// Checks d/dx sum(op(x) * R) against central differences at a few entries.
void check_unary(const std::function<Tensor(const Tensor&)>& op, Shape shape, uint64_t seed) {
  Tensor x = random_tensor(shape, seed, 1.0, true);
  Tensor probe = random_tensor(op(x.detach()).shape(), seed + 1);
  auto loss = [&] { return sum(mul(op(x), probe)); };
  for (int64_t idx : {int64_t{0}, x.numel() / 2, x.numel() - 1}) {
    auto g = probe_gradient(x, idx, loss);
    INFO("index " << idx << " analytic " << g.analytic << " numeric " << g.numeric);
    CHECK(g.rel_error() < 1e-6);
  }
}

}  // namespace

TEST_CASE("elementwise and reduction gradients", "[ops]") {
  check_unary([](const Tensor& x) { return silu(x); }, {3, 4}, 1);
  check_unary([](const Tensor& x) { return gelu(x); }, {3, 4}, 2);
  check_unary([](const Tensor& x) { return square(x); }, {5}, 3);
  check_unary([](const Tensor& x) { return softmax(x); }, {2, 5}, 4);
  check_unary([](const Tensor& x) { return standardize(x); }, {3, 6}, 5);
  check_unary([](const Tensor& x) { return l2_normalize(x); }, {2, 7}, 6);
  check_unary([](const Tensor& x) { return sum_axis(x, 1, true); }, {2, 3, 4}, 7);
  check_unary([](const Tensor& x) { return permute(x, {2, 0, 1}); }, {2, 3, 4}, 8);
  check_unary([](const Tensor& x) { return slice(x, 1, 1, 2); }, {2, 4, 3}, 9);
  check_unary([](const Tensor& x) { return upsample_nearest2x(x); }, {1, 2, 3, 3}, 10);
  check_unary([](const Tensor& x) { return concat({x, square(x)}, 1); }, {2, 3, 2}, 11);
}

TEST_CASE("broadcast binary ops reduce gradients onto broadcast axes", "[ops]") {
  Tensor a = random_tensor({2, 3, 4}, 20, 1.0, true);
  Tensor b = random_tensor({1, 3, 1}, 21, 1.0, true);
  Tensor probe = random_tensor({2, 3, 4}, 22);
  auto loss = [&] { return sum(mul(div(mul(a, b), add_scalar(square(b), 1.0)), probe)); };
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(probe_gradient(b, i, loss).rel_error() < 1e-6);
  CHECK(probe_gradient(a, 5, loss).rel_error() < 1e-6);
  CHECK_THROWS_AS(add(a, random_tensor({2, 2, 4}, 1)), ShapeError);
}

TEST_CASE("matmul, linear and conv2d gradients", "[ops]") {
  Tensor a = random_tensor({2, 3, 4}, 30, 1.0, true);
  Tensor b = random_tensor({4, 5}, 31, 1.0, true);
  Tensor bb = random_tensor({2, 4, 5}, 32, 1.0, true);
  Tensor probe = random_tensor({2, 3, 5}, 33);
  auto l1 = [&] { return sum(mul(add(matmul(a, b), matmul(a, bb)), probe)); };
  CHECK(probe_gradient(a, 7, l1).rel_error() < 1e-6);
  CHECK(probe_gradient(b, 3, l1).rel_error() < 1e-6);
  CHECK(probe_gradient(bb, 11, l1).rel_error() < 1e-6);

  Tensor w = random_tensor({5, 4}, 34, 1.0, true);
  Tensor bias = random_tensor({5}, 35, 1.0, true);
  auto l2 = [&] { return sum(mul(linear(a, w, bias), probe)); };
  CHECK(probe_gradient(w, 6, l2).rel_error() < 1e-6);
  CHECK(probe_gradient(bias, 2, l2).rel_error() < 1e-6);
  CHECK(probe_gradient(a, 1, l2).rel_error() < 1e-6);

  Tensor x = random_tensor({2, 3, 6, 6}, 36, 1.0, true);
  Tensor cw = random_tensor({4, 3, 3, 3}, 37, 1.0, true);
  Tensor cb = random_tensor({4}, 38, 1.0, true);
  for (int64_t stride : {1, 2}) {
    Tensor cprobe = random_tensor(conv2d(x.detach(), cw.detach(), cb.detach(), stride, 1).shape(), 39);
    auto l3 = [&] { return sum(mul(conv2d(x, cw, cb, stride, 1), cprobe)); };
    CHECK(probe_gradient(x, 17, l3).rel_error() < 1e-6);
    CHECK(probe_gradient(cw, 40, l3).rel_error() < 1e-6);
    CHECK(probe_gradient(cb, 3, l3).rel_error() < 1e-6);
  }
}

TEST_CASE("conv2d matches a direct loop", "[ops]") {
  Tensor x = random_tensor({1, 2, 5, 5}, 50);
  Tensor w = random_tensor({3, 2, 3, 3}, 51);
  Tensor b = random_tensor({3}, 52);
  Tensor y = conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == Shape{1, 3, 3, 3});
  for (int64_t co = 0; co < 3; ++co)
    for (int64_t oy = 0; oy < 3; ++oy)
      for (int64_t ox = 0; ox < 3; ++ox) {
        double acc = b[co];
        for (int64_t ci = 0; ci < 2; ++ci)
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * x[(ci * 5 + iy) * 5 + ix];
            }
        CHECK(y[(co * 3 + oy) * 3 + ox] == Catch::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("crop_resize is linear and differentiable", "[ops]") {
  Tensor x = random_tensor({2, 2, 8, 8}, 60, 1.0, true);
  std::vector<Box> boxes{{0.1, 0.2, 0.7, 0.9}, {0.0, 0.0, 1.0, 1.0}};
  Tensor probe = random_tensor({2, 2, 5, 6}, 61);
  auto loss = [&] { return sum(mul(crop_resize(x, boxes, 5, 6), probe)); };
  for (int64_t idx : {int64_t{10}, int64_t{70}, int64_t{200}}) CHECK(probe_gradient(x, idx, loss).rel_error() < 1e-6);

  // Full box at native resolution is the identity resampling.
  Tensor same = crop_resize(x.detach(), {{0, 0, 1, 1}, {0, 0, 1, 1}}, 8, 8);
  CHECK(idportrait::testing::max_abs_diff(same, x.detach()) < 1e-12);
}

TEST_CASE("graph bookkeeping", "[ops]") {
  Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = sum(mul(p, p));
  y.backward();
  CHECK(p.grad()[0] == 2.0);
  CHECK(p.grad()[1] == 4.0);
  sum(p).backward();
  CHECK(p.grad()[0] == 3.0);  // accumulates

  {
    NoGradGuard ng;
    Tensor z = mul(p, p);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK_THROWS_AS(mul(p, p).backward(), ShapeError);
  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({1, 3})), DegenerateInputError);
  CHECK_THROWS_AS(reshape(p, {3}), ShapeError);
}
