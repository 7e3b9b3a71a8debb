#include <doctest.h>

#include <random>
#include <vector>

#include "eegvlm/kernels/kernels.hpp"
#include "eegvlm/kernels/reference.hpp"

namespace k = eegvlm::kernels;
namespace ref = eegvlm::kernels::reference;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("gemm matches the serial loops for every transpose combination") {
  const int m = 13, n = 17, kk = 29;
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      CAPTURE(ta);
      CAPTURE(tb);
      const auto a = noise(static_cast<std::size_t>(m) * kk, 1);
      const auto b = noise(static_cast<std::size_t>(kk) * n, 2);
      auto c1 = noise(static_cast<std::size_t>(m) * n, 3);
      auto c2 = c1;
      k::gemm(ta, tb, m, n, kk, a, b, c1, true);
      ref::gemm(ta, tb, m, n, kk, a, b, c2, true);
      CHECK(max_abs_diff(c1, c2) < 1e-12);

      k::gemm(ta, tb, m, n, kk, a, b, c1, false);
      ref::gemm(ta, tb, m, n, kk, a, b, c2, false);
      CHECK(max_abs_diff(c1, c2) < 1e-12);
    }
  }
}

TEST_CASE("gemm hand example") {
  const std::vector<double> a{1, 2, 3, 4};     // [[1,2],[3,4]]
  const std::vector<double> b{5, 6, 7, 8};     // [[5,6],[7,8]]
  std::vector<double> c(4, 0.0);
  k::gemm(false, false, 2, 2, 2, a, b, c, false);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
  k::gemm(true, false, 2, 2, 2, a, b, c, false);
  CHECK(c == std::vector<double>{26, 30, 38, 44});
}

TEST_CASE("conv forward and backward agree with direct loops") {
  const k::ConvGeometry geoms[] = {
      {3, 11, 9, 4, 3, 1, 1},
      {2, 12, 12, 5, 7, 2, 3},
      {4, 8, 10, 6, 1, 2, 0},
  };
  std::uint64_t seed = 10;
  for (const auto& g : geoms) {
    CAPTURE(g.kernel);
    const auto in = noise(g.input_size(), seed++);
    const auto w = noise(g.weight_size(), seed++);
    const auto gout = noise(g.output_size(), seed++);

    std::vector<double> out1(g.output_size()), out2(g.output_size()), scratch;
    k::conv2d_forward(g, in, w, out1, scratch);
    ref::conv2d_forward(g, in, w, out2);
    CHECK(max_abs_diff(out1, out2) < 1e-12);

    std::vector<double> gin1(g.input_size()), gin2(g.input_size());
    auto gw1 = noise(g.weight_size(), seed);
    auto gw2 = gw1;
    k::conv2d_backward(g, in, w, gout, gin1, gw1, scratch);
    ref::conv2d_backward(g, in, w, gout, gin2, gw2);
    CHECK(max_abs_diff(gin1, gin2) < 1e-12);
    CHECK(max_abs_diff(gw1, gw2) < 1e-12);
  }
}

TEST_CASE("conv backward is the adjoint of forward") {
  // <conv(x), y> == <x, conv^T(y)> for the input gradient.
  const k::ConvGeometry g{2, 9, 7, 3, 3, 2, 1};
  const auto x = noise(g.input_size(), 40);
  const auto w = noise(g.weight_size(), 41);
  const auto y = noise(g.output_size(), 42);
  std::vector<double> out(g.output_size()), gin(g.input_size()), gw(g.weight_size(), 0.0), scratch;
  k::conv2d_forward(g, x, w, out, scratch);
  k::conv2d_backward(g, x, w, y, gin, gw, scratch);
  double lhs = 0.0, rhs = 0.0, wdot = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) lhs += out[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gin[i];
  for (std::size_t i = 0; i < w.size(); ++i) wdot += w[i] * gw[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  // Convolution is bilinear, so the weight gradient contracts to the same value.
  CHECK(lhs == doctest::Approx(wdot).epsilon(1e-12));
}

TEST_CASE("maxpool forward matches reference, backward routes to argmax") {
  const k::PoolGeometry g{3, 9, 11, 3, 2, 1};
  const auto in = noise(static_cast<std::size_t>(g.channels) * g.in_height * g.in_width, 77);
  const std::size_t out_n = static_cast<std::size_t>(g.channels) * g.out_height() * g.out_width();
  std::vector<double> o1(out_n), o2(out_n);
  std::vector<int> a1(out_n), a2(out_n);
  k::maxpool_forward(g, in, o1, a1);
  ref::maxpool_forward(g, in, o2, a2);
  CHECK(o1 == o2);
  CHECK(a1 == a2);
  for (std::size_t i = 0; i < out_n; ++i) CHECK(in[a1[i]] == o1[i]);

  std::vector<double> gout(out_n, 1.0), gin(in.size(), 0.0);
  k::maxpool_backward(g, gout, a1, gin);
  double total = 0.0;
  for (double v : gin) total += v;
  CHECK(total == doctest::Approx(static_cast<double>(out_n)));
}
