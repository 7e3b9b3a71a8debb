#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "eegvlm/align.hpp"
#include "eegvlm/error.hpp"

using namespace eegvlm;
using align::expand;
using align::ProjectionW;
using align::PatchTokens;
using align::EncoderRegistry;
using align::EncoderOptions;
using align::embed_visual;

namespace {

nn::Tensor random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  nn::Tensor t({rows, cols});
  for (double& v : t.data) v = dist(rng);
  return t;
}

nn::Tensor matrix(int rows, int cols, std::vector<double> values) {
  nn::Tensor t({rows, cols});
  t.data = std::move(values);
  return t;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::IoFailure;
}

}  // namespace

TEST_CASE("expand replicates the row") {
  const auto h = matrix(1, 3, {1, 2, 3});
  CHECK(expand(h, 2).data == std::vector<double>{1, 2, 3, 1, 2, 3});
  CHECK(expand(h, 2).shape == std::vector<int>{2, 3});
  CHECK(expand(h, 1).data == h.data);
  CHECK(code_of([&] { expand(h, 0); }) == ErrorCode::InvalidP);
  CHECK(code_of([&] { expand(matrix(2, 1, {1, 2}), 3); }) == ErrorCode::ShapeMismatch);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 1 + static_cast<int>(rng() % 40), p = 1 + static_cast<int>(rng() % 30);
    const auto row = random_matrix(1, d, rng);
    const auto e = expand(row, p);
    for (int r = 0; r < p; ++r) {
      for (int j = 0; j < d; ++j) CHECK(e.data[r * d + j] == row.data[j]);
    }
  }
}

TEST_CASE("align worked examples and errors") {
  const auto hv = matrix(2, 2, {1, 0, 0, 1});
  CHECK(align::align(hv, matrix(1, 2, {2, 3})).data == std::vector<double>{3, 3, 2, 4});
  CHECK(align::align(hv, matrix(1, 2, {0, 0})).data == hv.data);
  CHECK(code_of([&] { align::align(hv, matrix(1, 3, {1, 2, 3})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("align algebra on random shapes") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int p = 1 + static_cast<int>(rng() % 64), d = 1 + static_cast<int>(rng() % 48);
    const auto hv = random_matrix(p, d, rng);
    const auto hf = random_matrix(1, d, rng);
    const auto out = align::align(hv, hf);
    REQUIRE(out.shape == std::vector<int>{p, d});
    for (int r = 0; r < p; ++r) {
      for (int j = 0; j < d; ++j) {
        const std::size_t i = static_cast<std::size_t>(r) * d + j;
        CHECK(std::abs(out.data[i] - (hv.data[i] + hf.data[j])) <= 1e-12);
        CHECK(std::abs((out.data[i] - hv.data[i]) - hf.data[j]) <= 1e-12);
      }
    }
    CHECK(align::align(hv, nn::Tensor({1, d})).data == hv.data);
    CHECK(align::align(nn::Tensor({p, d}), hf).data == expand(hf, p).data);
  }
}

TEST_CASE("projection arithmetic on a hand-set 2-3-2 network") {
  ProjectionW w(2, 2, 0, 3);
  CHECK(w.hidden_dim() == 3);
  w.layer1().weight().value = {1, 2, -1, 0.5, 0, -3};  // [3, 2]
  w.layer1().bias().value = {0, 0.5, 0};
  w.layer2().weight().value = {1, -1, 2, 0.5, 0.25, 1};  // [2, 3]
  w.layer2().bias().value = {0.1, -0.2};
  const auto y = w.project(matrix(1, 2, {1, 0}));
  // hidden pre-activation: [1, -0.5, 0]
  const double g1 = nn::gelu(1.0), g2 = nn::gelu(-0.5), g3 = nn::gelu(0.0);
  CHECK(g3 == 0.0);
  CHECK(g1 == doctest::Approx(0.5 * (1 + std::erf(1 / std::numbers::sqrt2))));
  CHECK(y.data[0] == doctest::Approx(1 * g1 - 1 * g2 + 2 * g3 + 0.1).epsilon(1e-14));
  CHECK(y.data[1] == doctest::Approx(0.5 * g1 + 0.25 * g2 + 1 * g3 - 0.2).epsilon(1e-14));

  for (auto* p : {&w.layer1().bias(), &w.layer2().bias()}) std::fill(p->value.begin(), p->value.end(), 0.0);
  for (double v : w.project(matrix(1, 2, {0, 0})).data) CHECK(v == 0.0);
  CHECK(code_of([&] { w.project(matrix(1, 3, {1, 2, 3})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("projection rows are independent and parameters are shared") {
  ProjectionW w(8, 5, 11);
  std::mt19937_64 rng(3);
  const auto many = random_matrix(6, 8, rng);
  const auto out = w.project(many);
  CHECK(out.shape == std::vector<int>{6, 5});
  for (int r = 0; r < 6; ++r) {
    nn::Tensor row({1, 8});
    std::copy(many.data.begin() + r * 8, many.data.begin() + (r + 1) * 8, row.data.begin());
    const auto single = w.project(row);
    for (int j = 0; j < 5; ++j) CHECK(single.data[j] == doctest::Approx(out.data[r * 5 + j]).epsilon(1e-14));
  }

  PatchTokens zv;
  zv.tokens = random_matrix(4, 8, rng);
  std::vector<double> zf(8, 0.3);
  const auto before = embed_visual(zv, zf, w);
  CHECK(before.h_f_prime.shape == before.h_v.shape);
  w.layer2().weight().value[0] += 0.5;
  const auto after = embed_visual(zv, zf, w);
  CHECK(after.h_v.data != before.h_v.data);
  CHECK(after.h_f.data != before.h_f.data);
}

TEST_CASE("projection backward matches finite differences") {
  ProjectionW w(6, 4, 5, 7);
  std::mt19937_64 rng(6);
  const auto z = random_matrix(3, 6, rng);
  const auto r = random_matrix(3, 4, rng);
  auto loss = [&](const nn::Tensor& input) {
    const auto y = w.project(input);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * r.data[i];
    return s;
  };
  ProjectionW::Cache cache;
  w.forward(z, &cache);
  for (auto* p : w.params()) p->zero_grad();
  const auto dz = w.backward(r, cache);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp.data[i] += h;
    zm.data[i] -= h;
    CHECK(dz.data[i] == doctest::Approx((loss(zp) - loss(zm)) / (2 * h)).epsilon(1e-6));
  }
  for (auto* p : w.params()) {
    for (std::size_t i = 0; i < p->value.size(); i += 3) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = loss(z);
      p->value[i] = orig - h;
      const double down = loss(z);
      p->value[i] = orig;
      CHECK(p->grad[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
    }
  }
}

TEST_CASE("toy encoder: patch count, determinism and trace coverage") {
  auto& registry = EncoderRegistry::global();
  CHECK(registry.is_known("clip-vit-l14"));
  CHECK_FALSE(registry.is_available("clip-vit-l14"));
  CHECK(code_of([&] { registry.create("clip-vit-l14", {}); }) == ErrorCode::EncoderUnavailable);
  CHECK(code_of([&] { registry.create("nope", {}); }) == ErrorCode::EncoderUnavailable);

  EncoderOptions opts;
  opts.feature_dim = 32;
  opts.seed = 4;
  const auto enc = registry.create("toy-patch", opts);
  CHECK(enc->feature_dim() == 32);

  render::RenderConfig cfg;
  std::vector<double> samples(3000);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = 120.0 * std::sin(2 * std::numbers::pi * 0.1 * i / 100.0);
  const auto trace = render::render_samples(samples, cfg);
  render::EpochImage blank = trace;
  std::fill(blank.pixels.begin(), blank.pixels.end(), 255);

  const auto a = enc->encode(trace);
  const auto b = enc->encode(trace);
  CHECK(a.count() == 256);
  CHECK(a.grid_rows == 16);
  CHECK(a.tokens.data == b.tokens.data);
  const auto empty = enc->encode(blank);

  // Patches the polyline passes through, from the renderer's own coordinates.
  std::set<int> crossed;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int col = static_cast<int>(render::sample_to_x(i, samples.size(), cfg)) / 14;
    const int row = static_cast<int>(render::amplitude_to_y(samples[i], cfg)) / 14;
    crossed.insert(row * 16 + col);
  }
  REQUIRE(crossed.size() >= 16);
  for (int p = 0; p < 256; ++p) {
    bool differs = false;
    for (int j = 0; j < 32; ++j) differs |= a.tokens.data[p * 32 + j] != empty.tokens.data[p * 32 + j];
    if (crossed.count(p)) CHECK(differs);
  }

  render::EpochImage odd = trace;
  odd.width = 100;
  odd.height = 100;
  odd.pixels.resize(100 * 100 * 3);
  CHECK(code_of([&] { enc->encode(odd); }) == ErrorCode::ShapeMismatch);
}
