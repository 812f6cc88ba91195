#include <doctest.h>

#include <cmath>
#include <numbers>

#include "poisonlab/dct.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

using namespace poisonlab;

namespace {

// Independent O(n^4) DCT-II oracle, straight from the definition.
void dct2_brute(const float* plane, double* coef, int h, int w) {
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      const double su = std::sqrt((u == 0 ? 1.0 : 2.0) / h);
      const double sv = std::sqrt((v == 0 ? 1.0 : 2.0) / w);
      double acc = 0.0;
      for (int x = 0; x < h; ++x)
        for (int y = 0; y < w; ++y)
          acc += static_cast<double>(plane[x * w + y]) *
                 std::cos(std::numbers::pi * (2.0 * x + 1.0) * u / (2.0 * h)) *
                 std::cos(std::numbers::pi * (2.0 * y + 1.0) * v / (2.0 * w));
      coef[u * w + v] = su * sv * acc;
    }
}

Tensor random_plane(int c, int h, int w, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Tensor t({c, h, w});
  Rng rng(seed);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniformf(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  t.fill(2.0f);
  CHECK(t.sum() == doctest::Approx(48.0));
  t.clamp_(0.0f, 1.0f);
  CHECK(t.max_abs() == 1.0f);
  Tensor u = t;
  CHECK(u.bitwise_equal(t));
  u[0] = 0.5f;
  CHECK_FALSE(u.bitwise_equal(t));
  CHECK_THROWS(t.reshaped({5, 5}));
  CHECK(t.reshaped({4, 6}).dim(0) == 4);
}

TEST_CASE("separable DCT matches the brute-force oracle") {
  const int h = 8, w = 8;
  Tensor plane = random_plane(1, h, w, 42);
  std::vector<double> fast(h * w), brute(h * w);
  dct2(plane.data(), fast.data(), h, w);
  dct2_brute(plane.data(), brute.data(), h, w);
  for (int i = 0; i < h * w; ++i) CHECK(fast[i] == doctest::Approx(brute[i]).epsilon(1e-10));
}

TEST_CASE("DCT round trip reproduces the plane") {
  const int h = 16, w = 16;
  Tensor plane = random_plane(1, h, w, 7);
  std::vector<double> coef(h * w);
  std::vector<float> back(h * w);
  dct2(plane.data(), coef.data(), h, w);
  idct2(coef.data(), back.data(), h, w);
  for (int i = 0; i < h * w; ++i)
    CHECK(back[i] == doctest::Approx(plane[i]).epsilon(1e-6));
}

TEST_CASE("Parseval: coefficient energy equals pixel energy") {
  Tensor img = random_plane(3, 32, 32, 11, 0.0f, 1.0f);
  auto mags = dct2_magnitudes(img);
  double coef_energy = 0.0;
  for (double m : mags) coef_energy += m * m;
  CHECK(coef_energy == doctest::Approx(img.sq_norm()).epsilon(1e-6));
}

TEST_CASE("constant image concentrates at DC") {
  Tensor img = Tensor::full({1, 8, 8}, 0.37f);
  auto mags = dct2_magnitudes(img);
  CHECK(mags[0] == doctest::Approx(0.37 * 8.0).epsilon(1e-6));  // s0*s0*sum = mean*n
  for (size_t i = 1; i < mags.size(); ++i) CHECK(std::abs(mags[i]) < 1e-9);
  CHECK(high_band_energy_fraction(img, 2) < 1e-12);
}

TEST_CASE("impulse spreads energy across the spectrum") {
  Tensor img({1, 8, 8});
  img.at(0, 3, 5) = 1.0f;
  std::vector<double> brute(64);
  dct2_brute(img.data(), brute.data(), 8, 8);
  auto mags = dct2_magnitudes(img);
  for (int i = 0; i < 64; ++i)
    CHECK(mags[static_cast<size_t>(i)] == doctest::Approx(std::abs(brute[i])).epsilon(1e-10));
  // Far from DC-concentrated: the high bands carry a large share.
  CHECK(high_band_energy_fraction(img, (8 + 8 - 2) / 3) > 0.5);
}
