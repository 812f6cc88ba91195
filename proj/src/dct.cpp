#include "poisonlab/dct.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

namespace poisonlab {

namespace {

// basis[k * n + i] = s(k) cos(pi (2i+1) k / (2n))
const std::vector<double>& basis_matrix(int n) {
  static std::mutex mu;
  static std::map<int, std::vector<double>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> b(static_cast<size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    double s = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
    for (int i = 0; i < n; ++i)
      b[static_cast<size_t>(k) * n + i] =
          s * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * n));
  }
  return cache.emplace(n, std::move(b)).first->second;
}

}  // namespace

void dct2(const float* plane, double* coef, int h, int w) {
  const auto& bh = basis_matrix(h);
  const auto& bw = basis_matrix(w);
  // tmp[u][y] = sum_x bh[u][x] * plane[x][y]
  std::vector<double> tmp(static_cast<size_t>(h) * w, 0.0);
  for (int u = 0; u < h; ++u)
    for (int x = 0; x < h; ++x) {
      double b = bh[static_cast<size_t>(u) * h + x];
      const float* row = plane + static_cast<size_t>(x) * w;
      double* trow = tmp.data() + static_cast<size_t>(u) * w;
      for (int y = 0; y < w; ++y) trow[y] += b * row[y];
    }
  // coef[u][v] = sum_y tmp[u][y] * bw[v][y]
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      double acc = 0.0;
      const double* trow = tmp.data() + static_cast<size_t>(u) * w;
      const double* brow = bw.data() + static_cast<size_t>(v) * w;
      for (int y = 0; y < w; ++y) acc += trow[y] * brow[y];
      coef[static_cast<size_t>(u) * w + v] = acc;
    }
}

void idct2(const double* coef, float* plane, int h, int w) {
  const auto& bh = basis_matrix(h);
  const auto& bw = basis_matrix(w);
  // tmp[x][v] = sum_u bh[u][x] * coef[u][v]
  std::vector<double> tmp(static_cast<size_t>(h) * w, 0.0);
  for (int x = 0; x < h; ++x)
    for (int u = 0; u < h; ++u) {
      double b = bh[static_cast<size_t>(u) * h + x];
      const double* crow = coef + static_cast<size_t>(u) * w;
      double* trow = tmp.data() + static_cast<size_t>(x) * w;
      for (int v = 0; v < w; ++v) trow[v] += b * crow[v];
    }
  for (int x = 0; x < h; ++x)
    for (int y = 0; y < w; ++y) {
      double acc = 0.0;
      const double* trow = tmp.data() + static_cast<size_t>(x) * w;
      for (int v = 0; v < w; ++v) acc += trow[v] * bw[static_cast<size_t>(v) * w + y];
      plane[static_cast<size_t>(x) * w + y] = static_cast<float>(acc);
    }
}

std::vector<double> dct2_magnitudes(const Tensor& image) {
  if (image.rank() != 3) throw std::invalid_argument("dct2_magnitudes: expected (C,H,W)");
  const int c = static_cast<int>(image.dim(0));
  const int h = static_cast<int>(image.dim(1));
  const int w = static_cast<int>(image.dim(2));
  std::vector<double> out(static_cast<size_t>(c) * h * w);
  std::vector<double> coef(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    dct2(image.data() + static_cast<size_t>(ch) * h * w, coef.data(), h, w);
    for (size_t i = 0; i < coef.size(); ++i)
      out[static_cast<size_t>(ch) * h * w + i] = std::abs(coef[i]);
  }
  return out;
}

double high_band_energy_fraction(const Tensor& image, int cutoff) {
  if (image.rank() != 3) throw std::invalid_argument("high_band_energy_fraction: expected (C,H,W)");
  const int c = static_cast<int>(image.dim(0));
  const int h = static_cast<int>(image.dim(1));
  const int w = static_cast<int>(image.dim(2));
  std::vector<double> coef(static_cast<size_t>(h) * w);
  double total = 0.0, high = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    dct2(image.data() + static_cast<size_t>(ch) * h * w, coef.data(), h, w);
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v) {
        double e = coef[static_cast<size_t>(u) * w + v];
        e *= e;
        total += e;
        if (u + v > cutoff) high += e;
      }
  }
  return total > 0.0 ? high / total : 0.0;
}

}  // namespace poisonlab
