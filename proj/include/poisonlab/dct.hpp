#pragma once

#include <cstdint>
#include <vector>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

// Orthonormal 2-D DCT-II per channel plane. Transforms run in double with a
// fixed summation order, so projecting an already-in-band pattern reproduces
// its float32 bits exactly.
//
// Coefficient (u, v) of an h x w plane:
//   c[u][v] = s(u) s(v) sum_{x,y} p[x][y] cos(pi (2x+1) u / (2h)) cos(pi (2y+1) v / (2w))
// with s(0) = sqrt(1/n), s(k) = sqrt(2/n).

// plane: h*w row-major floats -> coef: h*w row-major doubles.
void dct2(const float* plane, double* coef, int h, int w);
void idct2(const double* coef, float* plane, int h, int w);

// All-channel coefficient magnitudes of a (C,H,W) image, flattened C*H*W.
std::vector<double> dct2_magnitudes(const Tensor& image);

// Fraction of total squared-coefficient energy in bands u+v > cutoff.
// Returns 0 when the plane has no energy at all.
double high_band_energy_fraction(const Tensor& image, int cutoff);

}  // namespace poisonlab
