#include "poisonlab/constraint.hpp"

#include <cmath>
#include <stdexcept>

#include "poisonlab/dct.hpp"

namespace poisonlab {

namespace {

// Largest float not exceeding the real-valued budget. float(16/255) rounds
// up, and 3 * float(16/255) already overshoots 48/255; clamping one ulp lower
// keeps both the training and the magnified test budget exactly honest.
float float_budget(double eps) {
  float f = static_cast<float>(eps);
  if (static_cast<double>(f) > eps) f = std::nextafter(f, 0.0f);
  return f;
}

}  // namespace

std::string to_string(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::linf: return "linf";
    case ConstraintKind::lowpass: return "lowpass";
    case ConstraintKind::patch: return "patch";
  }
  return "linf";
}

ConstraintKind constraint_kind_from_string(const std::string& s) {
  if (s == "linf") return ConstraintKind::linf;
  if (s == "lowpass") return ConstraintKind::lowpass;
  if (s == "patch") return ConstraintKind::patch;
  throw std::invalid_argument("unknown constraint kind: " + s);
}

std::map<std::string, std::string> ConstraintSet::params() const {
  std::map<std::string, std::string> p;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", epsilon);
  switch (kind) {
    case ConstraintKind::linf:
      p["epsilon"] = buf;
      break;
    case ConstraintKind::lowpass:
      p["cutoff"] = std::to_string(cutoff);
      break;
    case ConstraintKind::patch:
      p["patch_h"] = std::to_string(patch_h);
      p["patch_w"] = std::to_string(patch_w);
      p["patch_row"] = std::to_string(patch_row);
      p["patch_col"] = std::to_string(patch_col);
      break;
  }
  return p;
}

ConstraintSet ConstraintSet::from_params(ConstraintKind kind,
                                         const std::map<std::string, std::string>& params) {
  ConstraintSet c;
  c.kind = kind;
  auto get = [&](const char* key, double fallback) {
    auto it = params.find(key);
    return it == params.end() ? fallback : std::stod(it->second);
  };
  switch (kind) {
    case ConstraintKind::linf:
      c.epsilon = get("epsilon", c.epsilon);
      break;
    case ConstraintKind::lowpass:
      c.cutoff = static_cast<int>(get("cutoff", -1));
      break;
    case ConstraintKind::patch:
      c.patch_h = static_cast<int>(get("patch_h", 8));
      c.patch_w = static_cast<int>(get("patch_w", 8));
      c.patch_row = static_cast<int>(get("patch_row", 0));
      c.patch_col = static_cast<int>(get("patch_col", 0));
      break;
  }
  return c;
}

Tensor project(const ConstraintSet& c, const Tensor& pattern) {
  if (pattern.rank() != 3) throw std::invalid_argument("project: expected (C,H,W) pattern");
  const int ch = static_cast<int>(pattern.dim(0));
  const int h = static_cast<int>(pattern.dim(1));
  const int w = static_cast<int>(pattern.dim(2));
  Tensor out = pattern;
  switch (c.kind) {
    case ConstraintKind::linf: {
      const float eps = float_budget(c.epsilon);
      out.clamp_(-eps, eps);
      break;
    }
    case ConstraintKind::lowpass: {
      // In-band coefficients snap to a fixed 2^-16 grid before
      // reconstruction. Re-projecting a projected pattern re-derives
      // coefficients within ~1e-6 of the grid points, so they round back to
      // the same values and the float output reproduces bit-for-bit;
      // without the snapping, rounding noise straddles the half-ulp
      // boundary and idempotence only holds approximately.
      const double grid = 1.0 / 65536.0;
      const int cut = c.effective_cutoff(h, w);
      std::vector<double> coef(static_cast<size_t>(h) * w);
      for (int p = 0; p < ch; ++p) {
        float* plane = out.data() + static_cast<size_t>(p) * h * w;
        dct2(plane, coef.data(), h, w);
        for (int u = 0; u < h; ++u)
          for (int v = 0; v < w; ++v) {
            double& cv = coef[static_cast<size_t>(u) * w + v];
            cv = (u + v > cut) ? 0.0 : std::nearbyint(cv / grid) * grid;
          }
        idct2(coef.data(), plane, h, w);
      }
      break;
    }
    case ConstraintKind::patch: {
      if (c.patch_row + c.patch_h > h || c.patch_col + c.patch_w > w)
        throw std::invalid_argument("project: patch region exceeds canvas");
      for (int p = 0; p < ch; ++p)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            bool inside = y >= c.patch_row && y < c.patch_row + c.patch_h && x >= c.patch_col &&
                          x < c.patch_col + c.patch_w;
            if (!inside) out.at(p, y, x) = 0.0f;
          }
      break;
    }
  }
  return out;
}

bool satisfies(const ConstraintSet& c, const Tensor& pattern, double tol) {
  if (pattern.rank() != 3) return false;
  const int ch = static_cast<int>(pattern.dim(0));
  const int h = static_cast<int>(pattern.dim(1));
  const int w = static_cast<int>(pattern.dim(2));
  switch (c.kind) {
    case ConstraintKind::linf:
      return static_cast<double>(pattern.max_abs()) <= c.epsilon + tol;
    case ConstraintKind::lowpass: {
      const int cut = c.effective_cutoff(h, w);
      std::vector<double> coef(static_cast<size_t>(h) * w);
      double out_of_band = 0.0, total = 0.0;
      for (int p = 0; p < ch; ++p) {
        dct2(pattern.data() + static_cast<size_t>(p) * h * w, coef.data(), h, w);
        for (int u = 0; u < h; ++u)
          for (int v = 0; v < w; ++v) {
            double e = coef[static_cast<size_t>(u) * w + v];
            e *= e;
            total += e;
            if (u + v > cut) out_of_band += e;
          }
      }
      return total == 0.0 || out_of_band <= tol * total;
    }
    case ConstraintKind::patch: {
      for (int p = 0; p < ch; ++p)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            bool inside = y >= c.patch_row && y < c.patch_row + c.patch_h && x >= c.patch_col &&
                          x < c.patch_col + c.patch_w;
            if (!inside && pattern.at(p, y, x) != 0.0f) return false;
          }
      return true;
    }
  }
  return false;
}

}  // namespace poisonlab
