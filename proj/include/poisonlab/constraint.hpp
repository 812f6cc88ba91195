#pragma once

#include <map>
#include <string>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

enum class ConstraintKind { linf, lowpass, patch };

std::string to_string(ConstraintKind k);
ConstraintKind constraint_kind_from_string(const std::string& s);

// The allowable trigger set, enforced by projection.
//   linf:    every component in [-epsilon, +epsilon]
//   lowpass: per-channel DCT coefficients with u+v > cutoff are zero
//   patch:   support confined to a patch_h x patch_w region at (patch_row, patch_col)
struct ConstraintSet {
  ConstraintKind kind = ConstraintKind::linf;
  double epsilon = 16.0 / 255.0;
  int cutoff = -1;  // lowpass band limit; -1 means (H + W - 2) / 3 at projection time
  int patch_h = 8, patch_w = 8;
  int patch_row = 0, patch_col = 0;

  static ConstraintSet linf_ball(double eps) {
    ConstraintSet c;
    c.kind = ConstraintKind::linf;
    c.epsilon = eps;
    return c;
  }
  static ConstraintSet lowpass_band(int cutoff) {
    ConstraintSet c;
    c.kind = ConstraintKind::lowpass;
    c.cutoff = cutoff;
    return c;
  }
  static ConstraintSet patch_region(int h, int w, int row = 0, int col = 0) {
    ConstraintSet c;
    c.kind = ConstraintKind::patch;
    c.patch_h = h;
    c.patch_w = w;
    c.patch_row = row;
    c.patch_col = col;
    return c;
  }

  int effective_cutoff(int h, int w) const { return cutoff >= 0 ? cutoff : (h + w - 2) / 3; }

  // Serialized into trigger sidecars; keys are stable.
  std::map<std::string, std::string> params() const;
  static ConstraintSet from_params(ConstraintKind kind,
                                   const std::map<std::string, std::string>& params);
};

// Projection onto the constraint set. Total on valid shapes; idempotent.
Tensor project(const ConstraintSet& c, const Tensor& pattern);

// Membership within tolerance (exact structural checks where applicable).
bool satisfies(const ConstraintSet& c, const Tensor& pattern, double tol = 1e-6);

}  // namespace poisonlab
