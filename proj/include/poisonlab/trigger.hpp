#pragma once

#include <optional>
#include <string>

#include "poisonlab/constraint.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

// Where a patch-kind pattern lands on the canvas when applied. Full-canvas
// patterns (linf, lowpass) ignore placement.
struct Placement {
  int row = 0;
  int col = 0;
};

// A synthesized perturbation pattern plus its constraint metadata and
// provenance. `pattern` is (C,H,W); for patch constraints the support sits at
// the constraint's canonical region and placement moves it at apply time.
struct TriggerArtifact {
  Tensor pattern;
  ConstraintSet constraint;
  int target_class = 0;
  std::string surrogate_id;
  std::string synthesis_config_digest;
  double magnify_scale = 1.0;  // 1.0 until magnified; recorded test budget

  // project(constraint, pattern) must return pattern bit-exactly.
  void validate() const;
  std::string digest() const;
};

// <path>.f32: raw little-endian float32 payload.
// <path>.meta: text sidecar, "key=value" per line (shape, constraint, ids).
void save_trigger(const TriggerArtifact& artifact, const std::string& path_stem);
TriggerArtifact load_trigger(const std::string& path_stem);

// clamp(image + placed pattern, 0, 1). For patch kinds the pattern support is
// moved to `placement` (default: the constraint's canonical region).
Tensor apply_trigger(const Tensor& image, const TriggerArtifact& trigger,
                     std::optional<Placement> placement = std::nullopt);

// Test-time magnification: scales the pattern without re-projection; the
// recorded constraint metadata keeps the training budget and gains the scale.
TriggerArtifact magnify(const TriggerArtifact& trigger, double scale);

}  // namespace poisonlab
