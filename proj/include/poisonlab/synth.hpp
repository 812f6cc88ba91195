#pragma once

#include <string>

#include "poisonlab/constraint.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/models.hpp"
#include "poisonlab/optim.hpp"
#include "poisonlab/trigger.hpp"

namespace poisonlab {

struct SynthesisConfig {
  int iterations = 1000;
  double step_size = 0.01;  // optimizer learning rate (plain step size in sgd mode)
  int batch_size = 64;
  OptimizerId optimizer_id = OptimizerId::radam;
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  std::string digest() const;
};

// Mini-batch gradient descent on the surrogate's target-class loss, starting
// from the zero trigger, projecting onto the constraint set after every
// update. The surrogate runs in inference mode; gradients flow to the trigger
// only. Keeps the best iterate under the full target-set loss, so the result
// never scores worse than the zero trigger.
TriggerArtifact synthesize_trigger(const ModelHandle& surrogate,
                                   const LabeledDataset& target_data, int target_class,
                                   const ConstraintSet& constraint,
                                   const SynthesisConfig& config);

// Mean target-class cross-entropy of the surrogate over target_data with the
// given full-canvas perturbation added (no clamping, matching the synthesis
// objective).
double trigger_objective(const ModelHandle& surrogate, const LabeledDataset& target_data,
                         const Tensor& delta);

// ---------------------------------------------------------------------------
// Physical variant: expectation over transformation.

struct EOTConfig {
  int pad_min = 0, pad_max = 56;  // top/left padding range on the canvas
  double hue_delta = 0.3;         // hue shift sampled in [-hue_delta, +hue_delta]
  double rotation_degrees = 15.0;
  int samples_per_step = 4;
  int canvas = 64;
  int patch = 8;

  void validate() const;
  std::string to_json() const;
};

struct PlacementTransform {
  int l_up = 0, l_left = 0;
  int l_low = 0, l_right = 0;  // derived: (canvas - patch) - l_up / l_left
  double hue_shift = 0.0;
  double rotation_deg = 0.0;
};

PlacementTransform sample_eot_transform(const EOTConfig& config, Rng& rng);

// Applies (hue, rotation, placement) to a canvas-sized patch pattern whose
// support sits at the constraint's canonical region; returns the transformed
// canvas-sized perturbation.
Tensor eot_place(const Tensor& pattern, const ConstraintSet& patch_constraint,
                 const PlacementTransform& t);

// Adjoint of eot_place for gradient pullback.
Tensor eot_place_adjoint(const Tensor& grad_canvas, const ConstraintSet& patch_constraint,
                         const PlacementTransform& t);

// EOT synthesis: per step the gradient is averaged over samples_per_step
// sampled transforms of (image + placed patch).
TriggerArtifact synthesize_physical_trigger(const ModelHandle& surrogate,
                                            const LabeledDataset& target_data, int target_class,
                                            const EOTConfig& eot, const SynthesisConfig& config);

// Mean target-class loss over n freshly sampled transforms applied to the
// dataset's images (paired-evaluation helper for physical triggers).
double eot_mean_target_loss(const ModelHandle& surrogate, const LabeledDataset& target_data,
                            const TriggerArtifact& trigger, const EOTConfig& eot, int n_samples,
                            uint64_t seed);

// Resolves which head unit stands for the target class on this surrogate:
// the warmed-up unit when present, otherwise a fresh zero unit is appended.
ModelHandle resolve_target_head(const ModelHandle& surrogate);

}  // namespace poisonlab
