#pragma once

#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/trigger.hpp"

namespace poisonlab {

enum class AttackKind { narcissus, badnets_c, badnets_d, blend_c, blend_d, none };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);
bool is_clean_label(AttackKind k);

struct PoisonedDataset {
  LabeledDataset data;
  PoisonPlan plan;
  AttackKind attack_kind = AttackKind::none;
  std::string trigger_digest;  // trigger or patch/blend asset digest

  std::string manifest_json(const std::string& base_digest) const;
};

// Clean-label injection: images at plan indices become clamp(x + delta, 0, 1);
// every label stays untouched.
PoisonedDataset craft_clean_label_poison(const LabeledDataset& base,
                                         const TriggerArtifact& trigger, const PoisonPlan& plan);

// Corner-stamped pixel patch. Clean mode poisons target-class images keeping
// labels; dirty mode poisons non-target images and flips labels to the target.
PoisonedDataset craft_badnets(const LabeledDataset& base, const Tensor& patch,
                              const PoisonPlan& plan, bool dirty);

// poisoned = clamp((1 - alpha) x + alpha blend_image, 0, 1).
PoisonedDataset craft_blend(const LabeledDataset& base, const Tensor& blend_image, double alpha,
                            const PoisonPlan& plan, bool dirty);

struct CleanLabelReport {
  std::vector<int64_t> modified_indices;
  bool labels_identical = false;
  std::vector<int64_t> label_changed_indices;
  double max_linf_deviation = 0.0;

  std::string to_json() const;
};

CleanLabelReport verify_clean_label(const LabeledDataset& base, const LabeledDataset& poisoned);

// Shipped defaults: a white 3x3 square stamped at the bottom-right corner, and
// a seed-pinned uniform-noise blend asset.
Tensor default_badnets_patch(int channels, int size = 3, float intensity = 1.0f);
Tensor default_blend_asset(const std::vector<int64_t>& image_shape, uint64_t seed = 0xb1e7d);

}  // namespace poisonlab
