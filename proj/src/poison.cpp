#include "poisonlab/poison.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/digest.hpp"
#include "poisonlab/rng.hpp"

using json = nlohmann::json;

namespace poisonlab {

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::narcissus: return "narcissus";
    case AttackKind::badnets_c: return "badnets_c";
    case AttackKind::badnets_d: return "badnets_d";
    case AttackKind::blend_c: return "blend_c";
    case AttackKind::blend_d: return "blend_d";
    case AttackKind::none: return "none";
  }
  return "none";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "narcissus") return AttackKind::narcissus;
  if (s == "badnets_c") return AttackKind::badnets_c;
  if (s == "badnets_d") return AttackKind::badnets_d;
  if (s == "blend_c") return AttackKind::blend_c;
  if (s == "blend_d") return AttackKind::blend_d;
  if (s == "none") return AttackKind::none;
  throw std::invalid_argument("unknown attack kind: " + s);
}

bool is_clean_label(AttackKind k) {
  return k == AttackKind::narcissus || k == AttackKind::badnets_c || k == AttackKind::blend_c;
}

std::string PoisonedDataset::manifest_json(const std::string& base_digest) const {
  json j;
  j["attack_kind"] = to_string(attack_kind);
  j["base_digest"] = base_digest;
  j["trigger_digest"] = trigger_digest;
  j["plan"] = json::parse(plan.to_json());
  j["poisoned_digest"] = data.digest();
  return j.dump(2);
}

namespace {

void check_plan_against_base(const LabeledDataset& base, const PoisonPlan& plan,
                             bool expect_target_class) {
  if (!plan.dataset_digest.empty() && plan.dataset_digest != base.digest())
    throw std::invalid_argument("poison plan was built for a different dataset (digest mismatch)");
  for (int64_t i : plan.indices) {
    if (i < 0 || i >= base.size())
      throw std::invalid_argument("poison plan index out of range: " + std::to_string(i));
    const bool is_target = base.labels[static_cast<size_t>(i)] == plan.target_class;
    if (expect_target_class && !is_target)
      throw std::invalid_argument("clean-label plan holds a non-target-class index " +
                                  std::to_string(i));
    if (!expect_target_class && is_target)
      throw std::invalid_argument("dirty-label plan holds a target-class index " +
                                  std::to_string(i));
  }
}

}  // namespace

PoisonedDataset craft_clean_label_poison(const LabeledDataset& base,
                                         const TriggerArtifact& trigger, const PoisonPlan& plan) {
  trigger.validate();
  check_plan_against_base(base, plan, true);
  PoisonedDataset out;
  out.data = base;
  out.data.source_id = base.source_id + "+narcissus";
  out.plan = plan;
  out.attack_kind = AttackKind::narcissus;
  out.trigger_digest = trigger.digest();
  for (int64_t i : plan.indices)
    out.data.set_image(i, apply_trigger(base.image(i), trigger));
  return out;
}

PoisonedDataset craft_badnets(const LabeledDataset& base, const Tensor& patch,
                              const PoisonPlan& plan, bool dirty) {
  if (patch.rank() != 3) throw std::invalid_argument("craft_badnets: patch must be (C,h,w)");
  const auto shape = base.image_shape();
  if (patch.dim(0) != shape[0] || patch.dim(1) > shape[1] || patch.dim(2) > shape[2])
    throw std::invalid_argument("craft_badnets: patch does not fit the corner placement");
  check_plan_against_base(base, plan, !dirty);

  PoisonedDataset out;
  out.data = base;
  out.data.source_id = base.source_id + (dirty ? "+badnets_d" : "+badnets_c");
  out.plan = plan;
  out.attack_kind = dirty ? AttackKind::badnets_d : AttackKind::badnets_c;
  out.trigger_digest = digest_tensor(patch);

  const int64_t row0 = shape[1] - patch.dim(1);
  const int64_t col0 = shape[2] - patch.dim(2);
  for (int64_t i : plan.indices) {
    Tensor img = base.image(i);
    for (int64_t c = 0; c < patch.dim(0); ++c)
      for (int64_t y = 0; y < patch.dim(1); ++y)
        for (int64_t x = 0; x < patch.dim(2); ++x)
          img.at(c, row0 + y, col0 + x) = patch.at(c, y, x);
    img.clamp_(0.0f, 1.0f);
    out.data.set_image(i, img);
    if (dirty) out.data.labels[static_cast<size_t>(i)] = plan.target_class;
  }
  return out;
}

PoisonedDataset craft_blend(const LabeledDataset& base, const Tensor& blend_image, double alpha,
                            const PoisonPlan& plan, bool dirty) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("craft_blend: alpha outside [0,1]");
  const auto shape = base.image_shape();
  if (blend_image.rank() != 3 || blend_image.dim(0) != shape[0] ||
      blend_image.dim(1) != shape[1] || blend_image.dim(2) != shape[2])
    throw std::invalid_argument("craft_blend: blend image shape mismatch");
  check_plan_against_base(base, plan, !dirty);

  PoisonedDataset out;
  out.data = base;
  out.data.source_id = base.source_id + (dirty ? "+blend_d" : "+blend_c");
  out.plan = plan;
  out.attack_kind = dirty ? AttackKind::blend_d : AttackKind::blend_c;
  out.trigger_digest = digest_tensor(blend_image);

  const float a = static_cast<float>(alpha);
  for (int64_t i : plan.indices) {
    Tensor img = base.image(i);
    for (int64_t j = 0; j < img.size(); ++j)
      img[j] = (1.0f - a) * img[j] + a * blend_image[j];
    img.clamp_(0.0f, 1.0f);
    out.data.set_image(i, img);
    if (dirty) out.data.labels[static_cast<size_t>(i)] = plan.target_class;
  }
  return out;
}

CleanLabelReport verify_clean_label(const LabeledDataset& base, const LabeledDataset& poisoned) {
  if (base.size() != poisoned.size())
    throw std::invalid_argument("verify_clean_label: datasets differ in length");
  if (!base.images.same_shape(poisoned.images))
    throw std::invalid_argument("verify_clean_label: image shapes differ");
  CleanLabelReport r;
  const int64_t n = base.images.dim(1) * base.images.dim(2) * base.images.dim(3);
  for (int64_t i = 0; i < base.size(); ++i) {
    const float* a = base.images.data() + i * n;
    const float* b = poisoned.images.data() + i * n;
    float dev = 0.0f;
    for (int64_t j = 0; j < n; ++j) dev = std::max(dev, std::abs(a[j] - b[j]));
    if (dev > 0.0f) {
      r.modified_indices.push_back(i);
      r.max_linf_deviation = std::max(r.max_linf_deviation, static_cast<double>(dev));
    }
    if (base.labels[static_cast<size_t>(i)] != poisoned.labels[static_cast<size_t>(i)])
      r.label_changed_indices.push_back(i);
  }
  r.labels_identical = r.label_changed_indices.empty();
  return r;
}

std::string CleanLabelReport::to_json() const {
  json j;
  j["modified_indices"] = modified_indices;
  j["labels_identical"] = labels_identical;
  j["label_changed_indices"] = label_changed_indices;
  j["max_linf_deviation"] = max_linf_deviation;
  return j.dump(2);
}

Tensor default_badnets_patch(int channels, int size, float intensity) {
  Tensor p({channels, size, size});
  p.fill(intensity);
  return p;
}

Tensor default_blend_asset(const std::vector<int64_t>& image_shape, uint64_t seed) {
  Tensor t({image_shape.at(0), image_shape.at(1), image_shape.at(2)});
  Rng rng(seed);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniformf(0.0f, 1.0f);
  return t;
}

}  // namespace poisonlab
