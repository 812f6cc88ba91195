#include <doctest.h>

#include "poisonlab/poison.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/synthgen.hpp"

using namespace poisonlab;

namespace {

LabeledDataset toy(int per_class = 10, int classes = 4, uint64_t seed = 2) {
  SynthCorpusSpec spec;
  spec.corpus_seed = seed;
  spec.num_classes = classes;
  spec.height = spec.width = 8;
  spec.name = "po";
  return generate_corpus(spec, per_class, seed + 5, "train");
}

TriggerArtifact small_trigger(const std::vector<int64_t>& shape, double eps, uint64_t seed) {
  TriggerArtifact t;
  t.constraint = ConstraintSet::linf_ball(eps);
  Tensor p({shape[0], shape[1], shape[2]});
  Rng rng(seed);
  for (int64_t i = 0; i < p.size(); ++i) p[i] = rng.uniformf(-1.0f, 1.0f);
  t.pattern = project(t.constraint, p);
  t.target_class = 1;
  return t;
}

}  // namespace

TEST_CASE("clean-label poisoning touches exactly the planned images and no labels") {
  LabeledDataset base = toy();
  TriggerArtifact trigger = small_trigger(base.image_shape(), 16.0 / 255.0, 7);
  PoisonPlan plan = select_poison_indices(base, 1, 3.0 / 40.0, 0);
  REQUIRE(plan.indices.size() == 3);

  PoisonedDataset poisoned = craft_clean_label_poison(base, trigger, plan);
  CHECK(poisoned.attack_kind == AttackKind::narcissus);
  CHECK(poisoned.data.labels == base.labels);

  // Exhaustive per-pixel diff: the planned indices move by at most epsilon,
  // everything else is untouched.
  const int64_t d = base.images.dim(1) * base.images.dim(2) * base.images.dim(3);
  for (int64_t i = 0; i < base.size(); ++i) {
    float dev = 0.0f;
    for (int64_t j = 0; j < d; ++j)
      dev = std::max(dev,
                     std::abs(poisoned.data.images[i * d + j] - base.images[i * d + j]));
    if (std::binary_search(plan.indices.begin(), plan.indices.end(), i)) {
      CHECK(dev <= 16.0f / 255.0f + 1e-7f);
      CHECK(dev > 0.0f);
    } else {
      CHECK(dev == 0.0f);
    }
  }
}

TEST_CASE("single-element plan changes exactly one image") {
  LabeledDataset base = toy();
  TriggerArtifact trigger = small_trigger(base.image_shape(), 16.0 / 255.0, 8);
  PoisonPlan plan = select_poison_indices(base, 1, 1.0 / 40.0, 1);
  REQUIRE(plan.indices.size() == 1);
  PoisonedDataset poisoned = craft_clean_label_poison(base, trigger, plan);
  auto report = verify_clean_label(base, poisoned.data);
  CHECK(report.modified_indices.size() == 1);
  CHECK(report.modified_indices[0] == plan.indices[0]);
}

TEST_CASE("plans from a different dataset are rejected by digest") {
  LabeledDataset base = toy();
  LabeledDataset other = toy(10, 4, 99);
  TriggerArtifact trigger = small_trigger(base.image_shape(), 16.0 / 255.0, 9);
  PoisonPlan plan = select_poison_indices(other, 1, 3.0 / 40.0, 0);
  CHECK_THROWS_WITH_AS(craft_clean_label_poison(base, trigger, plan),
                       doctest::Contains("digest"), std::invalid_argument);
}

TEST_CASE("badnets stamps the corner exactly; dirty mode flips labels") {
  LabeledDataset base = toy();
  Tensor patch = default_badnets_patch(3, 3, 1.0f);
  PoisonPlan plan = select_poison_indices(base, 1, 4.0 / 40.0, 3);
  PoisonedDataset clean = craft_badnets(base, patch, plan, false);
  CHECK(clean.attack_kind == AttackKind::badnets_c);
  CHECK(clean.data.labels == base.labels);

  const auto shape = base.image_shape();
  for (int64_t i : plan.indices) {
    for (int64_t c = 0; c < shape[0]; ++c)
      for (int64_t y = 0; y < shape[1]; ++y)
        for (int64_t x = 0; x < shape[2]; ++x) {
          const float got = clean.data.images[((i * shape[0] + c) * shape[1] + y) * shape[2] + x];
          const float was = base.images[((i * shape[0] + c) * shape[1] + y) * shape[2] + x];
          if (y >= shape[1] - 3 && x >= shape[2] - 3)
            CHECK(got == 1.0f);  // stamped region equals the patch exactly
          else
            CHECK(got == was);  // rest untouched
        }
  }

  PoisonPlan dirty_plan = select_dirty_indices(base, 1, 4.0 / 40.0, 3);
  PoisonedDataset dirty = craft_badnets(base, patch, dirty_plan, true);
  for (int64_t i : dirty_plan.indices) {
    CHECK(base.labels[static_cast<size_t>(i)] != 1);
    CHECK(dirty.data.labels[static_cast<size_t>(i)] == 1);
  }
  auto report = verify_clean_label(base, dirty.data);
  CHECK_FALSE(report.labels_identical);  // negative control
  CHECK(report.label_changed_indices.size() == dirty_plan.indices.size());
}

TEST_CASE("zero-intensity badnets patch on black corners leaves labels and counts intact") {
  LabeledDataset base = toy();
  // Zero the corners first so a zero patch is a no-op.
  const auto shape = base.image_shape();
  for (int64_t i = 0; i < base.size(); ++i)
    for (int64_t c = 0; c < shape[0]; ++c)
      for (int64_t y = shape[1] - 3; y < shape[1]; ++y)
        for (int64_t x = shape[2] - 3; x < shape[2]; ++x)
          base.images[((i * shape[0] + c) * shape[1] + y) * shape[2] + x] = 0.0f;
  Tensor patch = default_badnets_patch(3, 3, 0.0f);
  PoisonPlan plan = select_poison_indices(base, 2, 2.0 / 40.0, 4);
  PoisonedDataset out = craft_badnets(base, patch, plan, false);
  auto report = verify_clean_label(base, out.data);
  CHECK(report.modified_indices.empty());
  CHECK(report.labels_identical);
}

TEST_CASE("blend interpolates exactly at the alpha endpoints") {
  LabeledDataset base = toy();
  Tensor asset = default_blend_asset(base.image_shape());
  PoisonPlan plan = select_poison_indices(base, 1, 3.0 / 40.0, 5);

  PoisonedDataset zero = craft_blend(base, asset, 0.0, plan, false);
  CHECK(zero.data.images.bitwise_equal(base.images));

  PoisonedDataset one = craft_blend(base, asset, 1.0, plan, false);
  const int64_t d = base.images.dim(1) * base.images.dim(2) * base.images.dim(3);
  for (int64_t i : plan.indices)
    for (int64_t j = 0; j < d; ++j)
      CHECK(one.data.images[i * d + j] == asset[j]);

  // Deviation bound matches the documented blend budget: alpha * max|b - x|.
  PoisonedDataset mid = craft_blend(base, asset, 51.0 / 255.0, plan, false);
  auto report = verify_clean_label(base, mid.data);
  CHECK(report.max_linf_deviation <= 51.0 / 255.0 + 1e-6);
  CHECK(report.labels_identical);

  CHECK_THROWS_AS(craft_blend(base, asset, 1.5, plan, false), std::invalid_argument);
}

TEST_CASE("verify_clean_label on identical datasets reports nothing") {
  LabeledDataset base = toy();
  auto report = verify_clean_label(base, base);
  CHECK(report.modified_indices.empty());
  CHECK(report.labels_identical);
  CHECK(report.max_linf_deviation == 0.0);
}

TEST_CASE("poisoning is deterministic given plan and trigger") {
  LabeledDataset base = toy();
  TriggerArtifact trigger = small_trigger(base.image_shape(), 16.0 / 255.0, 11);
  PoisonPlan plan = select_poison_indices(base, 1, 3.0 / 40.0, 6);
  PoisonedDataset a = craft_clean_label_poison(base, trigger, plan);
  PoisonedDataset b = craft_clean_label_poison(base, trigger, plan);
  CHECK(a.data.digest() == b.data.digest());
  CHECK(a.trigger_digest == b.trigger_digest);
}
