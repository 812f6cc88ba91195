#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "poisonlab/dct.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/synthgen.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

LabeledDataset toy(int per_class = 15, int classes = 3, uint64_t seed = 23, int size = 8) {
  SynthCorpusSpec spec;
  spec.corpus_seed = seed;
  spec.num_classes = classes;
  spec.height = spec.width = size;
  spec.name = "df";
  return generate_corpus(spec, per_class, seed + 1, "train");
}

ModelHandle small_trained(const LabeledDataset& data, uint64_t seed, int epochs = 2) {
  ModelSpec spec;
  spec.architecture_id = "resnet_desk";
  spec.num_classes = data.num_classes();
  spec.input_shape = data.image_shape();
  spec.width = 8;
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 16;
  cfg.augmentations = {};
  cfg.seed = seed;
  return train_classifier(data, spec, cfg);
}

}  // namespace

TEST_CASE("frequency features satisfy Parseval and DC concentration") {
  LabeledDataset data = toy(4, 2, 29);
  Tensor feats = frequency_features(data.images);
  REQUIRE(feats.dim(0) == data.size());
  const int64_t d = feats.dim(1);
  for (int64_t i = 0; i < data.size(); ++i) {
    double coef_energy = 0.0, pix_energy = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      coef_energy += static_cast<double>(feats[i * d + j]) * feats[i * d + j];
      pix_energy += static_cast<double>(data.images[i * d + j]) * data.images[i * d + j];
    }
    CHECK(coef_energy == doctest::Approx(pix_energy).epsilon(1e-6));
  }

  Tensor flat({1, 1, 8, 8});
  flat.fill(0.25f);
  Tensor f = frequency_features(flat);
  CHECK(f[0] == doctest::Approx(0.25 * 8.0).epsilon(1e-6));
  for (int64_t j = 1; j < f.dim(1); ++j) CHECK(std::abs(f[j]) < 1e-9);
}

TEST_CASE("threshold detector never flags lowpass-projected triggers") {
  const int cutoff = 6;
  ConstraintSet lowpass = ConstraintSet::lowpass_band(cutoff);
  Rng rng(31);
  const int n = 16;
  Tensor images({n, 3, 16, 16});
  for (int i = 0; i < n; ++i) {
    Tensor p({3, 16, 16});
    for (int64_t j = 0; j < p.size(); ++j) p[j] = rng.uniformf(-0.2f, 0.2f);
    p = project(lowpass, p);
    // Present the trigger itself on a gray background: the constant offset
    // only adds DC, so out-of-band energy stays exactly zero.
    for (int64_t j = 0; j < p.size(); ++j) images[static_cast<int64_t>(i) * p.size() + j] = 0.5f + p[j];
  }
  FrequencyDetector det;
  det.mode = FrequencyDetector::Mode::threshold;
  det.cutoff = cutoff;
  det.trained = true;
  auto result = frequency_detect(det, images);
  for (int flag : result.flags) CHECK(flag == 0);
}

TEST_CASE("trained linear detector separates noisy from clean and round-trips") {
  LabeledDataset clean = toy(150, 2, 37, 8);
  DetectorTrainOptions opts;
  opts.seed = 3;
  opts.epochs = 20;
  FrequencyDetector det = train_frequency_detector(clean, FrequencyDetector::Mode::linear, opts);
  REQUIRE(det.trained);

  // Evaluation: fresh clean images vs the same images plus dense noise.
  LabeledDataset eval = toy(20, 2, 37, 8);
  const int64_t n = eval.size();
  const int64_t d = eval.images.dim(1) * eval.images.dim(2) * eval.images.dim(3);
  Tensor images({2 * n, eval.images.dim(1), eval.images.dim(2), eval.images.dim(3)});
  std::vector<int> truth(static_cast<size_t>(2 * n), 0);
  Rng rng(5);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      images[i * d + j] = eval.images[i * d + j];
      float noisy = eval.images[i * d + j] + rng.uniformf(-16.0f / 255.0f, 16.0f / 255.0f);
      images[(n + i) * d + j] = std::clamp(noisy, 0.0f, 1.0f);
    }
    truth[static_cast<size_t>(n + i)] = 1;
  }
  auto result = frequency_detect(det, images, &truth);
  CHECK(result.detection_acc > 85.0);
  CHECK(result.detection_rate > 85.0);

  const auto stem = (fs::temp_directory_path() / "pl_det").string();
  det.save(stem);
  FrequencyDetector back = FrequencyDetector::load(stem);
  auto again = frequency_detect(back, images, &truth);
  CHECK(again.flags == result.flags);
  fs::remove(stem + ".json");
  fs::remove(stem + ".w");

  FrequencyDetector untrained;
  CHECK_THROWS_AS(frequency_detect(untrained, images), std::runtime_error);
}

TEST_CASE("fine-pruning with zero budget and zero fine-tuning is the identity") {
  LabeledDataset data = toy();
  ModelHandle model = small_trained(data, 1);
  EvalContext eval;
  eval.test_set = &data;
  eval.trigger = nullptr;
  eval.target_class = 0;

  PruneRule rule;
  rule.max_fraction = 0.0;
  TrainConfig ft;
  ft.augmentations = {};
  auto [pruned, report] = fine_prune(model, data, rule, 0, ft, eval);

  auto a = model.net->state();
  auto b = pruned.net->state();
  for (size_t i = 0; i < a.size(); ++i) CHECK(b[i].value->bitwise_equal(*a[i].value));
  CHECK(report.pre_metrics.acc == report.post_metrics.acc);
}

TEST_CASE("pruned units are exactly the bottom-k by mean activation") {
  LabeledDataset data = toy();
  ModelHandle model = small_trained(data, 2);
  EvalContext eval;
  eval.test_set = &data;
  eval.trigger = nullptr;
  eval.target_class = 0;

  // Independent recomputation of the ranking basis.
  auto activations = mean_feature_activation(model, data);
  std::vector<int64_t> order(activations.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return activations[a] < activations[b]; });

  PruneRule rule;
  rule.max_fraction = 0.25;
  rule.acc_drop_cap = 1000.0;  // no early stop: the budget decides
  TrainConfig ft;
  ft.augmentations = {};
  auto [pruned, report] = fine_prune(model, data, rule, 0, ft, eval);

  auto* head = dynamic_cast<nn::Linear*>(pruned.net->layers.back().get());
  REQUIRE(head != nullptr);
  const int64_t units = head->w.dim(1);
  const int64_t budget = static_cast<int64_t>(std::floor(0.25 * units));
  std::vector<int64_t> zeroed;
  for (int64_t u = 0; u < units; ++u) {
    bool all_zero = true;
    for (int64_t o = 0; o < head->w.dim(0); ++o)
      if (head->w[o * units + u] != 0.0f) all_zero = false;
    if (all_zero) zeroed.push_back(u);
  }
  std::vector<int64_t> expect(order.begin(), order.begin() + budget);
  std::sort(expect.begin(), expect.end());
  CHECK(zeroed == expect);
}

TEST_CASE("accuracy-drop cap halts pruning before the budget") {
  LabeledDataset data = toy(20, 3, 41);
  ModelHandle model = small_trained(data, 3, 3);
  EvalContext eval;
  eval.test_set = &data;
  eval.trigger = nullptr;
  eval.target_class = 0;
  PruneRule rule;
  rule.max_fraction = 1.0;
  rule.acc_drop_cap = 5.0;
  rule.reevaluate_every = 1;
  TrainConfig ft;
  ft.augmentations = {};
  auto [pruned, report] = fine_prune(model, data, rule, 0, ft, eval);
  // Pruning everything would send accuracy to chance; the cap must keep the
  // final clean accuracy within reach of the baseline.
  CHECK(report.post_metrics.acc >= report.pre_metrics.acc - 5.0 - 1e-9);
}

TEST_CASE("loss isolation recovers planted low-loss examples exactly") {
  const int64_t n = 200;
  LossTrace trace;
  trace.per_epoch.assign(3, std::vector<float>(static_cast<size_t>(n), 2.0f));
  PoisonPlan plan;
  plan.target_class = 1;
  plan.indices = {12, 57, 88, 143};
  for (int64_t i : plan.indices) trace.per_epoch[2][static_cast<size_t>(i)] = 0.01f;

  DefenseReport rep = abl_isolate(trace, 4.0 / 200.0, 0.5, plan);
  REQUIRE(rep.has_isolation);
  CHECK(rep.isolated_indices == plan.indices);
  CHECK(rep.poisoned_among_isolated == 4);
}

TEST_CASE("isolation count is ceil(rate*N), padded past the threshold when needed") {
  const int64_t n = 100;
  LossTrace trace;
  trace.per_epoch.assign(1, std::vector<float>(static_cast<size_t>(n)));
  for (int64_t i = 0; i < n; ++i)
    trace.per_epoch[0][static_cast<size_t>(i)] = 1.0f + 0.01f * static_cast<float>(i);
  PoisonPlan plan;
  plan.indices = {};
  // Threshold excludes everything; the rule pads with the next-lowest losses.
  DefenseReport rep = abl_isolate(trace, 0.033, 0.5, plan);
  CHECK(rep.isolated_indices.size() == 4);  // ceil(3.3)
  CHECK(rep.isolated_indices == std::vector<int64_t>{0, 1, 2, 3});
}

TEST_CASE("all-equal losses tie-break deterministically by index") {
  const int64_t n = 50;
  LossTrace trace;
  trace.per_epoch.assign(2, std::vector<float>(static_cast<size_t>(n), 0.3f));
  PoisonPlan plan;
  DefenseReport a = abl_isolate(trace, 0.1, 0.5, plan);
  DefenseReport b = abl_isolate(trace, 0.1, 0.5, plan);
  CHECK(a.isolated_indices == b.isolated_indices);
  CHECK(a.isolated_indices == std::vector<int64_t>{0, 1, 2, 3, 4});
}

TEST_CASE("empty loss history is rejected") {
  LossTrace trace;
  PoisonPlan plan;
  CHECK_THROWS_WITH_AS(abl_isolate(trace, 0.01, 0.5, plan), doctest::Contains("early epochs"),
                       std::invalid_argument);
}

TEST_CASE("target-class members among isolated are counted when labels are given") {
  const int64_t n = 40;
  LossTrace trace;
  trace.per_epoch.assign(1, std::vector<float>(static_cast<size_t>(n), 1.0f));
  trace.per_epoch[0][7] = 0.01f;
  trace.per_epoch[0][9] = 0.02f;
  std::vector<int> labels(static_cast<size_t>(n), 0);
  labels[7] = 1;
  PoisonPlan plan;
  plan.target_class = 1;
  plan.indices = {9};
  DefenseReport rep = abl_isolate(trace, 0.05, 0.5, plan, &labels);
  CHECK(rep.isolated_indices == std::vector<int64_t>{7, 9});
  CHECK(rep.poisoned_among_isolated == 1);
  CHECK(rep.target_class_among_isolated == 1);
}

TEST_CASE("defense registry reports plug-in slots") {
  CHECK_FALSE(defense_registered("neural_cleanse"));
  DefenseContext ctx;
  CHECK_THROWS_WITH_AS(run_defense("neural_cleanse", ctx), doctest::Contains("not registered"),
                       std::invalid_argument);
  register_defense("custom_noop", [](const DefenseContext&) {
    DefenseReport r;
    r.defense_id = "custom_noop";
    return r;
  });
  CHECK(defense_registered("custom_noop"));
  DefenseReport r = run_defense("custom_noop", ctx);
  CHECK(r.defense_id == "custom_noop");
}
