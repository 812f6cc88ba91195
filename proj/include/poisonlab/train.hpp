#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/models.hpp"
#include "poisonlab/optim.hpp"

namespace poisonlab {

enum class LrSchedule { constant, cosine_annealing };
enum class Augmentation { crop, hflip, rotation };

std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);
std::string to_string(Augmentation a);
Augmentation augmentation_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 40;
  OptimizerId optimizer_id = OptimizerId::sgd;
  double learning_rate = 0.1;
  LrSchedule lr_schedule = LrSchedule::cosine_annealing;
  int batch_size = 128;
  std::vector<Augmentation> augmentations = {Augmentation::crop, Augmentation::hflip};
  uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const;
  std::string to_json() const;
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(double last_finite)
      : std::runtime_error("training diverged; last finite loss " + std::to_string(last_finite)),
        last_finite_loss(last_finite) {}
  double last_finite_loss;
};

// Called after every epoch with the epoch index and the live model; lets
// defenses record per-example loss traces without a second training path.
using EpochObserver = std::function<void(int epoch, const ModelHandle&)>;

// Empirical-risk minimization with mini-batch SGD-family updates. Returns a
// handle whose digest records initial/final loss and accuracies. `init`
// continues from existing weights (architectures must agree).
ModelHandle train_classifier(const LabeledDataset& data, const ModelSpec& spec,
                             const TrainConfig& config, const ModelHandle* init = nullptr,
                             const LabeledDataset* eval_set = nullptr,
                             const EpochObserver& observer = nullptr);

// POOD pretraining; identical mechanics, lineage "pretrained-on-POOD".
// Callers are responsible for running assert_class_disjoint first; the
// pipeline refuses to reach this stage otherwise.
ModelHandle pretrain_surrogate(const LabeledDataset& pood, const ModelSpec& spec,
                               const TrainConfig& config,
                               const LabeledDataset* eval_set = nullptr);

// Two-stage surrogate construction, step two: appends a dedicated head unit
// for the target class and fine-tunes the whole network on the single-class
// target data. epochs == 0 returns the surrogate unchanged.
ModelHandle poi_warmup(const ModelHandle& surrogate, const LabeledDataset& target_data,
                       int epochs, const TrainConfig& config);

// One finite cross-entropy value per example, order-aligned with indices.
std::vector<float> loss_per_example(const ModelHandle& model, const LabeledDataset& data);

// Accuracy (fraction in [0,1]) of argmax predictions on a dataset.
double accuracy(const ModelHandle& model, const LabeledDataset& data);

// Batch assembly with the train-time augmentations (crop shift, hflip,
// rotation), exposed for the synthesis loop and tests.
Tensor augment_batch(const LabeledDataset& data, const std::vector<int64_t>& indices,
                     const std::vector<Augmentation>& augs, Rng& rng);

Tensor gather_batch(const LabeledDataset& data, const std::vector<int64_t>& indices);
std::vector<int> gather_labels(const LabeledDataset& data, const std::vector<int64_t>& indices);

}  // namespace poisonlab
