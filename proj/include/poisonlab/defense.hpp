#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/metrics.hpp"
#include "poisonlab/models.hpp"
#include "poisonlab/train.hpp"
#include "poisonlab/trigger.hpp"

namespace poisonlab {

// What a defense needs to score itself: the attacked model's evaluation
// surface (clean test set plus the deployed trigger).
struct EvalContext {
  const LabeledDataset* test_set = nullptr;
  const TriggerArtifact* trigger = nullptr;
  int target_class = 0;
  double magnify_scale = 3.0;

  MetricsReport measure(const ModelHandle& model) const;
};

struct DefenseReport {
  std::string defense_id;
  // model-repair family
  bool has_post = false;
  MetricsReport pre_metrics, post_metrics;
  // detector family
  bool has_detection = false;
  double detection_acc = 0.0, detection_rate = 0.0;
  // isolation family
  bool has_isolation = false;
  std::vector<int64_t> isolated_indices;
  int64_t poisoned_among_isolated = 0;
  int64_t target_class_among_isolated = 0;

  std::string to_json() const;
};

// ---------------------------------------------------------------------------
// Fine-pruning: rank the final feature units by mean activation over a clean
// defense set, zero the least active ones (stopping before the clean-accuracy
// drop exceeds the cap), then optionally fine-tune with the mask held.

struct PruneRule {
  double max_fraction = 0.9;    // largest share of units that may be pruned
  double acc_drop_cap = 20.0;   // cumulative clean-accuracy drop cap, percent points
  int reevaluate_every = 4;     // prune batch size between accuracy probes
};

// Mean post-activation per final-feature unit over a dataset (ranking basis,
// also used by tests to re-derive the pruned set independently).
std::vector<double> mean_feature_activation(const ModelHandle& model, const LabeledDataset& data);

std::pair<ModelHandle, DefenseReport> fine_prune(const ModelHandle& model,
                                                 const LabeledDataset& defense_set,
                                                 const PruneRule& rule, int finetune_epochs,
                                                 const TrainConfig& finetune,
                                                 const EvalContext& eval);

// ---------------------------------------------------------------------------
// Frequency-domain detection.

// Per-image DCT coefficient magnitudes (per channel, flattened): (N, C*H*W).
Tensor frequency_features(const Tensor& images);

struct FrequencyDetector {
  enum class Mode { linear, threshold };
  Mode mode = Mode::linear;
  bool trained = false;
  int cutoff = -1;  // threshold-mode band edge; -1 resolves like lowpass constraints
  double energy_threshold = 1e-8;
  // linear mode
  Tensor w;
  float b = 0.0f;
  Tensor feat_mean, feat_inv_std;

  void save(const std::string& path_stem) const;
  static FrequencyDetector load(const std::string& path_stem);
};

struct DetectorTrainOptions {
  uint64_t seed = 0;
  int epochs = 12;
  double learning_rate = 0.05;
  int cutoff = -1;
};

// Trains the linear detector on the clean set versus on-the-fly synthetic
// perturbations (random patches, random bounded noise). Threshold mode needs
// no training data beyond the cutoff.
FrequencyDetector train_frequency_detector(const LabeledDataset& clean,
                                           FrequencyDetector::Mode mode,
                                           const DetectorTrainOptions& options);

struct DetectionResult {
  std::vector<int> flags;            // 1 = flagged poisoned
  double detection_acc = -1.0;       // filled when ground truth given
  double detection_rate = -1.0;      // recall on poisoned
};

DetectionResult frequency_detect(const FrequencyDetector& detector, const Tensor& images,
                                 const std::vector<int>* poisoned_truth = nullptr);

// ---------------------------------------------------------------------------
// Loss-based isolation (anti-backdoor-learning style).

struct LossTrace {
  std::vector<std::vector<float>> per_epoch;  // [epoch][example]
  int64_t examples() const { return per_epoch.empty() ? 0 : static_cast<int64_t>(per_epoch.front().size()); }
};

// Isolates ceil(rate * N) examples with the lowest early-training loss,
// preferring those under the loss threshold and padding with the next-lowest;
// ties break by (loss, index). The report counts planted poisons among them,
// and target-class members when labels are supplied.
DefenseReport abl_isolate(const LossTrace& trace, double isolation_rate, double loss_threshold,
                          const PoisonPlan& plan, const std::vector<int>* labels = nullptr);

// Optional unlearning stage: gradient ascent on the isolated examples.
ModelHandle abl_unlearn(const ModelHandle& model, const LabeledDataset& data,
                        const std::vector<int64_t>& isolated, int epochs, double learning_rate);

// ---------------------------------------------------------------------------
// Plug-in registry.

struct DefenseContext {
  const ModelHandle* model = nullptr;
  const LabeledDataset* poisoned_train = nullptr;
  const LabeledDataset* defense_set = nullptr;
  const PoisonPlan* plan = nullptr;
  EvalContext eval;
};

using DefenseFn = std::function<DefenseReport(const DefenseContext&)>;

void register_defense(const std::string& id, DefenseFn fn);
bool defense_registered(const std::string& id);
DefenseReport run_defense(const std::string& id, const DefenseContext& ctx);
std::vector<std::string> registered_defenses();

}  // namespace poisonlab
