#pragma once

#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/models.hpp"
#include "poisonlab/trigger.hpp"

namespace poisonlab {

// One experiment's attack metrics; all values are percentages in [0,100].
struct MetricsReport {
  double acc = 0.0;
  double tar_acc = 0.0;
  double asr = 0.0;
  std::vector<double> classwise_acc;
  std::string config_ref;  // run configuration digest
  std::vector<uint64_t> seed_list;

  // Stable record fields.
  std::string dataset;
  std::string attack_kind;
  double poison_ratio = 0.0;
  double epsilon = 0.0;
  double magnify_scale = 0.0;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

struct CleanEval {
  double acc = 0.0;      // percent over all test examples
  double tar_acc = 0.0;  // percent over target-class examples
  std::vector<double> classwise;
  std::vector<int64_t> class_counts;
};

CleanEval evaluate_clean(const ModelHandle& model, const LabeledDataset& test_set,
                         int target_class);

enum class AsrMode { all_to_one, one_to_one };

// Patches magnify(trigger, scale) onto every eligible test example (clamped)
// and reports the percentage predicted as the target class. Eligible means
// non-target classes in all_to_one mode, the single source class otherwise.
double evaluate_asr(const ModelHandle& model, const LabeledDataset& test_set,
                    const TriggerArtifact& trigger, int target_class, double magnify_scale,
                    AsrMode mode, int source_class = -1);

}  // namespace poisonlab
