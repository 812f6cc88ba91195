#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poisonlab/constraint.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/metrics.hpp"
#include "poisonlab/poison.hpp"
#include "poisonlab/synth.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Declarative description of one experiment; parsed from a JSON file, with
// dotted-path overrides from the command line.
struct ExperimentConfig {
  std::string run_name = "run";
  std::string out_dir = "runs/run";

  // data
  std::string train_path, test_path, pood_path;
  DatasetFormat format = DatasetFormat::tensor_file;
  std::vector<std::string> declared_overlap;

  int target_class = 2;
  double poison_ratio = 0.0005;
  AttackKind attack_kind = AttackKind::narcissus;

  // baseline attack assets
  int badnets_patch_size = 3;
  double badnets_intensity = 1.0;
  double blend_alpha = 0.2;
  uint64_t blend_seed = 0xb1e7d;

  ConstraintSet constraint;  // defaults to the 16/255 linf ball
  SynthesisConfig synthesis;
  int warmup_epochs = 5;
  TrainConfig warmup_train;    // optimizer/lr for the warm-up stage
  ModelSpec surrogate_spec;
  TrainConfig surrogate_train;
  ModelSpec victim_spec;
  TrainConfig victim_train;

  double magnify_scale = 3.0;
  std::vector<std::string> defenses;
  std::vector<uint64_t> seeds = {0, 1, 2};

  // defense stage knobs
  int finetune_epochs = 30;
  double finetune_lr = 0.01;
  int abl_early_epochs = 8;
  double abl_isolation_rate = 0.01;
  double abl_loss_threshold = 0.5;

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& dotted_overrides = {});
  std::string to_json() const;
  std::string digest() const;
  // Checks paths exist, seeds nonempty, enums valid; throws ConfigError.
  void validate() const;
};

// One repetition's outcome inside a run record.
struct SeedOutcome {
  uint64_t seed = 0;
  std::string plan_digest;
  std::string poisoned_digest;
  std::string victim_id;
  MetricsReport metrics;
};

struct RunRecord {
  std::string config_digest;
  std::string train_digest, test_digest, pood_digest;
  std::string surrogate_id, warmed_id;
  std::string trigger_digest;
  std::vector<SeedOutcome> outcomes;
  MetricsReport aggregate;  // mean over seeds
  std::string to_json() const;
};

// Executes pretrain -> warm-up -> synthesize -> poison -> train victim ->
// evaluate -> defenses, persisting every intermediate artifact with digests
// under the run directory. Stage failures persist a failure record and
// rethrow as StageError.
RunRecord run_pipeline(const ExperimentConfig& config);

struct TradeoffPoint {
  double target_class_ratio = 0.0;
  double acc = 0.0, tar_acc = 0.0, asr = 0.0;
  uint64_t seed = 0;
};

// One full train+evaluate run per target-class ratio (ascending); errors are
// annotated with the failing ratio.
std::vector<TradeoffPoint> tradeoff_sweep(const ExperimentConfig& base,
                                          const std::vector<double>& target_class_ratios);

enum class ReportFormat { table, curve };

// Renders records (JSONL of MetricsReport objects) into a comparison table or
// a ratio-vs-metric curve file with monotonicity annotations.
void emit_report(const std::vector<std::string>& record_paths, ReportFormat format,
                 const std::string& out_path);

// Run-scoped helpers shared by the CLI's stage subcommands.
LabeledDataset load_config_dataset(const ExperimentConfig& cfg, const std::string& which);

}  // namespace poisonlab
