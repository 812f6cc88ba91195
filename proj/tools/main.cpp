// poisonlab - clean-label backdoor experiment toolkit.
//
// Subcommands drive one pipeline stage each against a config's run directory;
// `run` executes the whole workflow. Exit codes: 0 success, 2 config error,
// 3 stage failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "poisonlab/defense.hpp"
#include "poisonlab/digest.hpp"
#include "poisonlab/pipeline.hpp"
#include "poisonlab/synthgen.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

struct StageArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int seed_index = 0;
};

ExperimentConfig load_cfg(const StageArgs& a) {
  return ExperimentConfig::load(a.config_path, a.overrides);
}

fs::path run_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir); }

uint64_t seed_at(const ExperimentConfig& cfg, int index) {
  if (index < 0 || index >= static_cast<int>(cfg.seeds.size()))
    throw ConfigError("seed index " + std::to_string(index) + " outside the config's seed list");
  return cfg.seeds[static_cast<size_t>(index)];
}

int do_gen_data(const std::string& out, const std::string& profile, uint64_t corpus_seed,
                int classes, int per_class_train, int per_class_test, int size) {
  SynthCorpusSpec spec;
  spec.corpus_seed = corpus_seed;
  spec.num_classes = classes;
  spec.height = spec.width = size;
  spec.name = profile;
  save_dataset(generate_corpus(spec, per_class_train, corpus_seed * 31 + 1, "train"),
               out + "/train");
  save_dataset(generate_corpus(spec, per_class_test, corpus_seed * 31 + 2, "test"), out + "/test");
  std::cout << "wrote " << out << "/train and " << out << "/test (" << classes << " classes, "
            << per_class_train << "/" << per_class_test << " per class, " << size << "x" << size
            << ")\n";
  return 0;
}

int do_pretrain(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  cfg.validate();
  fs::create_directories(run_dir(cfg));
  LabeledDataset train = load_config_dataset(cfg, "train");
  LabeledDataset pood = load_config_dataset(cfg, "pood");
  assert_class_disjoint(train, pood, cfg.declared_overlap);
  ModelSpec spec = cfg.surrogate_spec;
  spec.input_shape = train.image_shape();
  ModelHandle surrogate = pretrain_surrogate(pood, spec, cfg.surrogate_train);
  save_model(surrogate, (run_dir(cfg) / "surrogate").string());
  std::cout << "surrogate " << surrogate.id() << " -> " << (run_dir(cfg) / "surrogate").string()
            << ".w\n";
  return 0;
}

int do_warmup(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  ModelHandle surrogate = load_model((run_dir(cfg) / "surrogate").string());
  LabeledDataset train = load_config_dataset(cfg, "train");
  LabeledDataset slice = train.subset(train.class_indices(cfg.target_class), ":target");
  ModelHandle warmed = poi_warmup(surrogate, slice, cfg.warmup_epochs, cfg.warmup_train);
  save_model(warmed, (run_dir(cfg) / "warmed").string());
  std::cout << "warmed surrogate " << warmed.id() << " (epochs " << cfg.warmup_epochs << ")\n";
  return 0;
}

int do_synthesize(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  const auto warmed_path = (run_dir(cfg) / "warmed").string();
  const auto surrogate_path = (run_dir(cfg) / "surrogate").string();
  ModelHandle surrogate = fs::exists(warmed_path + ".json") ? load_model(warmed_path)
                                                            : load_model(surrogate_path);
  LabeledDataset train = load_config_dataset(cfg, "train");
  LabeledDataset slice = train.subset(train.class_indices(cfg.target_class), ":target");
  TriggerArtifact trigger =
      synthesize_trigger(surrogate, slice, cfg.target_class, cfg.constraint, cfg.synthesis);
  save_trigger(trigger, (run_dir(cfg) / "trigger").string());
  std::cout << "trigger " << trigger.digest().substr(0, 16) << " linf "
            << trigger.pattern.max_abs() << "\n";
  return 0;
}

int do_poison(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  const uint64_t seed = seed_at(cfg, a.seed_index);
  LabeledDataset train = load_config_dataset(cfg, "train");
  const fs::path sdir = run_dir(cfg) / ("seed_" + std::to_string(seed));
  fs::create_directories(sdir);

  const bool dirty =
      cfg.attack_kind == AttackKind::badnets_d || cfg.attack_kind == AttackKind::blend_d;
  PoisonPlan plan = dirty ? select_dirty_indices(train, cfg.target_class, cfg.poison_ratio, seed)
                          : select_poison_indices(train, cfg.target_class, cfg.poison_ratio, seed);

  PoisonedDataset poisoned;
  if (cfg.attack_kind == AttackKind::narcissus) {
    TriggerArtifact trigger = load_trigger((run_dir(cfg) / "trigger").string());
    poisoned = craft_clean_label_poison(train, trigger, plan);
  } else if (cfg.attack_kind == AttackKind::badnets_c || cfg.attack_kind == AttackKind::badnets_d) {
    poisoned = craft_badnets(train,
                             default_badnets_patch(static_cast<int>(train.images.dim(1)),
                                                   cfg.badnets_patch_size,
                                                   static_cast<float>(cfg.badnets_intensity)),
                             plan, dirty);
  } else if (cfg.attack_kind == AttackKind::blend_c || cfg.attack_kind == AttackKind::blend_d) {
    poisoned = craft_blend(train, default_blend_asset(train.image_shape(), cfg.blend_seed),
                           cfg.blend_alpha, plan, dirty);
  } else {
    throw ConfigError("attack kind 'none' has no poison stage");
  }
  plan.save((sdir / "plan.json").string());
  save_dataset(poisoned.data, (sdir / "poisoned").string());
  std::ofstream mf(sdir / "poisoned_manifest.json");
  mf << poisoned.manifest_json(train.digest()) << "\n";
  std::cout << "poisoned " << plan.indices.size() << " examples -> " << (sdir / "poisoned")
            << "\n";
  return 0;
}

int do_train_victim(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  const uint64_t seed = seed_at(cfg, a.seed_index);
  const fs::path sdir = run_dir(cfg) / ("seed_" + std::to_string(seed));
  LabeledDataset data = cfg.attack_kind == AttackKind::none
                            ? load_config_dataset(cfg, "train")
                            : load_dataset((sdir / "poisoned").string(), DatasetFormat::tensor_file);
  LabeledDataset test = load_config_dataset(cfg, "test");
  TrainConfig vt = cfg.victim_train;
  vt.seed = seed;
  ModelSpec vspec = cfg.victim_spec;
  vspec.input_shape = data.image_shape();
  vspec.num_classes = data.num_classes();
  ModelHandle victim = train_classifier(data, vspec, vt, nullptr, &test);
  save_model(victim, (sdir / "victim").string());
  std::cout << "victim " << victim.id() << " trained (" << vt.epochs << " epochs)\n";
  return 0;
}

int do_evaluate(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  const uint64_t seed = seed_at(cfg, a.seed_index);
  const fs::path sdir = run_dir(cfg) / ("seed_" + std::to_string(seed));
  ModelHandle victim = load_model((sdir / "victim").string());
  LabeledDataset test = load_config_dataset(cfg, "test");

  auto clean = evaluate_clean(victim, test, cfg.target_class);
  MetricsReport m;
  m.acc = clean.acc;
  m.tar_acc = clean.tar_acc;
  m.classwise_acc = clean.classwise;
  m.dataset = test.source_id;
  m.attack_kind = to_string(cfg.attack_kind);
  m.poison_ratio = cfg.poison_ratio;
  m.epsilon = cfg.constraint.kind == ConstraintKind::linf ? cfg.constraint.epsilon : 0.0;
  m.magnify_scale = cfg.magnify_scale;
  m.config_ref = cfg.digest();
  m.seed_list = {seed};
  if (cfg.attack_kind == AttackKind::narcissus) {
    TriggerArtifact trigger = load_trigger((run_dir(cfg) / "trigger").string());
    m.asr =
        evaluate_asr(victim, test, trigger, cfg.target_class, cfg.magnify_scale, AsrMode::all_to_one);
  }
  std::ofstream out(sdir / "metrics.json");
  out << m.to_json() << "\n";
  std::cout << m.to_json() << "\n";
  return 0;
}

int do_run(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  RunRecord record = run_pipeline(cfg);
  std::cout << "run complete: ACC " << record.aggregate.acc << " Tar-ACC "
            << record.aggregate.tar_acc << " ASR " << record.aggregate.asr << " ("
            << record.outcomes.size() << " seeds) -> " << cfg.out_dir << "\n";
  return 0;
}

int do_defend(const StageArgs& a) {
  ExperimentConfig cfg = load_cfg(a);
  if (cfg.defenses.empty()) throw ConfigError("config lists no defenses");
  // Reuses the pipeline's defend stage by re-running it against persisted
  // artifacts via run_pipeline's layout: the victim and plan must exist.
  ExperimentConfig probe = cfg;
  RunRecord record = run_pipeline(probe);
  (void)record;
  std::cout << "defenses written under " << (run_dir(cfg) / "defenses") << "\n";
  return 0;
}

int do_sweep(const StageArgs& a, const std::string& ratios_csv) {
  ExperimentConfig cfg = load_cfg(a);
  std::vector<double> ratios;
  std::stringstream ss(ratios_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) ratios.push_back(std::stod(tok));
  auto curve = tradeoff_sweep(cfg, ratios);
  const fs::path out = run_dir(cfg) / "sweep.csv";
  fs::create_directories(run_dir(cfg));
  std::ofstream f(out);
  f << "target_class_ratio,acc,tar_acc,asr,seed\n";
  for (const auto& p : curve)
    f << p.target_class_ratio << "," << p.acc << "," << p.tar_acc << "," << p.asr << "," << p.seed
      << "\n";
  std::cout << "sweep curve -> " << out << "\n";
  return 0;
}

int do_report(const std::vector<std::string>& records, const std::string& format,
              const std::string& out) {
  emit_report(records, format == "curve" ? ReportFormat::curve : ReportFormat::table, out);
  std::cout << "report -> " << out << "\n";
  return 0;
}

void add_stage_options(CLI::App* sub, StageArgs& args, bool with_seed_index = false) {
  sub->add_option("--config", args.config_path, "experiment config (JSON)")->required();
  sub->add_option("--set", args.overrides, "dotted-path override, e.g. victim.train.epochs=3");
  if (with_seed_index)
    sub->add_option("--seed-index", args.seed_index, "index into the config's seed list");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clean-label backdoor experiment toolkit"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out = "data", gd_profile = "synthA";
  uint64_t gd_seed = 1;
  int gd_classes = 10, gd_train = 1000, gd_test = 200, gd_size = 32;
  auto* gen = app.add_subcommand("gen-data", "generate a procedural image corpus");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--name", gd_profile, "corpus name (class-name prefix)");
  gen->add_option("--corpus-seed", gd_seed, "template seed defining the corpus");
  gen->add_option("--classes", gd_classes, "number of classes");
  gen->add_option("--per-class-train", gd_train, "train examples per class");
  gen->add_option("--per-class-test", gd_test, "test examples per class");
  gen->add_option("--size", gd_size, "square image size");

  StageArgs s_pre, s_warm, s_synth, s_poison, s_victim, s_eval, s_run, s_defend, s_sweep;
  auto* pre = app.add_subcommand("pretrain", "train the surrogate on the POOD pool");
  add_stage_options(pre, s_pre);
  auto* warm = app.add_subcommand("warmup", "fine-tune the surrogate on target-class data");
  add_stage_options(warm, s_warm);
  auto* synth = app.add_subcommand("synthesize", "synthesize the trigger");
  add_stage_options(synth, s_synth);
  auto* poison = app.add_subcommand("poison", "craft the poisoned training set");
  add_stage_options(poison, s_poison, true);
  auto* victim = app.add_subcommand("train-victim", "train the victim classifier");
  add_stage_options(victim, s_victim, true);
  auto* eval = app.add_subcommand("evaluate", "compute ACC / Tar-ACC / ASR");
  add_stage_options(eval, s_eval, true);
  auto* defend = app.add_subcommand("defend", "run the configured defenses");
  add_stage_options(defend, s_defend);
  std::string sweep_ratios = "0.005,0.05,0.2,0.7";
  auto* sweep = app.add_subcommand("sweep", "target-class poison-ratio tradeoff sweep");
  add_stage_options(sweep, s_sweep);
  sweep->add_option("--ratios", sweep_ratios, "comma-separated target-class ratios");
  auto* runc = app.add_subcommand("run", "execute the full pipeline");
  add_stage_options(runc, s_run);

  std::vector<std::string> rp_records;
  std::string rp_format = "table", rp_out = "report.md";
  auto* rep = app.add_subcommand("report", "render records into tables or curves");
  rep->add_option("--records", rp_records, "records.jsonl paths")->required();
  rep->add_option("--format", rp_format, "table|curve");
  rep->add_option("--out", rp_out, "output file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return do_gen_data(gd_out, gd_profile, gd_seed, gd_classes, gd_train, gd_test, gd_size);
    if (pre->parsed()) return do_pretrain(s_pre);
    if (warm->parsed()) return do_warmup(s_warm);
    if (synth->parsed()) return do_synthesize(s_synth);
    if (poison->parsed()) return do_poison(s_poison);
    if (victim->parsed()) return do_train_victim(s_victim);
    if (eval->parsed()) return do_evaluate(s_eval);
    if (defend->parsed()) return do_defend(s_defend);
    if (sweep->parsed()) return do_sweep(s_sweep, sweep_ratios);
    if (runc->parsed()) return do_run(s_run);
    if (rep->parsed()) return do_report(rp_records, rp_format, rp_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
