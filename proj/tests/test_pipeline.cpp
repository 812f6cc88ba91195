#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "poisonlab/pipeline.hpp"
#include "poisonlab/synthgen.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

struct TempTree {
  fs::path root;
  explicit TempTree(const std::string& name) : root(fs::temp_directory_path() / name) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
};

// Tiny corpora shared by the pipeline tests.
void write_tiny_world(const fs::path& root) {
  SynthCorpusSpec victim;
  victim.corpus_seed = 71;
  victim.num_classes = 4;
  victim.height = victim.width = 16;
  victim.name = "tinyV";
  save_dataset(generate_corpus(victim, 30, 1, "train"), (root / "train").string());
  save_dataset(generate_corpus(victim, 10, 2, "test"), (root / "test").string());
  SynthCorpusSpec pood;
  pood.corpus_seed = 72;
  pood.num_classes = 6;
  pood.height = pood.width = 16;
  pood.name = "tinyP";
  save_dataset(generate_corpus(pood, 20, 3, "train"), (root / "pood").string());
}

std::string tiny_config_json(const fs::path& root, const std::string& out_dir,
                             const std::string& attack) {
  return std::string("{") + R"(
    "run_name": "tiny",
    "out_dir": ")" + out_dir + R"(",
    "data": { "train": ")" + (root / "train").string() + R"(",
              "test": ")" + (root / "test").string() + R"(",
              "pood": ")" + (root / "pood").string() + R"(" },
    "target_class": 1,
    "poison_ratio": 0.025,
    "attack": { "kind": ")" + attack + R"(" },
    "constraint": { "kind": "linf", "epsilon": 0.0627450980392 },
    "synthesis": { "iterations": 40, "step_size": 0.02, "batch_size": 30, "seed": 5 },
    "warmup": { "epochs": 2, "optimizer": "radam", "learning_rate": 0.01, "batch_size": 30 },
    "surrogate": { "architecture": "resnet_desk", "width": 8,
                   "train": { "epochs": 2, "learning_rate": 0.05, "batch_size": 32,
                              "augmentations": [] } },
    "victim": { "architecture": "resnet_desk", "width": 8,
                "train": { "epochs": 2, "learning_rate": 0.05, "batch_size": 32,
                           "augmentations": ["crop", "hflip"] } },
    "evaluation": { "magnify_scale": 3.0 },
    "seeds": [0, 1]
  })";
}

}  // namespace

TEST_CASE("config parsing, overrides and validation errors") {
  TempTree tree("pl_cfg");
  write_tiny_world(tree.root);
  const auto cfg_path = tree.root / "cfg.json";
  {
    std::ofstream out(cfg_path);
    out << tiny_config_json(tree.root, (tree.root / "run").string(), "narcissus");
  }
  ExperimentConfig cfg = ExperimentConfig::load(cfg_path.string());
  CHECK(cfg.attack_kind == AttackKind::narcissus);
  CHECK(cfg.victim_train.epochs == 2);
  CHECK(cfg.seeds == std::vector<uint64_t>{0, 1});
  CHECK_NOTHROW(cfg.validate());

  // Dotted-path overrides reach nested keys.
  ExperimentConfig patched =
      ExperimentConfig::load(cfg_path.string(), {"victim.train.epochs=5", "target_class=2"});
  CHECK(patched.victim_train.epochs == 5);
  CHECK(patched.target_class == 2);

  ExperimentConfig broken = cfg;
  broken.train_path = (tree.root / "missing").string();
  CHECK_THROWS_AS(broken.validate(), ConfigError);
  broken = cfg;
  broken.seeds.clear();
  CHECK_THROWS_AS(broken.validate(), ConfigError);

  CHECK_THROWS_AS(ExperimentConfig::from_json_text("{not json"), ConfigError);
}

TEST_CASE("full pipeline at toy scale: artifacts, digests, reruns") {
  TempTree tree("pl_run");
  write_tiny_world(tree.root);

  const std::string out1 = (tree.root / "runA").string();
  ExperimentConfig cfg = ExperimentConfig::from_json_text(
      tiny_config_json(tree.root, out1, "narcissus"));
  RunRecord rec1 = run_pipeline(cfg);

  CHECK(fs::exists(fs::path(out1) / "config.json"));
  CHECK(fs::exists(fs::path(out1) / "surrogate.w"));
  CHECK(fs::exists(fs::path(out1) / "warmed.w"));
  CHECK(fs::exists(fs::path(out1) / "trigger.f32"));
  CHECK(fs::exists(fs::path(out1) / "trigger.meta"));
  CHECK(fs::exists(fs::path(out1) / "seed_0/plan.json"));
  CHECK(fs::exists(fs::path(out1) / "seed_0/victim.w"));
  CHECK(fs::exists(fs::path(out1) / "seed_1/metrics.json"));
  CHECK(fs::exists(fs::path(out1) / "records.jsonl"));
  CHECK(fs::exists(fs::path(out1) / "run_record.json"));
  CHECK(rec1.outcomes.size() == 2);
  CHECK(rec1.trigger_digest != "");

  // Distinct seeds draw distinct plans.
  CHECK(rec1.outcomes[0].plan_digest != rec1.outcomes[1].plan_digest);

  // The synthesized trigger respects its constraint on disk.
  TriggerArtifact trig = load_trigger((fs::path(out1) / "trigger").string());
  CHECK(satisfies(trig.constraint, trig.pattern, 0.0));

  // Re-running the identical config in a fresh directory reproduces every
  // deterministic artifact digest.
  const std::string out2 = (tree.root / "runB").string();
  ExperimentConfig cfg2 = ExperimentConfig::from_json_text(
      tiny_config_json(tree.root, out2, "narcissus"));
  RunRecord rec2 = run_pipeline(cfg2);
  CHECK(rec2.trigger_digest == rec1.trigger_digest);
  CHECK(rec2.train_digest == rec1.train_digest);
  for (size_t i = 0; i < rec1.outcomes.size(); ++i) {
    CHECK(rec2.outcomes[i].plan_digest == rec1.outcomes[i].plan_digest);
    CHECK(rec2.outcomes[i].poisoned_digest == rec1.outcomes[i].poisoned_digest);
  }
}

TEST_CASE("clean-baseline control keeps ASR near chance") {
  TempTree tree("pl_clean");
  write_tiny_world(tree.root);
  ExperimentConfig cfg = ExperimentConfig::from_json_text(
      tiny_config_json(tree.root, (tree.root / "run").string(), "none"));
  cfg.seeds = {0};
  RunRecord rec = run_pipeline(cfg);
  // Unmodified queries on a functioning classifier rarely land on the target.
  CHECK(rec.aggregate.asr < 40.0);
  CHECK(rec.aggregate.acc > 50.0);
}

TEST_CASE("stage failures persist a failure record and rethrow") {
  TempTree tree("pl_fail");
  write_tiny_world(tree.root);
  ExperimentConfig cfg = ExperimentConfig::from_json_text(
      tiny_config_json(tree.root, (tree.root / "run").string(), "narcissus"));
  cfg.poison_ratio = 0.9;  // more poisons than target-class examples
  CHECK_THROWS_AS(run_pipeline(cfg), StageError);
  CHECK(fs::exists(tree.root / "run" / "failure.json"));
}

TEST_CASE("emit_report renders tables and annotated curves") {
  TempTree tree("pl_rep");
  const auto records = tree.root / "records.jsonl";
  {
    std::ofstream out(records);
    MetricsReport m;
    m.attack_kind = "blend_c";
    m.acc = 90;
    m.tar_acc = 89;
    m.asr = 10;
    m.poison_ratio = 0.005;
    m.seed_list = {0};
    out << m.to_json() << "\n";
    m.poison_ratio = 0.05;
    m.asr = 55;
    out << m.to_json() << "\n";
    m.poison_ratio = 0.2;
    m.asr = 50;  // one small inversion
    out << m.to_json() << "\n";
  }
  const auto table = tree.root / "table.md";
  emit_report({records.string()}, ReportFormat::table, table.string());
  std::ifstream tf(table);
  std::string text((std::istreambuf_iterator<char>(tf)), std::istreambuf_iterator<char>());
  CHECK(text.find("blend_c") != std::string::npos);
  CHECK(text.find("ACC") != std::string::npos);

  const auto curve = tree.root / "curve.csv";
  emit_report({records.string()}, ReportFormat::curve, curve.string());
  std::ifstream cf(curve);
  std::string ctext((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());
  CHECK(ctext.find("poison_ratio,acc,tar_acc,asr") != std::string::npos);
  CHECK(ctext.find("asr_inversions=1") != std::string::npos);

  CHECK_THROWS_AS(emit_report({(tree.root / "nope.jsonl").string()}, ReportFormat::table,
                              (tree.root / "t.md").string()),
                  StageError);
}

#ifdef POISONLAB_BIN
TEST_CASE("CLI exit codes: 0 on success, 2 on config errors, 3 on stage failures") {
  TempTree tree("pl_cli");
  write_tiny_world(tree.root);
  const auto cfg_path = tree.root / "cfg.json";
  {
    std::ofstream out(cfg_path);
    out << tiny_config_json(tree.root, (tree.root / "run").string(), "badnets_c");
  }
  const std::string bin = POISONLAB_BIN;
  auto run = [](const std::string& cmd) { return std::system(cmd.c_str()) / 256; };

  CHECK(run(bin + " run --config " + cfg_path.string() +
            " --set victim.train.epochs=1 --set surrogate.train.epochs=1 --set seeds=[0]"
            " > /dev/null 2>&1") == 0);
  CHECK(run(bin + " run --config " + (tree.root / "missing.json").string() +
            " > /dev/null 2>&1") == 2);
  // Infeasible ratio fails inside the poison stage.
  CHECK(run(bin + " run --config " + cfg_path.string() +
            " --set poison_ratio=0.9 > /dev/null 2>&1") == 3);
}
#endif
