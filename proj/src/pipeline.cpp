#include "poisonlab/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "poisonlab/defense.hpp"
#include "poisonlab/digest.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace poisonlab {

namespace {

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  if (j.contains("epochs")) base.epochs = j["epochs"].get<int>();
  if (j.contains("optimizer")) base.optimizer_id = optimizer_from_string(j["optimizer"]);
  if (j.contains("learning_rate")) base.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("lr_schedule")) base.lr_schedule = lr_schedule_from_string(j["lr_schedule"]);
  if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<int>();
  if (j.contains("momentum")) base.momentum = j["momentum"].get<double>();
  if (j.contains("weight_decay")) base.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("seed")) base.seed = j["seed"].get<uint64_t>();
  if (j.contains("augmentations")) {
    base.augmentations.clear();
    for (const auto& a : j["augmentations"])
      base.augmentations.push_back(augmentation_from_string(a.get<std::string>()));
  }
  return base;
}

json train_config_to_json(const TrainConfig& c) { return json::parse(c.to_json()); }

ModelSpec model_spec_from_json(const json& j, ModelSpec base) {
  if (j.contains("architecture")) base.architecture_id = j["architecture"].get<std::string>();
  if (j.contains("width")) base.width = j["width"].get<int>();
  return base;
}

json set_by_dotted_path(json j, const std::string& path, const std::string& value) {
  json* node = &j;
  std::istringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override path");
  for (size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]]);
  // Parse the value as JSON when possible (numbers, bools, arrays); fall back
  // to a plain string.
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  (*node)[parts.back()] = parsed;
  return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.run_name = j.value("run_name", c.run_name);
    c.out_dir = j.value("out_dir", "runs/" + c.run_name);
    const auto& data = j.at("data");
    c.train_path = data.at("train").get<std::string>();
    c.test_path = data.at("test").get<std::string>();
    c.pood_path = data.value("pood", "");
    c.format = data.value("format", std::string("tensor_file")) == "class_dirs"
                   ? DatasetFormat::class_dirs
                   : DatasetFormat::tensor_file;
    c.declared_overlap = data.value("declared_overlap", std::vector<std::string>{});

    c.target_class = j.value("target_class", c.target_class);
    c.poison_ratio = j.value("poison_ratio", c.poison_ratio);
    if (j.contains("attack")) {
      const auto& atk = j["attack"];
      c.attack_kind = attack_kind_from_string(atk.value("kind", "narcissus"));
      c.badnets_patch_size = atk.value("badnets_patch_size", c.badnets_patch_size);
      c.badnets_intensity = atk.value("badnets_intensity", c.badnets_intensity);
      c.blend_alpha = atk.value("blend_alpha", c.blend_alpha);
      c.blend_seed = atk.value("blend_seed", c.blend_seed);
    }
    if (j.contains("constraint")) {
      const auto& cc = j["constraint"];
      c.constraint.kind = constraint_kind_from_string(cc.value("kind", "linf"));
      c.constraint.epsilon = cc.value("epsilon", c.constraint.epsilon);
      c.constraint.cutoff = cc.value("cutoff", c.constraint.cutoff);
      c.constraint.patch_h = cc.value("patch_h", c.constraint.patch_h);
      c.constraint.patch_w = cc.value("patch_w", c.constraint.patch_w);
      c.constraint.patch_row = cc.value("patch_row", c.constraint.patch_row);
      c.constraint.patch_col = cc.value("patch_col", c.constraint.patch_col);
    }
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      c.synthesis.iterations = s.value("iterations", c.synthesis.iterations);
      c.synthesis.step_size = s.value("step_size", c.synthesis.step_size);
      c.synthesis.batch_size = s.value("batch_size", c.synthesis.batch_size);
      if (s.contains("optimizer"))
        c.synthesis.optimizer_id = optimizer_from_string(s["optimizer"]);
      c.synthesis.seed = s.value("seed", c.synthesis.seed);
    }
    c.warmup_train.optimizer_id = OptimizerId::radam;
    c.warmup_train.learning_rate = 0.1;
    c.warmup_train.weight_decay = 0.0;
    c.warmup_train.lr_schedule = LrSchedule::constant;
    c.warmup_train.augmentations = {};
    if (j.contains("warmup")) {
      const auto& wj = j["warmup"];
      c.warmup_epochs = wj.value("epochs", c.warmup_epochs);
      c.warmup_train = train_config_from_json(wj, c.warmup_train);
    }
    if (j.contains("surrogate")) {
      c.surrogate_spec = model_spec_from_json(j["surrogate"], c.surrogate_spec);
      if (j["surrogate"].contains("train"))
        c.surrogate_train = train_config_from_json(j["surrogate"]["train"], c.surrogate_train);
    }
    if (j.contains("victim")) {
      c.victim_spec = model_spec_from_json(j["victim"], c.victim_spec);
      if (j["victim"].contains("train"))
        c.victim_train = train_config_from_json(j["victim"]["train"], c.victim_train);
    }
    if (j.contains("evaluation")) {
      c.magnify_scale = j["evaluation"].value("magnify_scale", c.magnify_scale);
    }
    c.defenses = j.value("defenses", std::vector<std::string>{});
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("defense_config")) {
      const auto& d = j["defense_config"];
      c.finetune_epochs = d.value("finetune_epochs", c.finetune_epochs);
      c.finetune_lr = d.value("finetune_lr", c.finetune_lr);
      c.abl_early_epochs = d.value("abl_early_epochs", c.abl_early_epochs);
      c.abl_isolation_rate = d.value("abl_isolation_rate", c.abl_isolation_rate);
      c.abl_loss_threshold = d.value("abl_loss_threshold", c.abl_loss_threshold);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path,
                                        const std::vector<std::string>& dotted_overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  for (const auto& ov : dotted_overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key.path=value: " + ov);
    j = set_by_dotted_path(j, ov.substr(0, eq), ov.substr(eq + 1));
  }
  return from_json_text(j.dump());
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["run_name"] = run_name;
  j["out_dir"] = out_dir;
  j["data"] = {{"train", train_path},
               {"test", test_path},
               {"pood", pood_path},
               {"format", format == DatasetFormat::tensor_file ? "tensor_file" : "class_dirs"},
               {"declared_overlap", declared_overlap}};
  j["target_class"] = target_class;
  j["poison_ratio"] = poison_ratio;
  j["attack"] = {{"kind", to_string(attack_kind)},
                 {"badnets_patch_size", badnets_patch_size},
                 {"badnets_intensity", badnets_intensity},
                 {"blend_alpha", blend_alpha},
                 {"blend_seed", blend_seed}};
  json cc;
  cc["kind"] = to_string(constraint.kind);
  cc["epsilon"] = constraint.epsilon;
  cc["cutoff"] = constraint.cutoff;
  cc["patch_h"] = constraint.patch_h;
  cc["patch_w"] = constraint.patch_w;
  cc["patch_row"] = constraint.patch_row;
  cc["patch_col"] = constraint.patch_col;
  j["constraint"] = cc;
  j["synthesis"] = json::parse(synthesis.to_json());
  json wj = train_config_to_json(warmup_train);
  wj["epochs"] = warmup_epochs;
  j["warmup"] = wj;
  j["surrogate"] = {{"architecture", surrogate_spec.architecture_id},
                    {"width", surrogate_spec.width},
                    {"train", train_config_to_json(surrogate_train)}};
  j["victim"] = {{"architecture", victim_spec.architecture_id},
                 {"width", victim_spec.width},
                 {"train", train_config_to_json(victim_train)}};
  j["evaluation"] = {{"magnify_scale", magnify_scale}};
  j["defenses"] = defenses;
  j["seeds"] = seeds;
  j["defense_config"] = {{"finetune_epochs", finetune_epochs},
                         {"finetune_lr", finetune_lr},
                         {"abl_early_epochs", abl_early_epochs},
                         {"abl_isolation_rate", abl_isolation_rate},
                         {"abl_loss_threshold", abl_loss_threshold}};
  return j.dump(2);
}

std::string ExperimentConfig::digest() const { return sha256_hex(to_json()).substr(0, 16); }

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds list must be nonempty");
  if (!fs::exists(train_path)) throw ConfigError("train path does not exist: " + train_path);
  if (!fs::exists(test_path)) throw ConfigError("test path does not exist: " + test_path);
  const bool needs_pood = attack_kind == AttackKind::narcissus;
  if (needs_pood && (pood_path.empty() || !fs::exists(pood_path)))
    throw ConfigError("pood path does not exist: " + pood_path);
  if (poison_ratio < 0.0) throw ConfigError("poison_ratio must be nonnegative");
  if (magnify_scale <= 0.0) throw ConfigError("magnify_scale must be positive");
  victim_train.validate();
  surrogate_train.validate();
  synthesis.validate();
}

LabeledDataset load_config_dataset(const ExperimentConfig& cfg, const std::string& which) {
  if (which == "train") return load_dataset(cfg.train_path, cfg.format);
  if (which == "test") return load_dataset(cfg.test_path, cfg.format);
  if (which == "pood") return load_dataset(cfg.pood_path, cfg.format);
  throw std::invalid_argument("unknown dataset role: " + which);
}

std::string RunRecord::to_json() const {
  json j;
  j["config_digest"] = config_digest;
  j["train_digest"] = train_digest;
  j["test_digest"] = test_digest;
  j["pood_digest"] = pood_digest;
  j["surrogate_id"] = surrogate_id;
  j["warmed_id"] = warmed_id;
  j["trigger_digest"] = trigger_digest;
  j["aggregate"] = json::parse(aggregate.to_json());
  j["outcomes"] = json::array();
  for (const auto& o : outcomes) {
    json oj;
    oj["seed"] = o.seed;
    oj["plan_digest"] = o.plan_digest;
    oj["poisoned_digest"] = o.poisoned_digest;
    oj["victim_id"] = o.victim_id;
    oj["metrics"] = json::parse(o.metrics.to_json());
    j["outcomes"].push_back(oj);
  }
  return j.dump(2);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << "\n";
  if (!out) throw StageError("cannot write " + path.string());
}

void persist_failure(const fs::path& dir, const std::string& stage, const std::string& what) {
  json j;
  j["failed_stage"] = stage;
  j["error"] = what;
  std::ofstream out(dir / "failure.json");
  out << j.dump(2) << "\n";
}

PoisonedDataset craft_for_kind(const ExperimentConfig& cfg, const LabeledDataset& train,
                               const TriggerArtifact* trigger, uint64_t seed) {
  const bool dirty =
      cfg.attack_kind == AttackKind::badnets_d || cfg.attack_kind == AttackKind::blend_d;
  PoisonPlan plan = dirty
                        ? select_dirty_indices(train, cfg.target_class, cfg.poison_ratio, seed)
                        : select_poison_indices(train, cfg.target_class, cfg.poison_ratio, seed);
  switch (cfg.attack_kind) {
    case AttackKind::narcissus:
      if (trigger == nullptr) throw StageError("narcissus poisoning needs a synthesized trigger");
      return craft_clean_label_poison(train, *trigger, plan);
    case AttackKind::badnets_c:
    case AttackKind::badnets_d: {
      Tensor patch = default_badnets_patch(static_cast<int>(train.images.dim(1)),
                                           cfg.badnets_patch_size,
                                           static_cast<float>(cfg.badnets_intensity));
      return craft_badnets(train, patch, plan, dirty);
    }
    case AttackKind::blend_c:
    case AttackKind::blend_d: {
      Tensor asset = default_blend_asset(train.image_shape(), cfg.blend_seed);
      return craft_blend(train, asset, cfg.blend_alpha, plan, dirty);
    }
    case AttackKind::none:
      throw StageError("attack kind 'none' has no poisoning stage");
  }
  throw StageError("unreachable attack kind");
}

// Percentage of eligible (non-target) test examples predicted as the target
// class under test-query manipulation for the configured attack. Each attack
// applies its own documented test budget: the synthesized trigger is
// magnified, the corner patch is stamped, the blend asset mixes at alpha, and
// the clean control evaluates unmodified queries.
double attack_asr(const ExperimentConfig& cfg, const ModelHandle& victim,
                  const LabeledDataset& test, const TriggerArtifact* trigger) {
  if (cfg.attack_kind == AttackKind::narcissus) {
    if (trigger == nullptr) throw StageError("evaluation needs the synthesized trigger");
    return evaluate_asr(victim, test, *trigger, cfg.target_class, cfg.magnify_scale,
                        AsrMode::all_to_one);
  }

  const auto shape = test.image_shape();
  std::function<void(Tensor&)> manipulate;
  if (cfg.attack_kind == AttackKind::badnets_c || cfg.attack_kind == AttackKind::badnets_d) {
    Tensor patch = default_badnets_patch(static_cast<int>(shape[0]), cfg.badnets_patch_size,
                                         static_cast<float>(cfg.badnets_intensity));
    manipulate = [patch, shape](Tensor& img) {
      const int64_t row0 = shape[1] - patch.dim(1), col0 = shape[2] - patch.dim(2);
      for (int64_t c = 0; c < patch.dim(0); ++c)
        for (int64_t y = 0; y < patch.dim(1); ++y)
          for (int64_t x = 0; x < patch.dim(2); ++x)
            img.at(c, row0 + y, col0 + x) = patch.at(c, y, x);
    };
  } else if (cfg.attack_kind == AttackKind::blend_c || cfg.attack_kind == AttackKind::blend_d) {
    Tensor asset = default_blend_asset(shape, cfg.blend_seed);
    const float a = static_cast<float>(cfg.blend_alpha);
    manipulate = [asset, a](Tensor& img) {
      for (int64_t i = 0; i < img.size(); ++i)
        img[i] = (1.0f - a) * img[i] + a * asset[i];
      img.clamp_(0.0f, 1.0f);
    };
  } else {
    manipulate = [](Tensor&) {};  // clean control: unmodified queries
  }

  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < test.size(); ++i)
    if (test.labels[static_cast<size_t>(i)] != cfg.target_class) eligible.push_back(i);
  if (eligible.empty()) throw StageError("no eligible test examples for ASR");

  int64_t hits = 0;
  const int batch = 256;
  const int64_t d = shape[0] * shape[1] * shape[2];
  for (size_t start = 0; start < eligible.size(); start += batch) {
    const size_t stop = std::min(eligible.size(), start + static_cast<size_t>(batch));
    Tensor x({static_cast<int64_t>(stop - start), shape[0], shape[1], shape[2]});
    for (size_t i = start; i < stop; ++i) {
      Tensor img = test.image(eligible[i]);
      manipulate(img);
      std::copy_n(img.data(), d, x.data() + static_cast<int64_t>(i - start) * d);
    }
    Tensor logits = victim.predict(x);
    const int heads = static_cast<int>(logits.dim(1));
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const float* z = logits.data() + i * heads;
      int arg = 0;
      for (int j = 1; j < heads; ++j)
        if (z[j] > z[arg]) arg = j;
      if (arg == cfg.target_class) ++hits;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(eligible.size());
}

// Trains the frequency detector on clean training images and scores it on a
// balanced clean/manipulated split (manipulation at the attack's poison-time
// budget, which is what a dataset screen would face).
DefenseReport frequency_defense_report(const ExperimentConfig& cfg, const LabeledDataset& train,
                                       const TriggerArtifact* trigger) {
  if (cfg.attack_kind == AttackKind::none)
    throw StageError("frequency defense needs an attack to detect");
  const int64_t pool = std::min<int64_t>(train.size(), 1000);
  std::vector<int64_t> det_train, det_eval;
  for (int64_t i = 0; i < pool; ++i) (i % 2 == 0 ? det_train : det_eval).push_back(i);

  DetectorTrainOptions opts;
  opts.seed = cfg.seeds.front();
  FrequencyDetector det = train_frequency_detector(
      train.subset(det_train, ":det_train"), FrequencyDetector::Mode::linear, opts);

  LabeledDataset eval_clean = train.subset(det_eval, ":det_eval");
  const auto shape = train.image_shape();
  const int64_t n = eval_clean.size();
  const int64_t d = shape[0] * shape[1] * shape[2];
  Tensor images({2 * n, shape[0], shape[1], shape[2]});
  std::vector<int> truth(static_cast<size_t>(2 * n), 0);
  for (int64_t i = 0; i < n; ++i) {
    Tensor img = eval_clean.image(i);
    std::copy_n(img.data(), d, images.data() + i * d);
    Tensor bad;
    if (trigger != nullptr) {
      bad = apply_trigger(img, *trigger);
    } else if (cfg.attack_kind == AttackKind::badnets_c ||
               cfg.attack_kind == AttackKind::badnets_d) {
      bad = img;
      Tensor patch = default_badnets_patch(static_cast<int>(shape[0]), cfg.badnets_patch_size,
                                           static_cast<float>(cfg.badnets_intensity));
      for (int64_t c = 0; c < patch.dim(0); ++c)
        for (int64_t y = 0; y < patch.dim(1); ++y)
          for (int64_t x = 0; x < patch.dim(2); ++x)
            bad.at(c, shape[1] - patch.dim(1) + y, shape[2] - patch.dim(2) + x) = patch.at(c, y, x);
    } else {
      bad = img;
      Tensor asset = default_blend_asset(shape, cfg.blend_seed);
      const float a = static_cast<float>(cfg.blend_alpha);
      for (int64_t jpx = 0; jpx < bad.size(); ++jpx)
        bad[jpx] = (1.0f - a) * bad[jpx] + a * asset[jpx];
      bad.clamp_(0.0f, 1.0f);
    }
    std::copy_n(bad.data(), d, images.data() + (n + i) * d);
    truth[static_cast<size_t>(n + i)] = 1;
  }
  auto result = frequency_detect(det, images, &truth);
  DefenseReport rep;
  rep.defense_id = "frequency_detect";
  rep.has_detection = true;
  rep.detection_acc = result.detection_acc;
  rep.detection_rate = result.detection_rate;
  return rep;
}

// Early-epoch training over the poisoned set with per-example loss snapshots,
// then loss-ranked isolation scored against the ground-truth plan.
DefenseReport abl_defense_report(const ExperimentConfig& cfg, const LabeledDataset& victim_data,
                                 const PoisonPlan& plan) {
  LossTrace trace;
  TrainConfig early = cfg.victim_train;
  early.epochs = cfg.abl_early_epochs;
  early.seed = cfg.seeds.front() ^ 0xab1ull;
  ModelSpec espec = cfg.victim_spec;
  espec.input_shape = victim_data.image_shape();
  espec.num_classes = victim_data.num_classes();
  train_classifier(victim_data, espec, early, nullptr, nullptr,
                   [&](int, const ModelHandle& live) {
                     trace.per_epoch.push_back(loss_per_example(live, victim_data));
                   });
  DefenseReport rep = abl_isolate(trace, cfg.abl_isolation_rate, cfg.abl_loss_threshold, plan,
                                  &victim_data.labels);
  return rep;
}

MetricsReport mean_metrics(const std::vector<SeedOutcome>& outcomes) {
  MetricsReport agg;
  if (outcomes.empty()) return agg;
  agg = outcomes.front().metrics;
  agg.seed_list.clear();
  agg.acc = agg.tar_acc = agg.asr = 0.0;
  std::fill(agg.classwise_acc.begin(), agg.classwise_acc.end(), 0.0);
  for (const auto& o : outcomes) {
    agg.acc += o.metrics.acc;
    agg.tar_acc += o.metrics.tar_acc;
    agg.asr += o.metrics.asr;
    agg.seed_list.push_back(o.seed);
    for (size_t c = 0; c < agg.classwise_acc.size(); ++c)
      agg.classwise_acc[c] += o.metrics.classwise_acc[c];
  }
  const double n = static_cast<double>(outcomes.size());
  agg.acc /= n;
  agg.tar_acc /= n;
  agg.asr /= n;
  for (auto& v : agg.classwise_acc) v /= n;
  return agg;
}

}  // namespace

RunRecord run_pipeline(const ExperimentConfig& config) {
  config.validate();
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config.to_json());

  RunRecord record;
  record.config_digest = config.digest();
  std::string stage = "load-data";
  try {
    LabeledDataset train = load_config_dataset(config, "train");
    LabeledDataset test = load_config_dataset(config, "test");
    record.train_digest = train.digest();
    record.test_digest = test.digest();

    const bool is_narcissus = config.attack_kind == AttackKind::narcissus;
    std::optional<TriggerArtifact> trigger;
    PoisonPlan first_seed_plan;
    LabeledDataset first_seed_poisoned;
    if (is_narcissus) {
      stage = "disjointness";
      LabeledDataset pood = load_config_dataset(config, "pood");
      record.pood_digest = pood.digest();
      // The runner refuses to proceed when overlap is declared.
      assert_class_disjoint(train, pood, config.declared_overlap);

      stage = "pretrain";
      ModelSpec sspec = config.surrogate_spec;
      sspec.input_shape = train.image_shape();
      ModelHandle surrogate = pretrain_surrogate(pood, sspec, config.surrogate_train);
      save_model(surrogate, (dir / "surrogate").string());
      record.surrogate_id = surrogate.id();

      stage = "warmup";
      LabeledDataset target_slice =
          train.subset(train.class_indices(config.target_class), ":target");
      ModelHandle warmed =
          poi_warmup(surrogate, target_slice, config.warmup_epochs, config.warmup_train);
      save_model(warmed, (dir / "warmed").string());
      record.warmed_id = warmed.id();

      stage = "synthesize";
      trigger = synthesize_trigger(warmed, target_slice, config.target_class, config.constraint,
                                   config.synthesis);
      save_trigger(*trigger, (dir / "trigger").string());
      record.trigger_digest = trigger->digest();
    }

    for (uint64_t seed : config.seeds) {
      const fs::path sdir = dir / ("seed_" + std::to_string(seed));
      fs::create_directories(sdir);
      SeedOutcome outcome;
      outcome.seed = seed;

      const LabeledDataset* victim_train_data = &train;
      LabeledDataset poisoned_holder;
      if (config.attack_kind != AttackKind::none) {
        stage = "poison(seed " + std::to_string(seed) + ")";
        PoisonedDataset poisoned =
            craft_for_kind(config, train, trigger ? &*trigger : nullptr, seed);
        poisoned.plan.save((sdir / "plan.json").string());
        write_text(sdir / "poisoned_manifest.json", poisoned.manifest_json(record.train_digest));
        outcome.plan_digest = sha256_hex(poisoned.plan.to_json()).substr(0, 16);
        outcome.poisoned_digest = poisoned.data.digest();
        poisoned_holder = std::move(poisoned.data);
        victim_train_data = &poisoned_holder;
      }

      stage = "train-victim(seed " + std::to_string(seed) + ")";
      TrainConfig vt = config.victim_train;
      vt.seed = seed;
      ModelSpec vspec = config.victim_spec;
      vspec.input_shape = train.image_shape();
      vspec.num_classes = train.num_classes();
      ModelHandle victim = train_classifier(*victim_train_data, vspec, vt, nullptr, &test);
      save_model(victim, (sdir / "victim").string());
      outcome.victim_id = victim.id();

      stage = "evaluate(seed " + std::to_string(seed) + ")";
      auto clean = evaluate_clean(victim, test, config.target_class);
      MetricsReport m;
      m.acc = clean.acc;
      m.tar_acc = clean.tar_acc;
      m.classwise_acc = clean.classwise;
      m.dataset = train.source_id;
      m.attack_kind = to_string(config.attack_kind);
      m.poison_ratio = config.poison_ratio;
      m.epsilon = config.constraint.kind == ConstraintKind::linf ? config.constraint.epsilon : 0.0;
      m.magnify_scale = config.magnify_scale;
      m.config_ref = record.config_digest;
      m.seed_list = {seed};
      m.asr = attack_asr(config, victim, test, trigger ? &*trigger : nullptr);
      outcome.metrics = m;
      write_text(sdir / "metrics.json", m.to_json());
      record.outcomes.push_back(std::move(outcome));

      if (seed == config.seeds.front() && config.attack_kind != AttackKind::none) {
        first_seed_plan = PoisonPlan::load((sdir / "plan.json").string());
        first_seed_poisoned = *victim_train_data;
      }
    }

    record.aggregate = mean_metrics(record.outcomes);
    {
      std::ofstream records(dir / "records.jsonl");
      for (const auto& o : record.outcomes) records << o.metrics.to_json() << "\n";
      records << record.aggregate.to_json() << "\n";
    }
    write_text(dir / "aggregate.json", record.aggregate.to_json());

    if (!config.defenses.empty()) {
      stage = "defend";
      // Defenses run against the first repetition's victim and plan.
      const fs::path sdir = dir / ("seed_" + std::to_string(config.seeds.front()));
      ModelHandle victim = load_model((sdir / "victim").string());
      fs::create_directories(dir / "defenses");
      EvalContext eval;
      eval.test_set = &test;
      eval.trigger = trigger ? &*trigger : nullptr;
      eval.target_class = config.target_class;
      eval.magnify_scale = config.magnify_scale;
      const LabeledDataset& victim_data =
          config.attack_kind == AttackKind::none ? train : first_seed_poisoned;
      for (const auto& id : config.defenses) {
        DefenseReport rep;
        if (id == "fine_prune") {
          TrainConfig ft;
          ft.optimizer_id = OptimizerId::sgd;
          ft.learning_rate = config.finetune_lr;
          ft.lr_schedule = LrSchedule::constant;
          ft.augmentations = {};
          ft.weight_decay = 0.0;
          PruneRule rule;
          rep = fine_prune(victim, test, rule, config.finetune_epochs, ft, eval).second;
        } else if (id == "frequency_detect") {
          rep = frequency_defense_report(config, train, trigger ? &*trigger : nullptr);
        } else if (id == "abl") {
          rep = abl_defense_report(config, victim_data, first_seed_plan);
        } else {
          DefenseContext ctx;
          ctx.model = &victim;
          ctx.poisoned_train = &victim_data;
          ctx.defense_set = &test;
          ctx.plan = &first_seed_plan;
          ctx.eval = eval;
          rep = run_defense(id, ctx);  // plug-in slot
        }
        write_text(dir / "defenses" / (id + ".json"), rep.to_json());
      }
    }

    write_text(dir / "run_record.json", record.to_json());
    return record;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    persist_failure(dir, stage, e.what());
    throw StageError("stage '" + stage + "' failed: " + e.what());
  }
}

std::vector<TradeoffPoint> tradeoff_sweep(const ExperimentConfig& base,
                                          const std::vector<double>& target_class_ratios) {
  for (size_t i = 1; i < target_class_ratios.size(); ++i)
    if (target_class_ratios[i] < target_class_ratios[i - 1])
      throw ConfigError("tradeoff_sweep: ratios must be sorted ascending");

  // Convert target-class ratios to full-set ratios using the class share.
  LabeledDataset train = load_config_dataset(base, "train");
  const double target_count =
      static_cast<double>(train.class_indices(base.target_class).size());
  const double total = static_cast<double>(train.size());

  std::vector<TradeoffPoint> curve;
  for (double tcr : target_class_ratios) {
    ExperimentConfig cfg = base;
    cfg.poison_ratio = tcr * target_count / total;
    cfg.out_dir = base.out_dir + "/ratio_" + std::to_string(tcr);
    cfg.seeds = {base.seeds.front()};
    try {
      RunRecord rec = run_pipeline(cfg);
      TradeoffPoint p;
      p.target_class_ratio = tcr;
      p.acc = rec.aggregate.acc;
      p.tar_acc = rec.aggregate.tar_acc;
      p.asr = rec.aggregate.asr;
      p.seed = cfg.seeds.front();
      curve.push_back(p);
    } catch (const std::exception& e) {
      throw StageError("sweep failed at target-class ratio " + std::to_string(tcr) + ": " +
                       e.what());
    }
  }
  return curve;
}

void emit_report(const std::vector<std::string>& record_paths, ReportFormat format,
                 const std::string& out_path) {
  std::vector<MetricsReport> records;
  for (const auto& path : record_paths) {
    std::ifstream in(path);
    if (!in) throw StageError("cannot read records: " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      records.push_back(MetricsReport::from_json(line));
    }
  }
  if (records.empty()) throw StageError("no records to report");

  std::ofstream out(out_path);
  if (!out) throw StageError("cannot write report: " + out_path);

  if (format == ReportFormat::table) {
    // One row per attack kind: mean over rows that share the kind.
    std::map<std::string, std::vector<MetricsReport>> by_kind;
    for (const auto& r : records) by_kind[r.attack_kind].push_back(r);
    out << "| attack | ACC | Tar-ACC | ASR | seeds |\n";
    out << "|--------|-----|---------|-----|-------|\n";
    for (const auto& [kind, rows] : by_kind) {
      double acc = 0, tar = 0, asr = 0;
      size_t seeds = 0;
      for (const auto& r : rows) {
        acc += r.acc;
        tar += r.tar_acc;
        asr += r.asr;
        seeds += r.seed_list.size();
      }
      const double n = static_cast<double>(rows.size());
      char buf[160];
      std::snprintf(buf, sizeof(buf), "| %s | %.2f | %.2f | %.2f | %zu |\n", kind.c_str(),
                    acc / n, tar / n, asr / n, seeds);
      out << buf;
    }
  } else {
    // Ratio curve (CSV) with monotonicity annotations recomputed from rows.
    std::vector<const MetricsReport*> rows;
    for (const auto& r : records) rows.push_back(&r);
    std::sort(rows.begin(), rows.end(), [](const MetricsReport* a, const MetricsReport* b) {
      return a->poison_ratio < b->poison_ratio;
    });
    out << "poison_ratio,acc,tar_acc,asr\n";
    for (const auto* r : rows) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%.6f,%.2f,%.2f,%.2f\n", r->poison_ratio, r->acc, r->tar_acc,
                    r->asr);
      out << buf;
    }
    int inversions = 0;
    double worst = 0.0;
    for (size_t i = 1; i < rows.size(); ++i)
      if (rows[i]->asr < rows[i - 1]->asr) {
        ++inversions;
        worst = std::max(worst, rows[i - 1]->asr - rows[i]->asr);
      }
    out << "# asr_inversions=" << inversions << " worst_inversion=" << worst << "\n";
  }
}

}  // namespace poisonlab
