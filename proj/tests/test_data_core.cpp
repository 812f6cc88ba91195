#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "poisonlab/dataset.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/synthgen.hpp"
#include "poisonlab/trigger.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

LabeledDataset toy_dataset(int per_class, int num_classes, int size = 8, uint64_t seed = 3) {
  SynthCorpusSpec spec;
  spec.corpus_seed = seed;
  spec.num_classes = num_classes;
  spec.height = spec.width = size;
  spec.name = "toy";
  return generate_corpus(spec, per_class, seed + 1, "train");
}

// Many labels, tiny pixels: plan selection cares about labels only.
LabeledDataset wide_label_dataset(int64_t n, int num_classes) {
  LabeledDataset ds;
  ds.source_id = "wide";
  for (int c = 0; c < num_classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  ds.images.resize({n, 1, 1, 1});
  ds.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) ds.labels[static_cast<size_t>(i)] = static_cast<int>(i % num_classes);
  ds.validate();
  return ds;
}

struct TempDir {
  fs::path path;
  TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("toy construction: 4 examples over two classes") {
  LabeledDataset ds = toy_dataset(2, 2);
  CHECK(ds.size() == 4);
  CHECK(ds.num_classes() == 2);
  ds.validate();
  for (int64_t i = 0; i < ds.images.size(); ++i) {
    CHECK(ds.images[i] >= 0.0f);
    CHECK(ds.images[i] <= 1.0f);
  }
}

TEST_CASE("dataset save/load round-trips bit-exactly") {
  TempDir dir("pl_ds_roundtrip");
  LabeledDataset ds = toy_dataset(3, 4);
  save_dataset(ds, dir.path.string());
  LabeledDataset back = load_dataset(dir.path.string(), DatasetFormat::tensor_file);
  CHECK(back.images.bitwise_equal(ds.images));
  CHECK(back.labels == ds.labels);
  CHECK(back.class_names == ds.class_names);
  CHECK(back.digest() == ds.digest());
}

TEST_CASE("loading an empty directory reports no examples") {
  TempDir dir("pl_ds_empty");
  CHECK_THROWS_WITH_AS(load_dataset(dir.path.string(), DatasetFormat::tensor_file),
                       doctest::Contains("no examples found"), std::runtime_error);
  CHECK_THROWS_AS(load_dataset((dir.path / "missing").string(), DatasetFormat::tensor_file),
                  std::runtime_error);
}

TEST_CASE("class_dirs layout loads 8-bit PPM images scaled to [0,1]") {
  TempDir dir("pl_ds_ppm");
  auto write_ppm = [&](const std::string& cls, const std::string& name, unsigned char v) {
    fs::create_directories(dir.path / cls);
    std::ofstream out(dir.path / cls / name, std::ios::binary);
    out << "P6\n2 2\n255\n";
    for (int i = 0; i < 12; ++i) out.put(static_cast<char>(v));
  };
  write_ppm("cat", "a.ppm", 51);
  write_ppm("dog", "b.ppm", 255);
  LabeledDataset ds = load_dataset(dir.path.string(), DatasetFormat::class_dirs);
  CHECK(ds.size() == 2);
  CHECK(ds.class_names == std::vector<std::string>{"cat", "dog"});
  CHECK(ds.images[0] == doctest::Approx(51.0 / 255.0));
  CHECK(ds.labels == std::vector<int>{0, 1});
}

TEST_CASE("class disjointness accepts empty overlap and names violations") {
  LabeledDataset train = toy_dataset(2, 3);
  LabeledDataset pood = toy_dataset(2, 2, 8, 99);
  CHECK_NOTHROW(assert_class_disjoint(train, pood, {}));
  CHECK_THROWS_WITH_AS(assert_class_disjoint(train, train, train.class_names),
                       doctest::Contains("toy_0"), std::runtime_error);
  // Two single-class pools with different names pass with an empty list.
  LabeledDataset a = toy_dataset(2, 1, 8, 5);
  LabeledDataset b = toy_dataset(2, 1, 8, 6);
  CHECK_NOTHROW(assert_class_disjoint(a, b, {}));
}

TEST_CASE("poison plan selection: counts, labels, determinism") {
  LabeledDataset ds = wide_label_dataset(50000, 10);
  PoisonPlan plan = select_poison_indices(ds, 2, 0.0005, 0);
  CHECK(plan.indices.size() == 25);  // round(0.0005 * 50000)
  for (int64_t i : plan.indices) CHECK(ds.labels[static_cast<size_t>(i)] == 2);
  CHECK(plan.target_class_ratio == doctest::Approx(25.0 / 5000.0));
  CHECK(std::is_sorted(plan.indices.begin(), plan.indices.end()));
  for (size_t i = 1; i < plan.indices.size(); ++i)
    CHECK(plan.indices[i] != plan.indices[i - 1]);

  PoisonPlan again = select_poison_indices(ds, 2, 0.0005, 0);
  CHECK(again.indices == plan.indices);
  PoisonPlan other_seed = select_poison_indices(ds, 2, 0.0005, 1);
  CHECK(other_seed.indices != plan.indices);
}

TEST_CASE("poison plan error paths") {
  LabeledDataset ds = wide_label_dataset(100, 10);
  CHECK_THROWS_WITH_AS(select_poison_indices(ds, 2, 0.0, 0),
                       doctest::Contains("zero poisons requested"), std::invalid_argument);
  // 0.5 * 100 = 50 > 10 target-class examples
  CHECK_THROWS_AS(select_poison_indices(ds, 2, 0.5, 0), std::invalid_argument);
}

TEST_CASE("poison plan JSON round trip") {
  LabeledDataset ds = wide_label_dataset(1000, 10);
  PoisonPlan plan = select_poison_indices(ds, 3, 0.01, 7);
  TempDir dir("pl_plan");
  plan.save((dir.path / "plan.json").string());
  PoisonPlan back = PoisonPlan::load((dir.path / "plan.json").string());
  CHECK(back.indices == plan.indices);
  CHECK(back.seed == plan.seed);
  CHECK(back.target_class == plan.target_class);
  CHECK(back.dataset_digest == plan.dataset_digest);
}

TEST_CASE("trigger artifacts round-trip losslessly") {
  TempDir dir("pl_trig");
  TriggerArtifact a;
  a.constraint = ConstraintSet::linf_ball(16.0 / 255.0);
  Rng rng(12);
  a.pattern.resize({3, 32, 32});
  for (int64_t i = 0; i < a.pattern.size(); ++i)
    a.pattern[i] = rng.uniformf(-16.0f / 255.0f, 16.0f / 255.0f);
  a.pattern = project(a.constraint, a.pattern);
  a.target_class = 2;
  a.surrogate_id = "sur01";
  a.synthesis_config_digest = "cfg01";
  a.validate();

  const std::string stem = (dir.path / "trigger").string();
  save_trigger(a, stem);
  TriggerArtifact back = load_trigger(stem);
  CHECK(back.pattern.bitwise_equal(a.pattern));
  CHECK(back.constraint.kind == ConstraintKind::linf);
  CHECK(back.constraint.epsilon == doctest::Approx(16.0 / 255.0));
  CHECK(back.target_class == 2);
  CHECK(back.surrogate_id == "sur01");
  CHECK(back.synthesis_config_digest == "cfg01");
  CHECK(back.magnify_scale == 1.0);
}

TEST_CASE("patch trigger params survive the sidecar") {
  TempDir dir("pl_trig_patch");
  TriggerArtifact a;
  a.constraint = ConstraintSet::patch_region(8, 8, 0, 0);
  a.pattern.resize({3, 64, 64});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) a.pattern.at(0, y, x) = 0.5f;
  a.target_class = 1;
  a.validate();
  save_trigger(a, (dir.path / "t").string());
  TriggerArtifact back = load_trigger((dir.path / "t").string());
  CHECK(back.constraint.kind == ConstraintKind::patch);
  CHECK(back.constraint.patch_h == 8);
  CHECK(back.constraint.patch_w == 8);
  CHECK(back.pattern.bitwise_equal(a.pattern));
}

TEST_CASE("tampered trigger shape metadata is rejected") {
  TempDir dir("pl_trig_bad");
  TriggerArtifact a;
  a.constraint = ConstraintSet::linf_ball(0.1);
  a.pattern.resize({3, 8, 8});
  a.validate();
  const std::string stem = (dir.path / "t").string();
  save_trigger(a, stem);
  // Corrupt the sidecar's shape line.
  std::ifstream in(stem + ".meta");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto pos = text.find("shape=3x8x8");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 11, "shape=3x9x9");
  std::ofstream out(stem + ".meta");
  out << text;
  out.close();
  CHECK_THROWS_WITH_AS(load_trigger(stem), doctest::Contains("payload size"),
                       std::runtime_error);
}
