#include "poisonlab/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/train.hpp"

using json = nlohmann::json;

namespace poisonlab {

std::string MetricsReport::to_json() const {
  json j;
  j["dataset"] = dataset;
  j["attack_kind"] = attack_kind;
  j["poison_ratio"] = poison_ratio;
  j["epsilon"] = epsilon;
  j["magnify_scale"] = magnify_scale;
  j["seed_list"] = seed_list;
  j["acc"] = acc;
  j["tar_acc"] = tar_acc;
  j["asr"] = asr;
  j["classwise_acc"] = classwise_acc;
  j["config_ref"] = config_ref;
  return j.dump();
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricsReport r;
  r.dataset = j.value("dataset", "");
  r.attack_kind = j.value("attack_kind", "");
  r.poison_ratio = j.value("poison_ratio", 0.0);
  r.epsilon = j.value("epsilon", 0.0);
  r.magnify_scale = j.value("magnify_scale", 0.0);
  r.seed_list = j.value("seed_list", std::vector<uint64_t>{});
  r.acc = j.at("acc").get<double>();
  r.tar_acc = j.at("tar_acc").get<double>();
  r.asr = j.at("asr").get<double>();
  r.classwise_acc = j.value("classwise_acc", std::vector<double>{});
  r.config_ref = j.value("config_ref", "");
  return r;
}

CleanEval evaluate_clean(const ModelHandle& model, const LabeledDataset& test_set,
                         int target_class) {
  model.validate_input(test_set.images);
  const int k = test_set.num_classes();
  if (target_class < 0 || target_class >= k)
    throw std::invalid_argument("evaluate_clean: target class outside dataset classes");
  std::vector<int64_t> correct(static_cast<size_t>(k), 0), counts(static_cast<size_t>(k), 0);

  const int batch = 256;
  for (int64_t start = 0; start < test_set.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, test_set.size());
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor logits = model.predict(gather_batch(test_set, idx));
    const int heads = static_cast<int>(logits.dim(1));
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const float* z = logits.data() + i * heads;
      int arg = 0;
      for (int j = 1; j < heads; ++j)
        if (z[j] > z[arg]) arg = j;
      const int y = test_set.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
      ++counts[static_cast<size_t>(y)];
      if (arg == y) ++correct[static_cast<size_t>(y)];
    }
  }
  if (counts[static_cast<size_t>(target_class)] == 0)
    throw std::invalid_argument("evaluate_clean: target class absent from the test set");

  CleanEval out;
  out.class_counts = counts;
  int64_t total_correct = 0;
  for (int c = 0; c < k; ++c) {
    total_correct += correct[static_cast<size_t>(c)];
    out.classwise.push_back(counts[static_cast<size_t>(c)] == 0
                                ? 0.0
                                : 100.0 * static_cast<double>(correct[static_cast<size_t>(c)]) /
                                      static_cast<double>(counts[static_cast<size_t>(c)]));
  }
  out.acc = 100.0 * static_cast<double>(total_correct) / static_cast<double>(test_set.size());
  out.tar_acc = out.classwise[static_cast<size_t>(target_class)];
  return out;
}

double evaluate_asr(const ModelHandle& model, const LabeledDataset& test_set,
                    const TriggerArtifact& trigger, int target_class, double magnify_scale,
                    AsrMode mode, int source_class) {
  model.validate_input(test_set.images);
  if (magnify_scale <= 0.0) throw std::invalid_argument("evaluate_asr: scale must be positive");
  if (mode == AsrMode::one_to_one) {
    if (source_class < 0)
      throw std::invalid_argument("evaluate_asr: one_to_one mode needs a source class");
    if (source_class == target_class)
      throw std::invalid_argument("evaluate_asr: source class equals target class");
  }

  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < test_set.size(); ++i) {
    const int y = test_set.labels[static_cast<size_t>(i)];
    if (mode == AsrMode::all_to_one ? (y != target_class) : (y == source_class))
      eligible.push_back(i);
  }
  if (eligible.empty())
    throw std::invalid_argument("evaluate_asr: no eligible test examples (check modes/classes)");

  const TriggerArtifact scaled = magnify(trigger, magnify_scale);
  const bool is_patch = scaled.constraint.kind == ConstraintKind::patch;
  const int64_t h = test_set.images.dim(2), w = test_set.images.dim(3);

  int64_t hits = 0;
  const int batch = 256;
  for (size_t start = 0; start < eligible.size(); start += batch) {
    const size_t stop = std::min(start + static_cast<size_t>(batch), eligible.size());
    std::vector<int64_t> idx(eligible.begin() + static_cast<int64_t>(start),
                             eligible.begin() + static_cast<int64_t>(stop));
    Tensor x({static_cast<int64_t>(idx.size()), test_set.images.dim(1), h, w});
    for (size_t i = 0; i < idx.size(); ++i) {
      Tensor img = test_set.image(idx[i]);
      Tensor patched;
      if (is_patch) {
        // Deterministic per-example placement keeps repeated calls identical.
        Rng prng(0x9e3779b9ull ^ static_cast<uint64_t>(idx[i]));
        Placement at;
        at.row = prng.range_int(0, static_cast<int>(h) - scaled.constraint.patch_h);
        at.col = prng.range_int(0, static_cast<int>(w) - scaled.constraint.patch_w);
        patched = apply_trigger(img, scaled, at);
      } else {
        patched = apply_trigger(img, scaled);
      }
      std::copy_n(patched.data(), patched.size(),
                  x.data() + static_cast<int64_t>(i) * patched.size());
    }
    Tensor logits = model.predict(x);
    const int heads = static_cast<int>(logits.dim(1));
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const float* z = logits.data() + i * heads;
      int arg = 0;
      for (int j = 1; j < heads; ++j)
        if (z[j] > z[arg]) arg = j;
      if (arg == target_class) ++hits;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(eligible.size());
}

}  // namespace poisonlab
