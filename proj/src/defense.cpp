#include "poisonlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>

#include <nlohmann/json.hpp>

#include "poisonlab/dct.hpp"
#include "poisonlab/digest.hpp"
#include "poisonlab/rng.hpp"

using json = nlohmann::json;

namespace poisonlab {

MetricsReport EvalContext::measure(const ModelHandle& model) const {
  MetricsReport r;
  auto clean = evaluate_clean(model, *test_set, target_class);
  r.acc = clean.acc;
  r.tar_acc = clean.tar_acc;
  r.classwise_acc = clean.classwise;
  if (trigger != nullptr)
    r.asr = evaluate_asr(model, *test_set, *trigger, target_class, magnify_scale,
                         AsrMode::all_to_one);
  return r;
}

std::string DefenseReport::to_json() const {
  json j;
  j["defense_id"] = defense_id;
  if (has_post) {
    j["pre_metrics"] = json::parse(pre_metrics.to_json());
    j["post_metrics"] = json::parse(post_metrics.to_json());
  }
  if (has_detection) {
    j["detection_acc"] = detection_acc;
    j["detection_rate"] = detection_rate;
  }
  if (has_isolation) {
    j["isolated_indices"] = isolated_indices;
    j["poisoned_among_isolated"] = poisoned_among_isolated;
    j["target_class_among_isolated"] = target_class_among_isolated;
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Fine-pruning

std::vector<double> mean_feature_activation(const ModelHandle& model, const LabeledDataset& data) {
  model.validate_input(data.images);
  std::lock_guard<std::mutex> lock(model.net->eval_mutex());
  std::vector<double> mean;
  int64_t seen = 0;
  const int batch = 256;
  for (int64_t start = 0; start < data.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, data.size());
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor f = model.net->features(gather_batch(data, idx));
    const int64_t c = f.dim(1), p = f.dim(2) * f.dim(3);
    if (mean.empty()) mean.assign(static_cast<size_t>(c), 0.0);
    for (int64_t n = 0; n < f.dim(0); ++n)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* plane = f.data() + (n * c + ch) * p;
        double acc = 0.0;
        for (int64_t i = 0; i < p; ++i) acc += plane[i];
        mean[static_cast<size_t>(ch)] += acc / static_cast<double>(p);
      }
    seen += stop - start;
  }
  for (double& v : mean) v /= static_cast<double>(seen);
  return mean;
}

namespace {

// The classifier head reads the pooled features; zeroing its input columns
// removes a unit's influence everywhere downstream.
void apply_prune_mask(ModelHandle& model, const std::vector<uint8_t>& pruned) {
  auto* linear = dynamic_cast<nn::Linear*>(model.net->layers.back().get());
  if (linear == nullptr) throw std::runtime_error("fine_prune: final layer is not a linear head");
  const int64_t out = linear->w.dim(0), in = linear->w.dim(1);
  if (static_cast<int64_t>(pruned.size()) != in)
    throw std::runtime_error("fine_prune: mask size does not match head width");
  for (int64_t o = 0; o < out; ++o)
    for (int64_t i = 0; i < in; ++i)
      if (pruned[static_cast<size_t>(i)]) linear->w[o * in + i] = 0.0f;
}

}  // namespace

std::pair<ModelHandle, DefenseReport> fine_prune(const ModelHandle& model,
                                                 const LabeledDataset& defense_set,
                                                 const PruneRule& rule, int finetune_epochs,
                                                 const TrainConfig& finetune,
                                                 const EvalContext& eval) {
  DefenseReport report;
  report.defense_id = "fine_prune";
  report.has_post = true;
  report.pre_metrics = eval.measure(model);

  ModelHandle pruned_model = clone_model(model);
  const auto activation = mean_feature_activation(model, defense_set);
  const int64_t units = static_cast<int64_t>(activation.size());
  const int64_t budget = static_cast<int64_t>(std::floor(rule.max_fraction * units));
  if (budget > units)
    throw std::invalid_argument("fine_prune: pruning budget exceeds unit count");

  std::vector<int64_t> order(static_cast<size_t>(units));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return activation[static_cast<size_t>(a)] < activation[static_cast<size_t>(b)];
  });

  const double base_acc = 100.0 * accuracy(pruned_model, defense_set);
  std::vector<uint8_t> mask(static_cast<size_t>(units), 0);
  std::vector<uint8_t> accepted = mask;
  int64_t taken = 0;
  while (taken < budget) {
    const int64_t step = std::min<int64_t>(rule.reevaluate_every, budget - taken);
    for (int64_t i = 0; i < step; ++i)
      mask[static_cast<size_t>(order[static_cast<size_t>(taken + i)])] = 1;
    ModelHandle probe = clone_model(pruned_model);
    apply_prune_mask(probe, mask);
    const double acc = 100.0 * accuracy(probe, defense_set);
    if (base_acc - acc > rule.acc_drop_cap) break;  // cumulative cap
    accepted = mask;
    taken += step;
  }
  apply_prune_mask(pruned_model, accepted);

  if (finetune_epochs > 0) {
    TrainConfig ft = finetune;
    ft.epochs = finetune_epochs;
    ModelHandle tuned =
        train_classifier(defense_set, pruned_model.spec, ft, &pruned_model);
    apply_prune_mask(tuned, accepted);  // masks stay fixed through fine-tuning
    pruned_model = tuned;
  }
  pruned_model.lineage = "fine-pruned";

  report.post_metrics = eval.measure(pruned_model);
  return {std::move(pruned_model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Frequency detection

Tensor frequency_features(const Tensor& images) {
  if (images.rank() != 4) throw std::invalid_argument("frequency_features: expected (N,C,H,W)");
  const int64_t n = images.dim(0);
  const int64_t d = images.dim(1) * images.dim(2) * images.dim(3);
  Tensor out({n, d});
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    Tensor img({images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.data() + i * d, d, img.data());
    auto mags = dct2_magnitudes(img);
    for (int64_t j = 0; j < d; ++j)
      out[i * d + j] = static_cast<float>(mags[static_cast<size_t>(j)]);
  }
  return out;
}

void FrequencyDetector::save(const std::string& path_stem) const {
  json j;
  j["mode"] = mode == Mode::linear ? "linear" : "threshold";
  j["trained"] = trained;
  j["cutoff"] = cutoff;
  j["energy_threshold"] = energy_threshold;
  j["bias"] = b;
  std::ofstream mf(path_stem + ".json");
  mf << j.dump(2) << "\n";
  if (mode == Mode::linear) {
    std::ofstream wf(path_stem + ".w", std::ios::binary);
    auto dump = [&wf](const Tensor& t) {
      const int64_t n = t.size();
      wf.write(reinterpret_cast<const char*>(&n), sizeof(n));
      wf.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
    };
    dump(w);
    dump(feat_mean);
    dump(feat_inv_std);
  }
}

FrequencyDetector FrequencyDetector::load(const std::string& path_stem) {
  std::ifstream mf(path_stem + ".json");
  if (!mf) throw std::runtime_error("cannot read detector manifest " + path_stem + ".json");
  json j = json::parse(mf);
  FrequencyDetector d;
  d.mode = j.at("mode") == "linear" ? Mode::linear : Mode::threshold;
  d.trained = j.at("trained").get<bool>();
  d.cutoff = j.at("cutoff").get<int>();
  d.energy_threshold = j.at("energy_threshold").get<double>();
  d.b = j.at("bias").get<float>();
  if (d.mode == Mode::linear) {
    std::ifstream wf(path_stem + ".w", std::ios::binary);
    if (!wf) throw std::runtime_error("cannot read detector weights " + path_stem + ".w");
    auto slurp = [&wf](Tensor& t) {
      int64_t n = 0;
      wf.read(reinterpret_cast<char*>(&n), sizeof(n));
      t.resize({n});
      wf.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(n * sizeof(float)));
    };
    slurp(d.w);
    slurp(d.feat_mean);
    slurp(d.feat_inv_std);
  }
  return d;
}

namespace {

// Synthetic detector-training perturbations: either a stamped random square
// or dense bounded noise, both broadband in the DCT domain.
Tensor perturb_for_detector(const Tensor& img, Rng& rng) {
  Tensor out = img;
  const int c = static_cast<int>(img.dim(0));
  const int h = static_cast<int>(img.dim(1));
  const int w = static_cast<int>(img.dim(2));
  if (rng.uniform() < 0.5) {
    const int size = rng.range_int(2, 5);
    const int row = rng.range_int(0, h - size);
    const int col = rng.range_int(0, w - size);
    for (int ch = 0; ch < c; ++ch) {
      const float v = rng.uniformf(0.0f, 1.0f);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out.at(ch, row + y, col + x) = v;
    }
  } else {
    const float eps = rng.uniformf(4.0f / 255.0f, 32.0f / 255.0f);
    for (int64_t i = 0; i < out.size(); ++i) out[i] += rng.uniformf(-eps, eps);
  }
  out.clamp_(0.0f, 1.0f);
  return out;
}

}  // namespace

FrequencyDetector train_frequency_detector(const LabeledDataset& clean,
                                           FrequencyDetector::Mode mode,
                                           const DetectorTrainOptions& options) {
  FrequencyDetector det;
  det.mode = mode;
  det.cutoff = options.cutoff;
  if (mode == FrequencyDetector::Mode::threshold) {
    det.trained = true;
    return det;
  }
  if (clean.size() == 0) throw std::invalid_argument("detector training needs clean images");

  Rng rng(options.seed);
  const int64_t n = clean.size();
  Tensor images({2 * n, clean.images.dim(1), clean.images.dim(2), clean.images.dim(3)});
  std::vector<int> labels(static_cast<size_t>(2 * n));
  const int64_t d = clean.images.dim(1) * clean.images.dim(2) * clean.images.dim(3);
  for (int64_t i = 0; i < n; ++i) {
    Tensor img = clean.image(i);
    std::copy_n(img.data(), d, images.data() + i * d);
    labels[static_cast<size_t>(i)] = 0;
    Tensor bad = perturb_for_detector(img, rng);
    std::copy_n(bad.data(), d, images.data() + (n + i) * d);
    labels[static_cast<size_t>(n + i)] = 1;
  }
  Tensor feats = frequency_features(images);
  // Internal preprocessing: log magnitudes (multiplicative energy shifts
  // become additive), then per-dimension standardization so the DC column
  // does not dominate.
  for (int64_t i = 0; i < feats.size(); ++i) feats[i] = std::log1p(feats[i]);

  det.feat_mean.resize({d});
  det.feat_inv_std.resize({d});
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < feats.dim(0); ++i) mean += feats[i * d + j];
    mean /= static_cast<double>(feats.dim(0));
    double var = 0.0;
    for (int64_t i = 0; i < feats.dim(0); ++i) {
      const double dv = feats[i * d + j] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(feats.dim(0));
    det.feat_mean[j] = static_cast<float>(mean);
    det.feat_inv_std[j] = static_cast<float>(1.0 / std::sqrt(var + 1e-8));
  }
  for (int64_t i = 0; i < feats.dim(0); ++i)
    for (int64_t j = 0; j < d; ++j)
      feats[i * d + j] = (feats[i * d + j] - det.feat_mean[j]) * det.feat_inv_std[j];

  // Ridge-regularized logistic regression; the feature dimension usually
  // dwarfs the sample count, so the L2 term carries the generalization.
  det.w.resize({d});
  det.b = 0.0f;
  std::vector<int64_t> order(static_cast<size_t>(feats.dim(0)));
  std::iota(order.begin(), order.end(), 0);
  const int batch = 128;
  const double l2 = 1e-3;
  Tensor grad({d});
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t stop = std::min(order.size(), start + batch);
      grad.fill(0.0f);
      double gb = 0.0;
      for (size_t ii = start; ii < stop; ++ii) {
        const int64_t i = order[ii];
        const float* f = feats.data() + i * d;
        double z = det.b;
        for (int64_t j = 0; j < d; ++j) z += static_cast<double>(det.w[j]) * f[j];
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double err = p - labels[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) grad[j] += static_cast<float>(err * f[j]);
        gb += err;
      }
      const float lr = static_cast<float>(options.learning_rate / static_cast<double>(stop - start));
      const float decay = 1.0f - static_cast<float>(options.learning_rate * l2);
      for (int64_t j = 0; j < d; ++j) det.w[j] = decay * det.w[j] - lr * grad[j];
      det.b -= lr * static_cast<float>(gb);
    }
  }
  det.trained = true;
  return det;
}

DetectionResult frequency_detect(const FrequencyDetector& detector, const Tensor& images,
                                 const std::vector<int>* poisoned_truth) {
  if (!detector.trained) throw std::runtime_error("frequency_detect: detector is not trained");
  if (images.rank() != 4) throw std::invalid_argument("frequency_detect: expected (N,C,H,W)");
  const int64_t n = images.dim(0);
  const int64_t d = images.dim(1) * images.dim(2) * images.dim(3);
  DetectionResult result;
  result.flags.resize(static_cast<size_t>(n), 0);

  if (detector.mode == FrequencyDetector::Mode::threshold) {
    const int cut = detector.cutoff >= 0
                        ? detector.cutoff
                        : (static_cast<int>(images.dim(2) + images.dim(3)) - 2) / 3;
    for (int64_t i = 0; i < n; ++i) {
      Tensor img({images.dim(1), images.dim(2), images.dim(3)});
      std::copy_n(images.data() + i * d, d, img.data());
      result.flags[static_cast<size_t>(i)] =
          high_band_energy_fraction(img, cut) > detector.energy_threshold ? 1 : 0;
    }
  } else {
    Tensor feats = frequency_features(images);
    for (int64_t i = 0; i < n; ++i) {
      double z = detector.b;
      const float* f = feats.data() + i * d;
      for (int64_t j = 0; j < d; ++j)
        z += static_cast<double>(detector.w[j]) *
             ((f[j] - detector.feat_mean[j]) * detector.feat_inv_std[j]);
      result.flags[static_cast<size_t>(i)] = z > 0.0 ? 1 : 0;
    }
  }

  if (poisoned_truth != nullptr) {
    if (poisoned_truth->size() != result.flags.size())
      throw std::invalid_argument("frequency_detect: truth size mismatch");
    int64_t correct = 0, poisoned = 0, caught = 0;
    for (size_t i = 0; i < result.flags.size(); ++i) {
      if (result.flags[i] == (*poisoned_truth)[i]) ++correct;
      if ((*poisoned_truth)[i] == 1) {
        ++poisoned;
        if (result.flags[i] == 1) ++caught;
      }
    }
    result.detection_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    result.detection_rate =
        poisoned == 0 ? 0.0 : 100.0 * static_cast<double>(caught) / static_cast<double>(poisoned);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Loss isolation

DefenseReport abl_isolate(const LossTrace& trace, double isolation_rate, double loss_threshold,
                          const PoisonPlan& plan, const std::vector<int>* labels) {
  if (trace.per_epoch.empty())
    throw std::invalid_argument("abl_isolate: loss history is empty (needs early epochs)");
  const int64_t n = trace.examples();
  for (const auto& epoch : trace.per_epoch)
    if (static_cast<int64_t>(epoch.size()) != n)
      throw std::invalid_argument("abl_isolate: ragged loss history");
  if (isolation_rate <= 0.0 || isolation_rate > 1.0)
    throw std::invalid_argument("abl_isolate: isolation rate outside (0,1]");

  const auto& last = trace.per_epoch.back();
  const int64_t want = static_cast<int64_t>(std::ceil(isolation_rate * static_cast<double>(n)));

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const float la = last[static_cast<size_t>(a)], lb = last[static_cast<size_t>(b)];
    if (la != lb) return la < lb;
    return a < b;
  });

  // Under-threshold examples first (they stay loss-sorted); pad with the
  // next-lowest losses when the threshold filter leaves too few.
  std::vector<int64_t> isolated;
  isolated.reserve(static_cast<size_t>(want));
  for (int64_t i : order) {
    if (static_cast<int64_t>(isolated.size()) == want) break;
    if (last[static_cast<size_t>(i)] <= loss_threshold) isolated.push_back(i);
  }
  if (static_cast<int64_t>(isolated.size()) < want) {
    for (int64_t i : order) {
      if (static_cast<int64_t>(isolated.size()) == want) break;
      if (last[static_cast<size_t>(i)] > loss_threshold) isolated.push_back(i);
    }
  }
  std::sort(isolated.begin(), isolated.end());

  DefenseReport report;
  report.defense_id = "abl";
  report.has_isolation = true;
  report.isolated_indices = isolated;
  for (int64_t i : isolated) {
    if (std::binary_search(plan.indices.begin(), plan.indices.end(), i))
      ++report.poisoned_among_isolated;
    if (labels != nullptr && (*labels)[static_cast<size_t>(i)] == plan.target_class)
      ++report.target_class_among_isolated;
  }
  return report;
}

ModelHandle abl_unlearn(const ModelHandle& model, const LabeledDataset& data,
                        const std::vector<int64_t>& isolated, int epochs, double learning_rate) {
  if (isolated.empty() || epochs <= 0) return model;
  ModelHandle out = clone_model(model);
  nn::Network& net = *out.net;
  auto params = net.params();
  Sgd opt(learning_rate, 0.0, 0.0);
  Rng rng(0x0ab1);
  std::vector<int64_t> order = isolated;
  const int batch = 64;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t stop = std::min(order.size(), start + batch);
      std::vector<int64_t> idx(order.begin() + static_cast<int64_t>(start),
                               order.begin() + static_cast<int64_t>(stop));
      Tensor x = gather_batch(data, idx);
      Tensor logits = net.forward(x, true);
      auto ce = nn::softmax_cross_entropy(logits, gather_labels(data, idx), true);
      // Reversed gradient: ascend the loss on isolated examples.
      ce.dlogits.scale_(-1.0f);
      net.zero_grad();
      net.backward(ce.dlogits, false, true);
      opt.step(params);
    }
  }
  out.lineage = "abl-unlearned";
  return out;
}

// ---------------------------------------------------------------------------
// Registry

namespace {
std::map<std::string, DefenseFn>& registry() {
  static std::map<std::string, DefenseFn> r;
  return r;
}
}  // namespace

void register_defense(const std::string& id, DefenseFn fn) { registry()[id] = std::move(fn); }

bool defense_registered(const std::string& id) { return registry().count(id) > 0; }

DefenseReport run_defense(const std::string& id, const DefenseContext& ctx) {
  auto it = registry().find(id);
  if (it == registry().end())
    throw std::invalid_argument("defense not registered: " + id +
                                " (available plug-in slot; provide an implementation)");
  return it->second(ctx);
}

std::vector<std::string> registered_defenses() {
  std::vector<std::string> out;
  for (auto& [k, v] : registry()) out.push_back(k);
  return out;
}

}  // namespace poisonlab
