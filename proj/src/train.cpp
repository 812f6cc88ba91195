#include "poisonlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace poisonlab {

std::string to_string(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "cosine_annealing";
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine_annealing") return LrSchedule::cosine_annealing;
  throw std::invalid_argument("unknown lr schedule: " + s);
}

std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::crop: return "crop";
    case Augmentation::hflip: return "hflip";
    case Augmentation::rotation: return "rotation";
  }
  return "crop";
}

Augmentation augmentation_from_string(const std::string& s) {
  if (s == "crop") return Augmentation::crop;
  if (s == "hflip") return Augmentation::hflip;
  if (s == "rotation") return Augmentation::rotation;
  throw std::invalid_argument("unknown augmentation: " + s);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (learning_rate < 0) throw std::invalid_argument("TrainConfig: negative learning rate");
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["optimizer"] = to_string(optimizer_id);
  j["learning_rate"] = learning_rate;
  j["lr_schedule"] = to_string(lr_schedule);
  j["batch_size"] = batch_size;
  std::vector<std::string> augs;
  for (auto a : augmentations) augs.push_back(to_string(a));
  j["augmentations"] = augs;
  j["seed"] = seed;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  return j.dump();
}

Tensor gather_batch(const LabeledDataset& data, const std::vector<int64_t>& indices) {
  const int64_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
  const int64_t n = c * h * w;
  Tensor out({static_cast<int64_t>(indices.size()), c, h, w});
  for (size_t i = 0; i < indices.size(); ++i)
    std::copy_n(data.images.data() + indices[i] * n, n,
                out.data() + static_cast<int64_t>(i) * n);
  return out;
}

std::vector<int> gather_labels(const LabeledDataset& data, const std::vector<int64_t>& indices) {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i)
    out[i] = data.labels[static_cast<size_t>(indices[i])];
  return out;
}

namespace {

// Shift by (dy, dx) with zero fill; equivalent to 4-pixel pad + random crop.
void shift_image(float* img, int c, int h, int w, int dy, int dx) {
  if (dy == 0 && dx == 0) return;
  std::vector<float> tmp(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    float* plane = img + static_cast<int64_t>(ch) * h * w;
    std::fill(tmp.begin(), tmp.end(), 0.0f);
    for (int y = 0; y < h; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (int x = 0; x < w; ++x) {
        const int sx = x - dx;
        if (sx >= 0 && sx < w) tmp[static_cast<size_t>(y) * w + x] = plane[sy * w + sx];
      }
    }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

void hflip_image(float* img, int c, int h, int w) {
  for (int ch = 0; ch < c; ++ch) {
    float* plane = img + static_cast<int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x) std::swap(plane[y * w + x], plane[y * w + (w - 1 - x)]);
  }
}

void rotate_image(float* img, int c, int h, int w, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  std::vector<float> tmp(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    float* plane = img + static_cast<int64_t>(ch) * h * w;
    std::fill(tmp.begin(), tmp.end(), 0.0f);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // Inverse map, nearest neighbor.
        const double ry = y - cy, rx = x - cx;
        const int sy = static_cast<int>(std::lround(cs * ry + sn * rx + cy));
        const int sx = static_cast<int>(std::lround(-sn * ry + cs * rx + cx));
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          tmp[static_cast<size_t>(y) * w + x] = plane[sy * w + sx];
      }
    std::copy(tmp.begin(), tmp.end(), plane);
  }
}

}  // namespace

Tensor augment_batch(const LabeledDataset& data, const std::vector<int64_t>& indices,
                     const std::vector<Augmentation>& augs, Rng& rng) {
  Tensor batch = gather_batch(data, indices);
  if (augs.empty()) return batch;
  const int c = static_cast<int>(batch.dim(1));
  const int h = static_cast<int>(batch.dim(2));
  const int w = static_cast<int>(batch.dim(3));
  const bool crop = std::find(augs.begin(), augs.end(), Augmentation::crop) != augs.end();
  const bool flip = std::find(augs.begin(), augs.end(), Augmentation::hflip) != augs.end();
  const bool rot = std::find(augs.begin(), augs.end(), Augmentation::rotation) != augs.end();
  // Draws happen in a fixed order on the shared rng to keep runs reproducible.
  struct Draw {
    int dy = 0, dx = 0;
    bool do_flip = false;
    double deg = 0.0;
  };
  std::vector<Draw> draws(static_cast<size_t>(batch.dim(0)));
  for (auto& d : draws) {
    if (crop) {
      d.dy = rng.range_int(-4, 4);
      d.dx = rng.range_int(-4, 4);
    }
    if (flip) d.do_flip = rng.uniform() < 0.5;
    if (rot) d.deg = rng.uniform(-15.0, 15.0);
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < batch.dim(0); ++i) {
    float* img = batch.data() + i * c * h * w;
    const Draw& d = draws[static_cast<size_t>(i)];
    if (rot && d.deg != 0.0) rotate_image(img, c, h, w, d.deg);
    if (crop) shift_image(img, c, h, w, d.dy, d.dx);
    if (flip && d.do_flip) hflip_image(img, c, h, w);
  }
  return batch;
}

namespace {

double mean_loss_eval(nn::Network& net, const LabeledDataset& data, int64_t cap,
                      int batch_size) {
  const int64_t n = std::min<int64_t>(data.size(), cap);
  double total = 0.0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, n);
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor batch = gather_batch(data, idx);
    Tensor logits = net.forward(batch, false);
    auto ce = nn::softmax_cross_entropy(logits, gather_labels(data, idx), false);
    total += ce.mean_loss * static_cast<double>(stop - start);
  }
  return total / static_cast<double>(n);
}

double accuracy_impl(nn::Network& net, const LabeledDataset& data, int batch_size) {
  int64_t correct = 0;
  for (int64_t start = 0; start < data.size(); start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, data.size());
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor logits = net.forward(gather_batch(data, idx), false);
    const int k = static_cast<int>(logits.dim(1));
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const float* z = logits.data() + i * k;
      int arg = 0;
      for (int j = 1; j < k; ++j)
        if (z[j] > z[arg]) arg = j;
      if (arg == data.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

constexpr int64_t kLossProbeCap = 2048;

}  // namespace

ModelHandle train_classifier(const LabeledDataset& data, const ModelSpec& spec,
                             const TrainConfig& config, const ModelHandle* init,
                             const LabeledDataset* eval_set, const EpochObserver& observer) {
  if (data.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
  config.validate();

  ModelHandle handle;
  if (init != nullptr) {
    handle = clone_model(*init);
  } else {
    handle.spec = spec;
    Rng init_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    handle.net = build_network(spec, init_rng);
    handle.lineage = "initialized";
  }
  nn::Network& net = *handle.net;

  auto params = net.params();
  auto opt = make_optimizer(config.optimizer_id, config.learning_rate, config.momentum,
                            config.weight_decay);

  const double initial_loss = mean_loss_eval(net, data, kLossProbeCap, config.batch_size);

  Rng rng(config.seed);
  std::vector<int64_t> order(static_cast<size_t>(data.size()));
  for (int64_t i = 0; i < data.size(); ++i) order[static_cast<size_t>(i)] = i;

  double last_finite = initial_loss;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_schedule == LrSchedule::cosine_annealing
                          ? cosine_annealed_lr(config.learning_rate, epoch, config.epochs)
                          : config.learning_rate;
    opt->set_lr(lr);
    rng.shuffle(order);
    for (int64_t start = 0; start < data.size(); start += config.batch_size) {
      const int64_t stop = std::min<int64_t>(start + config.batch_size, data.size());
      std::vector<int64_t> idx(order.begin() + start, order.begin() + stop);
      Tensor batch = augment_batch(data, idx, config.augmentations, rng);
      Tensor logits = net.forward(batch, true);
      auto ce = nn::softmax_cross_entropy(logits, gather_labels(data, idx), true);
      if (!std::isfinite(ce.mean_loss)) throw DivergenceError(last_finite);
      last_finite = ce.mean_loss;
      net.zero_grad();
      net.backward(ce.dlogits, false, true);
      opt->step(params);
    }
    if (observer) observer(epoch, handle);
  }

  const double final_loss = mean_loss_eval(net, data, kLossProbeCap, config.batch_size);
  const double train_acc = accuracy_impl(net, data, config.batch_size);
  double eval_acc = -1.0;
  if (eval_set != nullptr) eval_acc = accuracy_impl(net, *eval_set, config.batch_size);

  json digest;
  digest["config"] = json::parse(config.to_json());
  digest["initial_loss"] = initial_loss;
  digest["final_loss"] = final_loss;
  digest["train_accuracy"] = train_acc;
  if (eval_acc >= 0.0) digest["eval_accuracy"] = eval_acc;
  digest["examples"] = data.size();
  digest["dataset_source"] = data.source_id;
  if (init != nullptr) {
    digest["parent_lineage"] = init->lineage;
    digest["parent_digest"] = json::parse(
        init->training_digest.empty() ? std::string("null") : init->training_digest);
  }
  handle.training_digest = digest.dump();
  handle.lineage = "victim";
  return handle;
}

ModelHandle pretrain_surrogate(const LabeledDataset& pood, const ModelSpec& spec,
                               const TrainConfig& config, const LabeledDataset* eval_set) {
  if (pood.size() == 0) throw std::invalid_argument("pretrain_surrogate: empty POOD set");
  ModelSpec s = spec;
  s.num_classes = pood.num_classes();
  ModelHandle h = train_classifier(pood, s, config, nullptr, eval_set);
  h.lineage = "pretrained-on-POOD";
  return h;
}

ModelHandle poi_warmup(const ModelHandle& surrogate, const LabeledDataset& target_data,
                       int epochs, const TrainConfig& config) {
  if (target_data.size() == 0) throw std::invalid_argument("poi_warmup: empty target data");
  {
    const int first = target_data.labels.front();
    for (int l : target_data.labels)
      if (l != first)
        throw std::invalid_argument("poi_warmup: target data must contain exactly one class");
  }
  if (epochs == 0) return surrogate;

  ModelHandle widened = append_head_unit(surrogate);

  // Fine-tune the whole network on the target slice, labels mapped onto the
  // appended unit. Warm-up runs full batch when the slice is small.
  LabeledDataset mapped = target_data;
  mapped.class_names.assign(static_cast<size_t>(widened.target_unit), "surrogate_class");
  mapped.class_names.push_back("target");
  std::fill(mapped.labels.begin(), mapped.labels.end(), widened.target_unit);

  TrainConfig warm = config;
  warm.epochs = epochs;
  warm.batch_size = static_cast<int>(std::min<int64_t>(350, target_data.size()));
  const int saved_unit = widened.target_unit;
  ModelHandle out = train_classifier(mapped, widened.spec, warm, &widened);
  out.lineage = "warmed-up";
  out.target_unit = saved_unit;
  return out;
}

std::vector<float> loss_per_example(const ModelHandle& model, const LabeledDataset& data) {
  model.validate_input(data.images);
  if (data.num_classes() > model.num_classes())
    throw std::invalid_argument("loss_per_example: dataset classes exceed model head");
  std::vector<float> out;
  out.reserve(static_cast<size_t>(data.size()));
  const int batch = 256;
  std::lock_guard<std::mutex> lock(model.net->eval_mutex());
  for (int64_t start = 0; start < data.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, data.size());
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor logits = model.net->forward(gather_batch(data, idx), false);
    auto ce = nn::softmax_cross_entropy(logits, gather_labels(data, idx), false);
    out.insert(out.end(), ce.per_example.begin(), ce.per_example.end());
  }
  return out;
}

double accuracy(const ModelHandle& model, const LabeledDataset& data) {
  model.validate_input(data.images);
  std::lock_guard<std::mutex> lock(model.net->eval_mutex());
  return accuracy_impl(*model.net, data, 256);
}

}  // namespace poisonlab
