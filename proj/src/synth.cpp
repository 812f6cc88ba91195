#include "poisonlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "poisonlab/digest.hpp"
#include "poisonlab/train.hpp"

using json = nlohmann::json;

namespace poisonlab {

void SynthesisConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("SynthesisConfig: iterations must be >= 1");
  if (step_size < 0) throw std::invalid_argument("SynthesisConfig: negative step size");
  if (batch_size < 1) throw std::invalid_argument("SynthesisConfig: batch_size must be >= 1");
}

std::string SynthesisConfig::to_json() const {
  json j;
  j["iterations"] = iterations;
  j["step_size"] = step_size;
  j["batch_size"] = batch_size;
  j["optimizer"] = to_string(optimizer_id);
  j["seed"] = seed;
  return j.dump();
}

std::string SynthesisConfig::digest() const { return sha256_hex(to_json()).substr(0, 16); }

ModelHandle resolve_target_head(const ModelHandle& surrogate) {
  if (surrogate.target_unit >= 0) return surrogate;
  return append_head_unit(surrogate);
}

double trigger_objective(const ModelHandle& surrogate, const LabeledDataset& target_data,
                         const Tensor& delta) {
  ModelHandle model = resolve_target_head(surrogate);
  const int unit = model.target_unit;
  nn::Network& net = *model.net;
  const int batch = 256;
  double total = 0.0;
  std::lock_guard<std::mutex> lock(net.eval_mutex());
  for (int64_t start = 0; start < target_data.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, target_data.size());
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor x = gather_batch(target_data, idx);
    for (int64_t i = 0; i < x.dim(0); ++i)
      for (int64_t j = 0; j < delta.size(); ++j) x[i * delta.size() + j] += delta[j];
    Tensor logits = net.forward(x, false);
    std::vector<int> labels(idx.size(), unit);
    auto ce = nn::softmax_cross_entropy(logits, labels, false);
    total += ce.mean_loss * static_cast<double>(stop - start);
  }
  return total / static_cast<double>(target_data.size());
}

namespace {

// Shared mini-batch loop; step_fn(x_batch) -> gradient w.r.t. the canvas
// perturbation for that batch, already averaged over the batch.
struct BatchCursor {
  std::vector<int64_t> order;
  size_t pos = 0;
  Rng* rng;
  explicit BatchCursor(int64_t n, Rng* r) : rng(r) {
    order.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    rng->shuffle(order);
  }
  std::vector<int64_t> next(int batch) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) {
      if (pos == order.size()) {
        rng->shuffle(order);
        pos = 0;
      }
      idx.push_back(order[pos++]);
    }
    return idx;
  }
};

// Gradient of the mean target-unit CE w.r.t. an additive full-canvas delta.
Tensor batch_input_gradient(nn::Network& net, int unit, const Tensor& x, double* loss_out) {
  const int64_t b = x.dim(0);
  Tensor logits = net.forward(x, false);
  std::vector<int> labels(static_cast<size_t>(b), unit);
  auto ce = nn::softmax_cross_entropy(logits, labels, true);
  if (loss_out) *loss_out = ce.mean_loss;
  Tensor dx = net.backward(ce.dlogits, true, false);
  Tensor g({x.dim(1), x.dim(2), x.dim(3)});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < g.size(); ++j) g[j] += dx[i * g.size() + j];
  // dlogits already carries the 1/B mean factor.
  return g;
}

}  // namespace

TriggerArtifact synthesize_trigger(const ModelHandle& surrogate,
                                   const LabeledDataset& target_data, int target_class,
                                   const ConstraintSet& constraint,
                                   const SynthesisConfig& config) {
  config.validate();
  if (target_data.size() == 0)
    throw std::invalid_argument("synthesize_trigger: empty target data");
  {
    const int first = target_data.labels.front();
    for (int l : target_data.labels)
      if (l != first)
        throw std::invalid_argument("synthesize_trigger: target data must be single-class");
  }
  ModelHandle model = resolve_target_head(surrogate);
  const int unit = model.target_unit;
  nn::Network& net = *model.net;

  const auto img_shape = target_data.image_shape();
  Tensor delta({img_shape[0], img_shape[1], img_shape[2]});  // zero start

  Tensor grad(delta.shape());
  std::vector<nn::ParamRef> delta_param{{"delta", &delta, &grad}};
  auto opt = make_optimizer(config.optimizer_id, config.step_size, 0.0, 0.0);

  Rng rng(config.seed);
  BatchCursor cursor(target_data.size(), &rng);

  std::lock_guard<std::mutex> lock(net.eval_mutex());

  auto full_loss = [&](const Tensor& d) {
    const int batch = 256;
    double total = 0.0;
    for (int64_t start = 0; start < target_data.size(); start += batch) {
      const int64_t stop = std::min<int64_t>(start + batch, target_data.size());
      std::vector<int64_t> idx;
      for (int64_t i = start; i < stop; ++i) idx.push_back(i);
      Tensor x = gather_batch(target_data, idx);
      for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < d.size(); ++j) x[i * d.size() + j] += d[j];
      Tensor logits = net.forward(x, false);
      std::vector<int> labels(idx.size(), unit);
      total += nn::softmax_cross_entropy(logits, labels, false).mean_loss *
               static_cast<double>(stop - start);
    }
    return total / static_cast<double>(target_data.size());
  };

  double best_loss = full_loss(delta);  // loss at the zero trigger
  Tensor best = delta;

  const int check_every = std::max(1, config.iterations / 10);
  for (int it = 0; it < config.iterations; ++it) {
    auto idx = cursor.next(config.batch_size);
    Tensor x = gather_batch(target_data, idx);
    for (int64_t i = 0; i < x.dim(0); ++i)
      for (int64_t j = 0; j < delta.size(); ++j) x[i * delta.size() + j] += delta[j];
    grad = batch_input_gradient(net, unit, x, nullptr);
    for (int64_t j = 0; j < grad.size(); ++j)
      if (!std::isfinite(grad[j]))
        throw std::runtime_error("synthesize_trigger: non-finite gradient at iteration " +
                                 std::to_string(it));
    opt->step(delta_param);
    delta = project(constraint, delta);
    if ((it + 1) % check_every == 0 || it + 1 == config.iterations) {
      const double loss = full_loss(delta);
      if (loss < best_loss) {
        best_loss = loss;
        best = delta;
      }
    }
  }

  TriggerArtifact artifact;
  artifact.pattern = project(constraint, best);
  artifact.constraint = constraint;
  artifact.target_class = target_class;
  artifact.surrogate_id = surrogate.id();
  artifact.synthesis_config_digest = config.digest();
  artifact.validate();
  return artifact;
}

// ---------------------------------------------------------------------------
// EOT

void EOTConfig::validate() const {
  if (patch <= 0 || canvas <= 0 || patch > canvas)
    throw std::invalid_argument("EOTConfig: patch must fit the canvas");
  if (pad_min < 0 || pad_max < pad_min || pad_max > canvas - patch)
    throw std::invalid_argument("EOTConfig: pad range must keep the patch inside the canvas");
  if (samples_per_step < 1) throw std::invalid_argument("EOTConfig: samples_per_step >= 1");
}

std::string EOTConfig::to_json() const {
  json j;
  j["pad_min"] = pad_min;
  j["pad_max"] = pad_max;
  j["hue_delta"] = hue_delta;
  j["rotation_degrees"] = rotation_degrees;
  j["samples_per_step"] = samples_per_step;
  j["canvas"] = canvas;
  j["patch"] = patch;
  return j.dump();
}

PlacementTransform sample_eot_transform(const EOTConfig& config, Rng& rng) {
  config.validate();
  PlacementTransform t;
  t.l_up = rng.range_int(config.pad_min, config.pad_max);
  t.l_left = rng.range_int(config.pad_min, config.pad_max);
  t.l_low = (config.canvas - config.patch) - t.l_up;
  t.l_right = (config.canvas - config.patch) - t.l_left;
  t.hue_shift = rng.uniform(-config.hue_delta, config.hue_delta);
  t.rotation_deg = rng.uniform(-config.rotation_degrees, config.rotation_degrees);
  return t;
}

namespace {

// Rotation about the RGB gray axis by angle 2*pi*shift; linear per pixel.
void hue_matrix(double shift, double m[3][3]) {
  const double th = 2.0 * std::numbers::pi * shift;
  const double c = std::cos(th), s = std::sin(th);
  const double t = (1.0 - c) / 3.0;
  const double u = s / std::sqrt(3.0);
  m[0][0] = c + t;     m[0][1] = t - u;     m[0][2] = t + u;
  m[1][0] = t + u;     m[1][1] = c + t;     m[1][2] = t - u;
  m[2][0] = t - u;     m[2][1] = t + u;     m[2][2] = c + t;
}

}  // namespace

Tensor eot_place(const Tensor& pattern, const ConstraintSet& c, const PlacementTransform& t) {
  if (pattern.rank() != 3) throw std::invalid_argument("eot_place: expected (C,H,W) pattern");
  const int ch = static_cast<int>(pattern.dim(0));
  const int h = static_cast<int>(pattern.dim(1));
  const int w = static_cast<int>(pattern.dim(2));
  Tensor out({ch, h, w});

  double m[3][3];
  hue_matrix(t.hue_shift, m);

  const double rad = t.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  // Patch center in canonical coordinates and after placement.
  const double pc_y = c.patch_row + (c.patch_h - 1) / 2.0;
  const double pc_x = c.patch_col + (c.patch_w - 1) / 2.0;
  const double oc_y = t.l_up + (c.patch_h - 1) / 2.0;
  const double oc_x = t.l_left + (c.patch_w - 1) / 2.0;

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Inverse-rotate about the placed center, then translate back to the
      // canonical support.
      const double ry = y - oc_y, rx = x - oc_x;
      const int sy = static_cast<int>(std::lround(cs * ry + sn * rx + pc_y));
      const int sx = static_cast<int>(std::lround(-sn * ry + cs * rx + pc_x));
      if (sy < c.patch_row || sy >= c.patch_row + c.patch_h || sx < c.patch_col ||
          sx >= c.patch_col + c.patch_w)
        continue;
      if (ch == 3) {
        const double v0 = pattern.at(0, sy, sx), v1 = pattern.at(1, sy, sx),
                     v2 = pattern.at(2, sy, sx);
        out.at(0, y, x) = static_cast<float>(m[0][0] * v0 + m[0][1] * v1 + m[0][2] * v2);
        out.at(1, y, x) = static_cast<float>(m[1][0] * v0 + m[1][1] * v1 + m[1][2] * v2);
        out.at(2, y, x) = static_cast<float>(m[2][0] * v0 + m[2][1] * v1 + m[2][2] * v2);
      } else {
        for (int p = 0; p < ch; ++p) out.at(p, y, x) = pattern.at(p, sy, sx);
      }
    }
  return out;
}

Tensor eot_place_adjoint(const Tensor& grad_canvas, const ConstraintSet& c,
                         const PlacementTransform& t) {
  const int ch = static_cast<int>(grad_canvas.dim(0));
  const int h = static_cast<int>(grad_canvas.dim(1));
  const int w = static_cast<int>(grad_canvas.dim(2));
  Tensor out({ch, h, w});

  double m[3][3];
  hue_matrix(t.hue_shift, m);

  const double rad = t.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double pc_y = c.patch_row + (c.patch_h - 1) / 2.0;
  const double pc_x = c.patch_col + (c.patch_w - 1) / 2.0;
  const double oc_y = t.l_up + (c.patch_h - 1) / 2.0;
  const double oc_x = t.l_left + (c.patch_w - 1) / 2.0;

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double ry = y - oc_y, rx = x - oc_x;
      const int sy = static_cast<int>(std::lround(cs * ry + sn * rx + pc_y));
      const int sx = static_cast<int>(std::lround(-sn * ry + cs * rx + pc_x));
      if (sy < c.patch_row || sy >= c.patch_row + c.patch_h || sx < c.patch_col ||
          sx >= c.patch_col + c.patch_w)
        continue;
      if (ch == 3) {
        const double g0 = grad_canvas.at(0, y, x), g1 = grad_canvas.at(1, y, x),
                     g2 = grad_canvas.at(2, y, x);
        // Transposed hue matrix scatter.
        out.at(0, sy, sx) += static_cast<float>(m[0][0] * g0 + m[1][0] * g1 + m[2][0] * g2);
        out.at(1, sy, sx) += static_cast<float>(m[0][1] * g0 + m[1][1] * g1 + m[2][1] * g2);
        out.at(2, sy, sx) += static_cast<float>(m[0][2] * g0 + m[1][2] * g1 + m[2][2] * g2);
      } else {
        for (int p = 0; p < ch; ++p) out.at(p, sy, sx) += grad_canvas.at(p, y, x);
      }
    }
  return out;
}

TriggerArtifact synthesize_physical_trigger(const ModelHandle& surrogate,
                                            const LabeledDataset& target_data, int target_class,
                                            const EOTConfig& eot, const SynthesisConfig& config) {
  config.validate();
  eot.validate();
  if (target_data.size() == 0)
    throw std::invalid_argument("synthesize_physical_trigger: empty target data");
  const auto img_shape = target_data.image_shape();
  if (img_shape[1] != eot.canvas || img_shape[2] != eot.canvas)
    throw std::invalid_argument("synthesize_physical_trigger: dataset canvas mismatch");

  ConstraintSet constraint = ConstraintSet::patch_region(eot.patch, eot.patch, 0, 0);
  ModelHandle model = resolve_target_head(surrogate);
  const int unit = model.target_unit;
  nn::Network& net = *model.net;

  Tensor delta({img_shape[0], img_shape[1], img_shape[2]});
  Tensor grad(delta.shape());
  std::vector<nn::ParamRef> delta_param{{"delta", &delta, &grad}};
  auto opt = make_optimizer(config.optimizer_id, config.step_size, 0.0, 0.0);

  Rng rng(config.seed);
  BatchCursor cursor(target_data.size(), &rng);

  std::lock_guard<std::mutex> lock(net.eval_mutex());

  auto eval_loss = [&](const Tensor& d, uint64_t eval_seed, int samples) {
    Rng eval_rng(eval_seed);
    double total = 0.0;
    int count = 0;
    for (int s = 0; s < samples; ++s) {
      auto t = sample_eot_transform(eot, eval_rng);
      Tensor placed = eot_place(d, constraint, t);
      const int batch = 128;
      for (int64_t start = 0; start < target_data.size(); start += batch) {
        const int64_t stop = std::min<int64_t>(start + batch, target_data.size());
        std::vector<int64_t> idx;
        for (int64_t i = start; i < stop; ++i) idx.push_back(i);
        Tensor x = gather_batch(target_data, idx);
        for (int64_t i = 0; i < x.dim(0); ++i)
          for (int64_t j = 0; j < placed.size(); ++j) x[i * placed.size() + j] += placed[j];
        Tensor logits = net.forward(x, false);
        std::vector<int> labels(idx.size(), unit);
        total += nn::softmax_cross_entropy(logits, labels, false).mean_loss *
                 static_cast<double>(stop - start);
        count += static_cast<int>(stop - start);
      }
    }
    return total / static_cast<double>(count);
  };

  double best_loss = eval_loss(delta, config.seed ^ 0xeull, 8);
  Tensor best = delta;

  const int check_every = std::max(1, config.iterations / 8);
  for (int it = 0; it < config.iterations; ++it) {
    grad.fill(0.0f);
    for (int s = 0; s < eot.samples_per_step; ++s) {
      auto t = sample_eot_transform(eot, rng);
      Tensor placed = eot_place(delta, constraint, t);
      auto idx = cursor.next(config.batch_size);
      Tensor x = gather_batch(target_data, idx);
      for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < placed.size(); ++j) x[i * placed.size() + j] += placed[j];
      Tensor g_canvas = batch_input_gradient(net, unit, x, nullptr);
      Tensor g_patch = eot_place_adjoint(g_canvas, constraint, t);
      grad.add_(g_patch, 1.0f / static_cast<float>(eot.samples_per_step));
    }
    for (int64_t j = 0; j < grad.size(); ++j)
      if (!std::isfinite(grad[j]))
        throw std::runtime_error("synthesize_physical_trigger: non-finite gradient at iteration " +
                                 std::to_string(it));
    opt->step(delta_param);
    delta = project(constraint, delta);
    if ((it + 1) % check_every == 0 || it + 1 == config.iterations) {
      const double loss = eval_loss(delta, config.seed ^ 0xeull, 8);
      if (loss < best_loss) {
        best_loss = loss;
        best = delta;
      }
    }
  }

  TriggerArtifact artifact;
  artifact.pattern = project(constraint, best);
  artifact.constraint = constraint;
  artifact.target_class = target_class;
  artifact.surrogate_id = surrogate.id();
  artifact.synthesis_config_digest = config.digest();
  artifact.validate();
  return artifact;
}

double eot_mean_target_loss(const ModelHandle& surrogate, const LabeledDataset& target_data,
                            const TriggerArtifact& trigger, const EOTConfig& eot, int n_samples,
                            uint64_t seed) {
  ModelHandle model = resolve_target_head(surrogate);
  const int unit = model.target_unit;
  nn::Network& net = *model.net;
  Rng rng(seed);
  std::lock_guard<std::mutex> lock(net.eval_mutex());
  double total = 0.0;
  int64_t count = 0;
  for (int s = 0; s < n_samples; ++s) {
    auto t = sample_eot_transform(eot, rng);
    Tensor placed = eot_place(trigger.pattern, trigger.constraint, t);
    const int batch = 128;
    for (int64_t start = 0; start < target_data.size(); start += batch) {
      const int64_t stop = std::min<int64_t>(start + batch, target_data.size());
      std::vector<int64_t> idx;
      for (int64_t i = start; i < stop; ++i) idx.push_back(i);
      Tensor x = gather_batch(target_data, idx);
      for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < placed.size(); ++j) x[i * placed.size() + j] += placed[j];
      x.clamp_(0.0f, 1.0f);
      Tensor logits = net.forward(x, false);
      std::vector<int> labels(idx.size(), unit);
      total += nn::softmax_cross_entropy(logits, labels, false).mean_loss *
               static_cast<double>(stop - start);
      count += stop - start;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace poisonlab
