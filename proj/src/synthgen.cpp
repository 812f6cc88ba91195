#include "poisonlab/synthgen.hpp"

#include <cmath>
#include <numbers>

#include "poisonlab/rng.hpp"

namespace poisonlab {

namespace {

struct Mode {
  double amp, fy, fx, phase;
};

struct ClassTemplate {
  // [channel] -> modes; plus per-channel gain.
  std::vector<std::vector<Mode>> modes;
  std::vector<double> gain;
};

std::vector<ClassTemplate> make_templates(const SynthCorpusSpec& spec) {
  Rng rng(spec.corpus_seed);
  std::vector<ClassTemplate> out;
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    ClassTemplate t;
    t.modes.resize(static_cast<size_t>(spec.channels));
    for (int ch = 0; ch < spec.channels; ++ch) {
      t.gain.push_back(rng.uniform(0.35, 1.0));
      for (int m = 0; m < spec.modes_per_class; ++m) {
        Mode mode;
        mode.amp = rng.uniform(0.5, 1.0);
        const double f = rng.uniform(spec.freq_min, spec.freq_max);
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        mode.fy = f * std::sin(theta);
        mode.fx = f * std::cos(theta);
        mode.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        t.modes[static_cast<size_t>(ch)].push_back(mode);
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Renders a template plane at a circular shift; values in roughly [-1, 1]
// after per-class normalization, handled by the caller.
double template_value(const ClassTemplate& t, int ch, int y, int x, int h, int w, int dy, int dx) {
  const double yy = static_cast<double>((y + dy + h) % h) / h;
  const double xx = static_cast<double>((x + dx + w) % w) / w;
  double v = 0.0;
  for (const auto& m : t.modes[static_cast<size_t>(ch)])
    v += m.amp * std::cos(2.0 * std::numbers::pi * (m.fy * yy + m.fx * xx) + m.phase);
  return v * t.gain[static_cast<size_t>(ch)];
}

double template_peak(const ClassTemplate& t, const SynthCorpusSpec& spec) {
  double peak = 0.0;
  for (int ch = 0; ch < spec.channels; ++ch)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x)
        peak = std::max(peak,
                        std::abs(template_value(t, ch, y, x, spec.height, spec.width, 0, 0)));
  return peak > 0.0 ? peak : 1.0;
}

}  // namespace

LabeledDataset generate_corpus(const SynthCorpusSpec& spec, int per_class, uint64_t split_seed,
                               const std::string& split_name) {
  if (per_class <= 0) throw std::invalid_argument("generate_corpus: per_class must be positive");
  const auto templates = make_templates(spec);
  std::vector<double> peaks;
  for (const auto& t : templates) peaks.push_back(template_peak(t, spec));

  LabeledDataset ds;
  ds.source_id = spec.name + ":" + split_name;
  for (int c = 0; c < spec.num_classes; ++c)
    ds.class_names.push_back(spec.name + "_" + std::to_string(c));
  const int64_t n = static_cast<int64_t>(per_class) * spec.num_classes;
  ds.images.resize({n, spec.channels, spec.height, spec.width});
  ds.labels.resize(static_cast<size_t>(n));

  Rng rng(split_seed ^ (spec.corpus_seed * 0x9e3779b97f4a7c15ull));
  const int h = spec.height, w = spec.width;
  std::vector<float> noise(static_cast<size_t>(h) * w);

  int64_t idx = 0;
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    for (int s = 0; s < per_class; ++s, ++idx) {
      ds.labels[static_cast<size_t>(idx)] = cls;
      float* img = ds.images.data() + idx * spec.channels * h * w;

      const int dy = rng.range_int(-spec.max_shift, spec.max_shift);
      const int dx = rng.range_int(-spec.max_shift, spec.max_shift);
      const double amp = spec.template_amp * rng.uniform(0.8, 1.2) / peaks[static_cast<size_t>(cls)];

      int other = rng.range_int(0, spec.num_classes - 1);
      if (other == cls) other = (other + 1) % spec.num_classes;
      const int ody = rng.range_int(-spec.max_shift, spec.max_shift);
      const int odx = rng.range_int(-spec.max_shift, spec.max_shift);
      const double oamp =
          spec.distractor_amp * rng.uniform(0.5, 1.0) / peaks[static_cast<size_t>(other)];

      // Smooth background: three low-frequency modes shared across channels.
      Mode bg[3];
      for (auto& m : bg) {
        m.amp = rng.uniform(0.4, 1.0);
        const double f = rng.uniform(0.3, 1.2);
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        m.fy = f * std::sin(theta);
        m.fx = f * std::cos(theta);
        m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      const double brightness = rng.uniform(-0.05, 0.05);

      for (int ch = 0; ch < spec.channels; ++ch) {
        // Per-channel filtered noise (3x3 box) keeps the corpus low-frequency
        // dominated the way natural images are.
        for (auto& v : noise) v = rng.normalf(0.0f, static_cast<float>(spec.noise_sigma));
        float* plane = img + static_cast<int64_t>(ch) * h * w;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double v = 0.5 + brightness;
            v += amp * template_value(templates[static_cast<size_t>(cls)], ch, y, x, h, w, dy, dx);
            v += oamp *
                 template_value(templates[static_cast<size_t>(other)], ch, y, x, h, w, ody, odx);
            const double yy = static_cast<double>(y) / h, xx = static_cast<double>(x) / w;
            for (const auto& m : bg)
              v += spec.bg_amp * m.amp *
                   std::cos(2.0 * std::numbers::pi * (m.fy * yy + m.fx * xx) + m.phase);
            double nz = 0.0;
            int cnt = 0;
            for (int ny = y - 1; ny <= y + 1; ++ny)
              for (int nx = x - 1; nx <= x + 1; ++nx)
                if (ny >= 0 && ny < h && nx >= 0 && nx < w) {
                  nz += noise[static_cast<size_t>(ny) * w + nx];
                  ++cnt;
                }
            v += nz / cnt;
            plane[static_cast<int64_t>(y) * w + x] =
                static_cast<float>(std::min(1.0, std::max(0.0, v)));
          }
      }
    }
  }
  return ds;
}

}  // namespace poisonlab
