#include "poisonlab/trigger.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "poisonlab/digest.hpp"

namespace poisonlab {

namespace {
constexpr const char* kSidecarVersion = "1";
}

void TriggerArtifact::validate() const {
  if (pattern.rank() != 3) throw std::runtime_error("trigger: pattern must be (C,H,W)");
  if (magnify_scale == 1.0) {
    Tensor projected = project(constraint, pattern);
    if (!projected.bitwise_equal(pattern))
      throw std::runtime_error("trigger: pattern does not satisfy its own constraint");
  }
}

std::string TriggerArtifact::digest() const { return digest_tensor(pattern); }

void save_trigger(const TriggerArtifact& artifact, const std::string& path_stem) {
  {
    std::ofstream raw(path_stem + ".f32", std::ios::binary);
    if (!raw) throw std::runtime_error("cannot write " + path_stem + ".f32");
    raw.write(reinterpret_cast<const char*>(artifact.pattern.data()),
              static_cast<std::streamsize>(artifact.pattern.size() * sizeof(float)));
  }
  std::ofstream meta(path_stem + ".meta");
  if (!meta) throw std::runtime_error("cannot write " + path_stem + ".meta");
  meta << "version=" << kSidecarVersion << "\n";
  meta << "shape=" << shape_str(artifact.pattern.shape()) << "\n";
  meta << "constraint_kind=" << to_string(artifact.constraint.kind) << "\n";
  for (const auto& [k, v] : artifact.constraint.params()) meta << "param." << k << "=" << v << "\n";
  meta << "target_class=" << artifact.target_class << "\n";
  meta << "surrogate_id=" << artifact.surrogate_id << "\n";
  meta << "synthesis_config_digest=" << artifact.synthesis_config_digest << "\n";
  meta << "magnify_scale=" << artifact.magnify_scale << "\n";
  meta << "digest=" << artifact.digest() << "\n";
}

TriggerArtifact load_trigger(const std::string& path_stem) {
  std::ifstream meta(path_stem + ".meta");
  if (!meta) throw std::runtime_error("cannot read " + path_stem + ".meta");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["version"] != kSidecarVersion)
    throw std::runtime_error("trigger sidecar version mismatch in " + path_stem + ".meta");

  std::vector<int64_t> shape;
  {
    std::string s = kv.at("shape");
    for (char& c : s)
      if (c == 'x') c = ' ';
    std::istringstream ss(s);
    int64_t d;
    while (ss >> d) shape.push_back(d);
  }
  if (shape.size() != 3) throw std::runtime_error("trigger sidecar has bad shape field");

  TriggerArtifact a;
  std::map<std::string, std::string> params;
  for (const auto& [k, v] : kv)
    if (k.rfind("param.", 0) == 0) params[k.substr(6)] = v;
  a.constraint = ConstraintSet::from_params(constraint_kind_from_string(kv.at("constraint_kind")),
                                            params);
  a.target_class = std::stoi(kv.at("target_class"));
  a.surrogate_id = kv["surrogate_id"];
  a.synthesis_config_digest = kv["synthesis_config_digest"];
  a.magnify_scale = std::stod(kv.at("magnify_scale"));

  std::ifstream raw(path_stem + ".f32", std::ios::binary);
  if (!raw) throw std::runtime_error("cannot read " + path_stem + ".f32");
  raw.seekg(0, std::ios::end);
  const auto bytes = static_cast<int64_t>(raw.tellg());
  const int64_t expected = shape[0] * shape[1] * shape[2] * static_cast<int64_t>(sizeof(float));
  if (bytes != expected)
    throw std::runtime_error("trigger payload size does not match sidecar shape in " + path_stem);
  raw.seekg(0);
  a.pattern.resize(shape);
  raw.read(reinterpret_cast<char*>(a.pattern.data()), expected);

  if (kv.count("digest") && kv["digest"] != a.digest())
    throw std::runtime_error("trigger payload digest mismatch in " + path_stem);
  return a;
}

Tensor apply_trigger(const Tensor& image, const TriggerArtifact& trigger,
                     std::optional<Placement> placement) {
  if (image.rank() != 3) throw std::invalid_argument("apply_trigger: expected (C,H,W) image");
  Tensor out = image;
  const auto& p = trigger.pattern;
  if (trigger.constraint.kind == ConstraintKind::patch) {
    const auto& c = trigger.constraint;
    Placement at{c.patch_row, c.patch_col};
    if (placement) at = *placement;
    if (at.row < 0 || at.col < 0 || at.row + c.patch_h > image.dim(1) ||
        at.col + c.patch_w > image.dim(2))
      throw std::invalid_argument("apply_trigger: placement exceeds image bounds");
    for (int64_t ch = 0; ch < image.dim(0); ++ch)
      for (int y = 0; y < c.patch_h; ++y)
        for (int x = 0; x < c.patch_w; ++x)
          out.at(ch, at.row + y, at.col + x) += p.at(ch, c.patch_row + y, c.patch_col + x);
  } else {
    if (!p.same_shape(image))
      throw std::invalid_argument("apply_trigger: pattern shape " + shape_str(p.shape()) +
                                  " does not match image shape " + shape_str(image.shape()));
    out.add_(p);
  }
  out.clamp_(0.0f, 1.0f);
  return out;
}

TriggerArtifact magnify(const TriggerArtifact& trigger, double scale) {
  if (scale <= 0.0) throw std::invalid_argument("magnify: scale must be positive");
  TriggerArtifact out = trigger;
  out.pattern.scale_(static_cast<float>(scale));
  out.magnify_scale = trigger.magnify_scale * scale;
  return out;
}

}  // namespace poisonlab
