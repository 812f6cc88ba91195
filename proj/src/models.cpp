#include "poisonlab/models.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/digest.hpp"

using json = nlohmann::json;

namespace poisonlab {

namespace {

// Small residual convnet sized for commodity-CPU training: stride-2 stem plus
// pooling put the residual stages at 1/4 and 1/8 resolution.
std::shared_ptr<nn::Network> build_resnet_desk(int in_ch, int num_classes, int width) {
  auto net = std::make_shared<nn::Network>();
  auto& L = net->layers;
  L.push_back(std::make_unique<nn::Conv2d>(in_ch, width, 3, 2, 1, false));
  L.push_back(std::make_unique<nn::BatchNorm2d>(width));
  L.push_back(std::make_unique<nn::ReLU>());
  L.push_back(std::make_unique<nn::MaxPool2>());
  L.push_back(std::make_unique<nn::ResidualBlock>(width, width, 1));
  L.push_back(std::make_unique<nn::ResidualBlock>(width, 2 * width, 2));
  L.push_back(std::make_unique<nn::ResidualBlock>(2 * width, 2 * width, 1));
  L.push_back(std::make_unique<nn::GlobalAvgPool>());
  L.push_back(std::make_unique<nn::Linear>(2 * width, num_classes));
  return net;
}

std::shared_ptr<nn::Network> build_tiny_tanh(int in_ch, int num_classes, int width) {
  auto net = std::make_shared<nn::Network>();
  auto& L = net->layers;
  L.push_back(std::make_unique<nn::Conv2d>(in_ch, width, 3, 1, 1, true));
  L.push_back(std::make_unique<nn::Tanh>());
  L.push_back(std::make_unique<nn::Conv2d>(width, width, 3, 1, 1, true));
  L.push_back(std::make_unique<nn::Tanh>());
  L.push_back(std::make_unique<nn::GlobalAvgPool>());
  L.push_back(std::make_unique<nn::Linear>(width, num_classes));
  return net;
}

}  // namespace

std::shared_ptr<nn::Network> build_network(const ModelSpec& spec, Rng& init_rng) {
  const int in_ch = static_cast<int>(spec.input_shape.at(0));
  const int64_t flat = spec.input_shape.at(0) * spec.input_shape.at(1) * spec.input_shape.at(2);
  std::shared_ptr<nn::Network> net;
  if (spec.architecture_id == "resnet_desk") {
    net = build_resnet_desk(in_ch, spec.num_classes, spec.width);
  } else if (spec.architecture_id == "tiny_tanh") {
    net = build_tiny_tanh(in_ch, spec.num_classes, spec.width);
  } else if (spec.architecture_id == "linear") {
    net = std::make_shared<nn::Network>();
    net->layers.push_back(std::make_unique<nn::Flatten>());
    net->layers.push_back(std::make_unique<nn::Linear>(static_cast<int>(flat), spec.num_classes));
  } else if (spec.architecture_id == "mlp") {
    net = std::make_shared<nn::Network>();
    net->layers.push_back(std::make_unique<nn::Flatten>());
    net->layers.push_back(std::make_unique<nn::Linear>(static_cast<int>(flat), spec.width));
    net->layers.push_back(std::make_unique<nn::ReLU>());
    net->layers.push_back(std::make_unique<nn::Linear>(spec.width, spec.num_classes));
  } else {
    throw std::invalid_argument("unknown architecture: " + spec.architecture_id);
  }
  net->init(init_rng);
  return net;
}

std::string ModelHandle::id() const {
  std::string payload = spec.architecture_id + ";" + lineage + ";";
  for (auto& s : net->state()) {
    payload.append(s.name);
    payload.append(reinterpret_cast<const char*>(s.value->data()),
                   static_cast<size_t>(s.value->size()) * sizeof(float));
  }
  return sha256_hex(payload).substr(0, 16);
}

void ModelHandle::validate_input(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != spec.input_shape[0] ||
      batch.dim(2) != spec.input_shape[1] || batch.dim(3) != spec.input_shape[2])
    throw std::invalid_argument("model expects (N," + shape_str(spec.input_shape) +
                                ") input, got " + shape_str(batch.shape()));
}

Tensor ModelHandle::predict(const Tensor& batch) const {
  validate_input(batch);
  std::lock_guard<std::mutex> lock(net->eval_mutex());
  return net->forward(batch, false);
}

ModelHandle clone_model(const ModelHandle& h) {
  ModelHandle out = h;
  Rng rng(0);
  out.net = build_network(h.spec, rng);
  auto dst = out.net->state();
  auto src = h.net->state();
  if (dst.size() != src.size()) throw std::runtime_error("clone_model: state mismatch");
  for (size_t i = 0; i < dst.size(); ++i) *dst[i].value = *src[i].value;
  return out;
}

ModelHandle append_head_unit(const ModelHandle& h) {
  ModelHandle out = h;
  out.spec.num_classes = h.spec.num_classes + 1;
  Rng rng(0);
  out.net = build_network(out.spec, rng);
  auto dst = out.net->state();
  auto src = h.net->state();
  if (dst.size() != src.size()) throw std::runtime_error("append_head_unit: state mismatch");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].value->same_shape(*src[i].value)) {
      *dst[i].value = *src[i].value;
    } else {
      // The widened head: copy the first k rows, keep the fresh unit at zero.
      Tensor& d = *dst[i].value;
      const Tensor& s = *src[i].value;
      d.fill(0.0f);
      if (d.rank() == 2 && s.rank() == 2 && d.dim(1) == s.dim(1) && d.dim(0) == s.dim(0) + 1) {
        std::memcpy(d.data(), s.data(), static_cast<size_t>(s.size()) * sizeof(float));
      } else if (d.rank() == 1 && s.rank() == 1 && d.dim(0) == s.dim(0) + 1) {
        std::memcpy(d.data(), s.data(), static_cast<size_t>(s.size()) * sizeof(float));
      } else {
        throw std::runtime_error("append_head_unit: unexpected head shape " +
                                 shape_str(d.shape()) + " vs " + shape_str(s.shape()));
      }
    }
  }
  out.target_unit = h.spec.num_classes;
  return out;
}

void save_model(const ModelHandle& h, const std::string& path_stem) {
  {
    std::ofstream out(path_stem + ".w", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path_stem + ".w");
    auto state = h.net->state();
    const uint64_t count = state.size();
    out.write("PLMW1\n", 6);
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (auto& s : state) {
      const uint32_t name_len = static_cast<uint32_t>(s.name.size());
      out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
      out.write(s.name.data(), name_len);
      const uint32_t rank = static_cast<uint32_t>(s.value->rank());
      out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
      for (int i = 0; i < static_cast<int>(rank); ++i) {
        const int64_t d = s.value->dim(i);
        out.write(reinterpret_cast<const char*>(&d), sizeof(d));
      }
      out.write(reinterpret_cast<const char*>(s.value->data()),
                static_cast<std::streamsize>(s.value->size() * sizeof(float)));
    }
  }
  json j;
  j["architecture_id"] = h.spec.architecture_id;
  j["num_classes"] = h.spec.num_classes;
  j["input_shape"] = h.spec.input_shape;
  j["width"] = h.spec.width;
  j["lineage"] = h.lineage;
  j["training_digest"] = h.training_digest;
  j["target_unit"] = h.target_unit;
  j["weights_id"] = h.id();
  std::ofstream mf(path_stem + ".json");
  mf << j.dump(2) << "\n";
  if (!mf) throw std::runtime_error("cannot write " + path_stem + ".json");
}

ModelHandle load_model(const std::string& path_stem) {
  std::ifstream mf(path_stem + ".json");
  if (!mf) throw std::runtime_error("cannot read " + path_stem + ".json");
  json j = json::parse(mf);
  ModelHandle h;
  h.spec.architecture_id = j.at("architecture_id").get<std::string>();
  h.spec.num_classes = j.at("num_classes").get<int>();
  h.spec.input_shape = j.at("input_shape").get<std::vector<int64_t>>();
  h.spec.width = j.at("width").get<int>();
  h.lineage = j.value("lineage", "");
  h.training_digest = j.value("training_digest", "");
  h.target_unit = j.value("target_unit", -1);

  Rng rng(0);
  h.net = build_network(h.spec, rng);

  std::ifstream in(path_stem + ".w", std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path_stem + ".w");
  char magic[6];
  in.read(magic, 6);
  if (std::memcmp(magic, "PLMW1\n", 6) != 0)
    throw std::runtime_error("bad weights magic in " + path_stem + ".w");
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::map<std::string, Tensor> blobs;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    std::vector<int64_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) in.read(reinterpret_cast<char*>(&shape[d]), sizeof(int64_t));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated weights in " + path_stem + ".w");
    blobs.emplace(std::move(name), std::move(t));
  }
  for (auto& s : h.net->state()) {
    auto it = blobs.find(s.name);
    if (it == blobs.end()) throw std::runtime_error("missing weight " + s.name);
    if (!it->second.same_shape(*s.value))
      throw std::runtime_error("weight shape mismatch for " + s.name);
    *s.value = it->second;
  }
  return h;
}

}  // namespace poisonlab
