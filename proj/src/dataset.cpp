#include "poisonlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "poisonlab/digest.hpp"
#include "poisonlab/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace poisonlab {

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw std::runtime_error("dataset: images must be (N,C,H,W)");
  if (static_cast<int64_t>(labels.size()) != size())
    throw std::runtime_error("dataset: label count does not match image count");
  const int k = num_classes();
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw std::runtime_error("dataset: label " + std::to_string(labels[i]) + " at index " +
                               std::to_string(i) + " outside [0," + std::to_string(k) + ")");
  for (int64_t i = 0; i < images.size(); ++i) {
    float v = images[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::runtime_error("dataset: pixel value " + std::to_string(v) + " outside [0,1]");
  }
}

Tensor LabeledDataset::image(int64_t i) const {
  Tensor out({images.dim(1), images.dim(2), images.dim(3)});
  std::copy_n(images.data() + i * out.size(), out.size(), out.data());
  return out;
}

void LabeledDataset::set_image(int64_t i, const Tensor& img) {
  const int64_t n = images.dim(1) * images.dim(2) * images.dim(3);
  if (img.size() != n) throw std::invalid_argument("set_image: shape mismatch");
  std::copy_n(img.data(), n, images.data() + i * n);
}

std::vector<int64_t> LabeledDataset::class_indices(int cls) const {
  std::vector<int64_t> out;
  for (int64_t i = 0; i < size(); ++i)
    if (labels[static_cast<size_t>(i)] == cls) out.push_back(i);
  return out;
}

LabeledDataset LabeledDataset::subset(const std::vector<int64_t>& indices,
                                      const std::string& suffix) const {
  LabeledDataset out;
  out.class_names = class_names;
  out.source_id = source_id + suffix;
  out.images.resize({static_cast<int64_t>(indices.size()), images.dim(1), images.dim(2),
                     images.dim(3)});
  out.labels.resize(indices.size());
  const int64_t n = images.dim(1) * images.dim(2) * images.dim(3);
  for (size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.data() + indices[i] * n, n, out.images.data() + static_cast<int64_t>(i) * n);
    out.labels[i] = labels[static_cast<size_t>(indices[i])];
  }
  return out;
}

std::string LabeledDataset::digest() const {
  std::string payload = shape_str(images.shape()) + ";";
  payload.append(reinterpret_cast<const char*>(images.data()),
                 static_cast<size_t>(images.size()) * sizeof(float));
  payload += ";";
  payload.append(reinterpret_cast<const char*>(labels.data()), labels.size() * sizeof(int));
  for (const auto& n : class_names) payload += ";" + n;
  return sha256_hex(payload);
}

void write_tensor_file(const Tensor& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "PLT1\nf32";
  for (int64_t d : t.shape()) out << " " << d;
  out << "\n";
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string magic, dtype;
  std::getline(in, magic);
  if (magic != "PLT1") throw std::runtime_error("bad tensor file magic in " + path);
  std::string dims_line;
  std::getline(in, dims_line);
  std::istringstream dims(dims_line);
  dims >> dtype;
  if (dtype != "f32") throw std::runtime_error("unsupported tensor dtype in " + path);
  std::vector<int64_t> shape;
  int64_t d;
  while (dims >> d) shape.push_back(d);
  if (shape.empty()) throw std::runtime_error("missing tensor shape in " + path);
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(t.size() * sizeof(float)))
    throw std::runtime_error("tensor payload truncated in " + path);
  return t;
}

namespace {

// PPM (P6) / PGM (P5), 8-bit, the documented formats of the class_dirs layout.
Tensor read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw std::runtime_error("unsupported image format: " + path);
  auto next_int = [&in, &path]() {
    // Skip whitespace and '#' comment lines.
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    int v;
    if (!(in >> v)) throw std::runtime_error("corrupt image header: " + path);
    return v;
  };
  int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("unsupported bit depth: " + path);
  in.get();  // single whitespace after maxval
  const int channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("corrupt image payload: " + path);
  Tensor img({channels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) =
            static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * channels + c]) /
            static_cast<float>(maxval);
  return img;
}

LabeledDataset load_class_dirs(const std::string& path) {
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw std::runtime_error("no examples found in " + path);

  std::vector<std::pair<Tensor, int>> examples;
  for (size_t cls = 0; cls < classes.size(); ++cls) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(path) / classes[cls])) {
      auto ext = e.path().extension().string();
      if (ext == ".ppm" || ext == ".pgm") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) examples.emplace_back(read_pnm(f), static_cast<int>(cls));
  }
  if (examples.empty()) throw std::runtime_error("no examples found in " + path);

  const auto& shape0 = examples.front().first.shape();
  LabeledDataset ds;
  ds.class_names = classes;
  ds.source_id = fs::path(path).filename().string();
  ds.images.resize({static_cast<int64_t>(examples.size()), shape0[0], shape0[1], shape0[2]});
  ds.labels.resize(examples.size());
  const int64_t n = shape0[0] * shape0[1] * shape0[2];
  for (size_t i = 0; i < examples.size(); ++i) {
    if (!(examples[i].first.shape() == shape0))
      throw std::runtime_error("inconsistent image shapes under " + path);
    std::copy_n(examples[i].first.data(), n, ds.images.data() + static_cast<int64_t>(i) * n);
    ds.labels[i] = examples[i].second;
  }
  return ds;
}

LabeledDataset load_tensor_layout(const std::string& path) {
  const auto images_path = (fs::path(path) / "images.f32t").string();
  const auto labels_path = (fs::path(path) / "labels.json").string();
  if (!fs::exists(images_path) || !fs::exists(labels_path))
    throw std::runtime_error("no examples found in " + path +
                             " (expected images.f32t and labels.json)");
  LabeledDataset ds;
  ds.images = read_tensor_file(images_path);
  if (ds.images.rank() != 4) throw std::runtime_error("images.f32t must be rank 4 in " + path);

  std::ifstream in(labels_path);
  json j = json::parse(in);
  ds.source_id = j.value("source_id", fs::path(path).filename().string());
  ds.class_names = j.at("class_names").get<std::vector<std::string>>();
  ds.labels = j.at("labels").get<std::vector<int>>();
  return ds;
}

}  // namespace

LabeledDataset load_dataset(const std::string& path, DatasetFormat format) {
  if (!fs::exists(path)) throw std::runtime_error("dataset path does not exist: " + path);
  LabeledDataset ds = format == DatasetFormat::tensor_file ? load_tensor_layout(path)
                                                           : load_class_dirs(path);
  if (ds.size() == 0) throw std::runtime_error("no examples found in " + path);
  ds.validate();
  return ds;
}

void save_dataset(const LabeledDataset& ds, const std::string& path) {
  fs::create_directories(path);
  write_tensor_file(ds.images, (fs::path(path) / "images.f32t").string());
  json j;
  j["source_id"] = ds.source_id;
  j["class_names"] = ds.class_names;
  j["labels"] = ds.labels;
  std::ofstream out(fs::path(path) / "labels.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed under " + path);
}

void assert_class_disjoint(const LabeledDataset& train, const LabeledDataset& pood,
                           const std::vector<std::string>& declared_overlap) {
  if (train.size() == 0 || pood.size() == 0)
    throw std::runtime_error("class disjointness check requires loaded datasets");
  if (declared_overlap.empty()) return;
  std::string names;
  for (const auto& c : declared_overlap) names += (names.empty() ? "" : ", ") + c;
  throw std::runtime_error("POOD pool shares classes with the training set: " + names);
}

std::string PoisonPlan::to_json() const {
  json j;
  j["target_class"] = target_class;
  j["poison_ratio"] = poison_ratio;
  j["target_class_ratio"] = target_class_ratio;
  j["indices"] = indices;
  j["seed"] = seed;
  j["dataset_digest"] = dataset_digest;
  return j.dump(2);
}

PoisonPlan PoisonPlan::from_json(const std::string& text) {
  json j = json::parse(text);
  PoisonPlan p;
  p.target_class = j.at("target_class").get<int>();
  p.poison_ratio = j.at("poison_ratio").get<double>();
  p.target_class_ratio = j.at("target_class_ratio").get<double>();
  p.indices = j.at("indices").get<std::vector<int64_t>>();
  p.seed = j.at("seed").get<uint64_t>();
  p.dataset_digest = j.value("dataset_digest", "");
  return p;
}

void PoisonPlan::save(const std::string& path) const {
  std::ofstream out(path);
  out << to_json() << "\n";
  if (!out) throw std::runtime_error("cannot write plan: " + path);
}

PoisonPlan PoisonPlan::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read plan: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

PoisonPlan select_from_pool(const LabeledDataset& dataset, std::vector<int64_t> pool,
                            int target_class, double poison_ratio, uint64_t seed) {
  if (poison_ratio <= 0.0) throw std::invalid_argument("zero poisons requested");
  const int64_t need = std::llround(poison_ratio * static_cast<double>(dataset.size()));
  if (need <= 0) throw std::invalid_argument("zero poisons requested");
  if (need > static_cast<int64_t>(pool.size()))
    throw std::invalid_argument("poison ratio implies " + std::to_string(need) +
                                " poisons but only " + std::to_string(pool.size()) +
                                " eligible examples exist");
  Rng rng(seed);
  auto picks = rng.sample_without_replacement(static_cast<int64_t>(pool.size()), need);
  PoisonPlan plan;
  plan.target_class = target_class;
  plan.poison_ratio = poison_ratio;
  plan.seed = seed;
  plan.dataset_digest = dataset.digest();
  plan.indices.reserve(picks.size());
  for (int64_t p : picks) plan.indices.push_back(pool[static_cast<size_t>(p)]);
  std::sort(plan.indices.begin(), plan.indices.end());
  return plan;
}

}  // namespace

PoisonPlan select_poison_indices(const LabeledDataset& dataset, int target_class,
                                 double poison_ratio, uint64_t seed) {
  auto pool = dataset.class_indices(target_class);
  auto plan = select_from_pool(dataset, pool, target_class, poison_ratio, seed);
  plan.target_class_ratio =
      pool.empty() ? 0.0
                   : static_cast<double>(plan.indices.size()) / static_cast<double>(pool.size());
  return plan;
}

PoisonPlan select_dirty_indices(const LabeledDataset& dataset, int target_class,
                                double poison_ratio, uint64_t seed) {
  std::vector<int64_t> pool;
  for (int64_t i = 0; i < dataset.size(); ++i)
    if (dataset.labels[static_cast<size_t>(i)] != target_class) pool.push_back(i);
  auto plan = select_from_pool(dataset, pool, target_class, poison_ratio, seed);
  plan.target_class_ratio = 0.0;
  return plan;
}

}  // namespace poisonlab
