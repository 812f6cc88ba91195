#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/tensor.hpp"

namespace poisonlab {

// Ordered collection of (image, label) examples. Images are float32 (C,H,W)
// in [0,1]; labels lie in [0, k). Example indices are stable for the lifetime
// of the object, and the object is immutable after load by convention.
struct LabeledDataset {
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string source_id;

  int64_t size() const { return images.empty() ? 0 : images.dim(0); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<int64_t> image_shape() const {  // (C, H, W)
    return {images.dim(1), images.dim(2), images.dim(3)};
  }

  // Throws if any invariant is violated (range, label bounds, size agreement).
  void validate() const;

  Tensor image(int64_t i) const;           // copy of example i as (C,H,W)
  void set_image(int64_t i, const Tensor& img);

  std::vector<int64_t> class_indices(int cls) const;
  LabeledDataset subset(const std::vector<int64_t>& indices, const std::string& suffix) const;

  std::string digest() const;  // SHA-256 over shapes, pixels, labels, names
};

enum class DatasetFormat { tensor_file, class_dirs };

// Layout "tensor_file": <path>/images.f32t (see below) + <path>/labels.json.
// Layout "class_dirs":  <path>/<class_name>/*.ppm|*.pgm, classes in
// lexicographic order. Pixels of 8-bit inputs are divided by 255.
LabeledDataset load_dataset(const std::string& path, DatasetFormat format);
void save_dataset(const LabeledDataset& ds, const std::string& path);

// Raw tensor container used by the dataset layout: ASCII magic "PLT1\n",
// one line "f32 <d0> <d1> ...\n", then little-endian float32 payload.
void write_tensor_file(const Tensor& t, const std::string& path);
Tensor read_tensor_file(const std::string& path);

// Verifies the declared class-overlap list between a training set and a POOD
// pool is empty; throws an error naming the overlapping classes otherwise.
void assert_class_disjoint(const LabeledDataset& train, const LabeledDataset& pood,
                           const std::vector<std::string>& declared_overlap);

// Bookkeeping of trigger insertion: which target-class examples get poisoned.
struct PoisonPlan {
  int target_class = 0;
  double poison_ratio = 0.0;        // fraction of the full training set
  double target_class_ratio = 0.0;  // derived fraction of the target class
  std::vector<int64_t> indices;     // sorted, unique, all labeled target_class
  uint64_t seed = 0;
  std::string dataset_digest;

  std::string to_json() const;
  static PoisonPlan from_json(const std::string& text);
  void save(const std::string& path) const;
  static PoisonPlan load(const std::string& path);
};

// Uniform selection without replacement from the target-class examples under
// a seeded generator; |indices| = round-half-up(poison_ratio * |D|).
PoisonPlan select_poison_indices(const LabeledDataset& dataset, int target_class,
                                 double poison_ratio, uint64_t seed);

// Same selection but drawn from all non-target classes (dirty-label plans).
PoisonPlan select_dirty_indices(const LabeledDataset& dataset, int target_class,
                                double poison_ratio, uint64_t seed);

}  // namespace poisonlab
