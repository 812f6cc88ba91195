#pragma once

#include <memory>
#include <string>
#include <vector>

#include "poisonlab/nn.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

// Registered architectures:
//   resnet_desk  - stem conv + maxpool, three residual stages (w, 2w, 4w),
//                  global average pool, linear head. The desk-scale victim
//                  and surrogate default.
//   tiny_tanh    - two small tanh conv layers + GAP + head; smooth activations
//                  keep finite-difference gradient checks clean.
//   linear       - flatten + single linear layer (logistic regression).
//   mlp          - flatten + one hidden ReLU layer + head.
struct ModelSpec {
  std::string architecture_id = "resnet_desk";
  int num_classes = 10;
  std::vector<int64_t> input_shape = {3, 32, 32};  // (C, H, W)
  int width = 24;
};

std::shared_ptr<nn::Network> build_network(const ModelSpec& spec, Rng& init_rng);

// A trained (or initialized) classifier plus its provenance. Handles are
// immutable after training; predict() is internally synchronized because
// forward passes reuse layer scratch buffers.
struct ModelHandle {
  ModelSpec spec;
  std::shared_ptr<nn::Network> net;
  std::string lineage;           // "initialized" | "pretrained-on-POOD" | "warmed-up" | "victim"
  std::string training_digest;   // JSON provenance (config, losses, accuracy, parents)
  int target_unit = -1;          // head index of the appended target output, if warmed up

  int num_classes() const { return spec.num_classes; }
  std::string id() const;  // short content digest of the weights
  Tensor predict(const Tensor& batch) const;  // logits (B, k)
  void validate_input(const Tensor& batch) const;
};

// Deep copy (weights and running stats).
ModelHandle clone_model(const ModelHandle& h);

// Appends one zero-initialized output unit to the linear head and records it
// as the target unit; used by poi-warm-up head surgery.
ModelHandle append_head_unit(const ModelHandle& h);

// <stem>.w: binary named-tensor blob. <stem>.json: manifest with the spec,
// lineage, digests.
void save_model(const ModelHandle& h, const std::string& path_stem);
ModelHandle load_model(const std::string& path_stem);

}  // namespace poisonlab
