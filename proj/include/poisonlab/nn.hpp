#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab::nn {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// One named tensor of persistent state (parameters plus e.g. BN running
// stats); this is what checkpoints serialize.
struct StateRef {
  std::string name;
  Tensor* value;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  // dy -> dx. Parameter gradients accumulate only when param_grads is set;
  // dx is only computed when need_dx is set (empty tensor otherwise).
  virtual Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) = 0;
  virtual void init(Rng&) {}
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {}
  virtual void collect_state(const std::string& prefix, std::vector<StateRef>& out) {}
};

class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, bool bias);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;
  void init(Rng&) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;

  Tensor w;  // (out_ch, in_ch*k*k)
  Tensor b;  // (out_ch), absent when bias == false
  Tensor dw, db;

 private:
  void im2col_range(const float* xd, int h, int wd, int ho, int wo, int64_t np, int ni0, int ni1);
  void col2im_range(float* dxd, const float* dcol, int h, int wd, int ho, int wo, int64_t np,
                    int ni0, int ni1);

  int in_ch_, out_ch_, k_, stride_, pad_;
  bool bias_;
  std::vector<int64_t> x_shape_;
  Tensor col_;     // (K, N*P) im2col buffer from the last forward
  Tensor y_mat_;   // (out_ch, N*P) scratch
  Tensor dy_mat_;  // (out_ch, N*P) scratch
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int ch, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;

  Tensor gamma, beta, dgamma, dbeta;
  Tensor running_mean, running_var;

 private:
  int ch_;
  double momentum_, eps_;
  bool last_train_ = false;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;

 private:
  std::vector<uint8_t> mask_;
};

class Tanh : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;

 private:
  Tensor y_;
};

class MaxPool2 : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;

 private:
  std::vector<int64_t> x_shape_;
  std::vector<int32_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;

 private:
  std::vector<int64_t> x_shape_;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;

 private:
  std::vector<int64_t> x_shape_;
};

class Linear : public Layer {
 public:
  Linear(int in, int out);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;
  void init(Rng&) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;

  Tensor w, b, dw, db;  // w: (out, in)

 private:
  int in_, out_;
  Tensor x_;
};

// conv-bn-relu-conv-bn plus identity or 1x1-projected shortcut, relu on the sum.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(int in_ch, int out_ch, int stride);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy, bool need_dx, bool param_grads) override;
  void init(Rng&) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;

 private:
  Conv2d conv1_, conv2_;
  BatchNorm2d bn1_, bn2_;
  ReLU relu1_;
  bool projected_;
  std::unique_ptr<Conv2d> conv_s_;
  std::unique_ptr<BatchNorm2d> bn_s_;
  std::vector<uint8_t> out_mask_;
};

class Network {
 public:
  std::vector<std::unique_ptr<Layer>> layers;

  Tensor forward(const Tensor& x, bool train);
  // dy of the last layer's output -> optionally grad w.r.t. the network input.
  Tensor backward(const Tensor& dy, bool need_dx = false, bool param_grads = true);

  void init(Rng& rng);
  std::vector<ParamRef> params();
  std::vector<StateRef> state();
  void zero_grad();
  int64_t num_params();

  // Runs layers up to (excluding) the final GlobalAvgPool and returns that
  // feature map; used by activation-ranking defenses.
  Tensor features(const Tensor& x);

  std::mutex& eval_mutex() { return eval_mutex_; }

 private:
  std::mutex eval_mutex_;
};

struct CeResult {
  double mean_loss = 0.0;
  Tensor dlogits;                  // filled when grad requested
  std::vector<float> per_example;  // always filled
};

// Softmax cross-entropy with mean reduction over the batch.
CeResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                               bool with_grad);

}  // namespace poisonlab::nn
