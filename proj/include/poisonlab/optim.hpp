#pragma once

#include <memory>
#include <string>
#include <vector>

#include "poisonlab/nn.hpp"

namespace poisonlab {

enum class OptimizerId { sgd, radam };

std::string to_string(OptimizerId id);
OptimizerId optimizer_from_string(const std::string& s);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<nn::ParamRef>& params) = 0;
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 protected:
  explicit Optimizer(double lr) : lr_(lr) {}
  double lr_;
};

class Sgd : public Optimizer {
 public:
  Sgd(double lr, double momentum, double weight_decay);
  void step(std::vector<nn::ParamRef>& params) override;

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

// Rectified Adam: variance-adaptive steps are switched on only once the
// moving second moment has enough samples (rho_t > 4), with the rectification
// factor r_t; before that the update is the plain first moment.
class RAdam : public Optimizer {
 public:
  RAdam(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(std::vector<nn::ParamRef>& params) override;

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerId id, double lr, double momentum,
                                          double weight_decay);

// Cosine annealing from lr0 to 0 over `total` steps; `constant` keeps lr0.
double cosine_annealed_lr(double lr0, int step, int total);

}  // namespace poisonlab
