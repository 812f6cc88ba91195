#include "poisonlab/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace poisonlab {

std::string to_string(OptimizerId id) { return id == OptimizerId::sgd ? "sgd" : "radam"; }

OptimizerId optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerId::sgd;
  if (s == "radam") return OptimizerId::radam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

Sgd::Sgd(double lr, double momentum, double weight_decay)
    : Optimizer(lr), momentum_(momentum), weight_decay_(weight_decay) {}

void Sgd::step(std::vector<nn::ParamRef>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (auto& p : params) velocity_.emplace_back(p.value->shape());
  }
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& w = *params[pi].value;
    const Tensor& g = *params[pi].grad;
    Tensor& v = velocity_[pi];
    const float mu = static_cast<float>(momentum_);
    const float wd = static_cast<float>(weight_decay_);
    const float lr = static_cast<float>(lr_);
    for (int64_t i = 0; i < w.size(); ++i) {
      const float grad = g[i] + wd * w[i];
      v[i] = mu * v[i] + grad;
      w[i] -= lr * v[i];
    }
  }
}

RAdam::RAdam(double lr, double weight_decay, double beta1, double beta2, double eps)
    : Optimizer(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void RAdam::step(std::vector<nn::ParamRef>& params) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (auto& p : params) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }
  ++t_;
  const double b1t = std::pow(beta1_, static_cast<double>(t_));
  const double b2t = std::pow(beta2_, static_cast<double>(t_));
  const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
  const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
  const bool rectified = rho_t > 4.0;
  double r_t = 1.0;
  if (rectified)
    r_t = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                    ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& w = *params[pi].value;
    const Tensor& g = *params[pi].grad;
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    for (int64_t i = 0; i < w.size(); ++i) {
      const double grad = static_cast<double>(g[i]) + weight_decay_ * w[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * grad);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * grad * grad);
      const double m_hat = m[i] / (1.0 - b1t);
      double update;
      if (rectified) {
        const double v_hat = std::sqrt(v[i] / (1.0 - b2t));
        update = r_t * m_hat / (v_hat + eps_);
      } else {
        update = m_hat;
      }
      w[i] -= static_cast<float>(lr_ * update);
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerId id, double lr, double momentum,
                                          double weight_decay) {
  if (id == OptimizerId::sgd) return std::make_unique<Sgd>(lr, momentum, weight_decay);
  return std::make_unique<RAdam>(lr, weight_decay);
}

double cosine_annealed_lr(double lr0, int step, int total) {
  if (total <= 0) return lr0;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace poisonlab
