#include "poisonlab/nn.hpp"

#include <cmath>
#include <cstring>
#include <mutex>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

extern "C" void openblas_set_num_threads(int);

namespace poisonlab::nn {

namespace {

inline int out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Convolutions parallelize over batch chunks, one single-threaded GEMM per
// chunk; OpenBLAS's own threading only adds sync overhead at these sizes.
void force_single_thread_blas() {
  static std::once_flag flag;
  std::call_once(flag, [] { openblas_set_num_threads(1); });
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, bool bias)
    : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride), pad_(pad), bias_(bias) {
  const int64_t kk = static_cast<int64_t>(in_ch) * ksize * ksize;
  w.resize({out_ch, kk});
  dw.resize({out_ch, kk});
  if (bias_) {
    b.resize({out_ch});
    db.resize({out_ch});
  }
}

void Conv2d::init(Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(w.dim(1)));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normalf(0.0f, static_cast<float>(std));
  if (bias_) b.fill(0.0f);
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &dw});
  if (bias_) out.push_back({prefix + ".b", &b, &db});
}

void Conv2d::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + ".w", &w});
  if (bias_) out.push_back({prefix + ".b", &b});
}

void Conv2d::im2col_range(const float* xd, int h, int wd, int ho, int wo, int64_t np, int ni0,
                          int ni1) {
  const int64_t p = static_cast<int64_t>(ho) * wo;
  for (int ni = ni0; ni < ni1; ++ni) {
    for (int ci = 0; ci < in_ch_; ++ci) {
      const float* xplane = xd + (static_cast<int64_t>(ni) * in_ch_ + ci) * h * wd;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          float* crow = col_.data() + ((static_cast<int64_t>(ci) * k_ + ky) * k_ + kx) * np +
                        static_cast<int64_t>(ni) * p;
          // Contiguous valid ox range for this (ky,kx); borders are zeroed,
          // the interior is a straight copy (stride 1) or a strided gather.
          int ox_lo = 0;
          while (ox_lo < wo && ox_lo * stride_ - pad_ + kx < 0) ++ox_lo;
          int ox_hi = wo;
          while (ox_hi > ox_lo && (ox_hi - 1) * stride_ - pad_ + kx >= wd) --ox_hi;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            float* dst = crow + static_cast<int64_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::memset(dst, 0, sizeof(float) * static_cast<size_t>(wo));
              continue;
            }
            const float* srow = xplane + static_cast<int64_t>(iy) * wd;
            for (int ox = 0; ox < ox_lo; ++ox) dst[ox] = 0.0f;
            if (stride_ == 1) {
              std::memcpy(dst + ox_lo, srow + (ox_lo - pad_ + kx),
                          sizeof(float) * static_cast<size_t>(ox_hi - ox_lo));
            } else {
              const float* src = srow + (ox_lo * stride_ - pad_ + kx);
              for (int ox = ox_lo; ox < ox_hi; ++ox, src += stride_) dst[ox] = *src;
            }
            for (int ox = ox_hi; ox < wo; ++ox) dst[ox] = 0.0f;
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  if (x.rank() != 4 || x.dim(1) != in_ch_)
    throw std::invalid_argument("Conv2d: bad input shape " + shape_str(x.shape()));
  force_single_thread_blas();
  x_shape_ = x.shape();
  const int n = static_cast<int>(x.dim(0));
  const int h = static_cast<int>(x.dim(2));
  const int wd = static_cast<int>(x.dim(3));
  const int ho = out_extent(h, k_, stride_, pad_);
  const int wo = out_extent(wd, k_, stride_, pad_);
  const int64_t p = static_cast<int64_t>(ho) * wo;
  const int64_t kk = w.dim(1);
  const int64_t np = static_cast<int64_t>(n) * p;

  if (col_.size() != kk * np) col_.resize({kk, np});
  if (y_mat_.size() != static_cast<int64_t>(out_ch_) * np) y_mat_.resize({out_ch_, np});

  Tensor y({n, out_ch_, ho, wo});
  const int chunks = std::min(n, max_threads());
#pragma omp parallel for schedule(static, 1)
  for (int c = 0; c < chunks; ++c) {
    const int ni0 = static_cast<int>(static_cast<int64_t>(n) * c / chunks);
    const int ni1 = static_cast<int>(static_cast<int64_t>(n) * (c + 1) / chunks);
    if (ni0 == ni1) continue;
    im2col_range(x.data(), h, wd, ho, wo, np, ni0, ni1);
    const int64_t off = static_cast<int64_t>(ni0) * p;
    const int cols = static_cast<int>((ni1 - ni0) * p);
    sgemm(false, false, out_ch_, cols, static_cast<int>(kk), 1.0f, w.data(),
          static_cast<int>(kk), col_.data() + off, static_cast<int>(np), 0.0f,
          y_mat_.data() + off, static_cast<int>(np));
    for (int ni = ni0; ni < ni1; ++ni)
      for (int co = 0; co < out_ch_; ++co) {
        const float* src =
            y_mat_.data() + static_cast<int64_t>(co) * np + static_cast<int64_t>(ni) * p;
        float* dst = y.data() + (static_cast<int64_t>(ni) * out_ch_ + co) * p;
        const float bias = bias_ ? b[co] : 0.0f;
        for (int64_t i = 0; i < p; ++i) dst[i] = src[i] + bias;
      }
  }
  return y;
}

void Conv2d::col2im_range(float* dxd, const float* dcol, int h, int wd, int ho, int wo,
                          int64_t np, int ni0, int ni1) {
  const int64_t p = static_cast<int64_t>(ho) * wo;
  for (int ni = ni0; ni < ni1; ++ni) {
    for (int ci = 0; ci < in_ch_; ++ci) {
      float* xplane = dxd + (static_cast<int64_t>(ni) * in_ch_ + ci) * h * wd;
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const float* crow = dcol + ((static_cast<int64_t>(ci) * k_ + ky) * k_ + kx) * np +
                              static_cast<int64_t>(ni) * p;
          int ox_lo = 0;
          while (ox_lo < wo && ox_lo * stride_ - pad_ + kx < 0) ++ox_lo;
          int ox_hi = wo;
          while (ox_hi > ox_lo && (ox_hi - 1) * stride_ - pad_ + kx >= wd) --ox_hi;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            float* drow = xplane + static_cast<int64_t>(iy) * wd;
            const float* srow = crow + static_cast<int64_t>(oy) * wo;
            if (stride_ == 1) {
              float* d = drow + (ox_lo - pad_ + kx);
              for (int ox = ox_lo; ox < ox_hi; ++ox) d[ox - ox_lo] += srow[ox];
            } else {
              float* d = drow + (ox_lo * stride_ - pad_ + kx);
              for (int ox = ox_lo; ox < ox_hi; ++ox, d += stride_) *d += srow[ox];
            }
          }
        }
    }
  }
}

Tensor Conv2d::backward(const Tensor& dy, bool need_dx, bool param_grads) {
  const int n = static_cast<int>(x_shape_[0]);
  const int h = static_cast<int>(x_shape_[2]);
  const int wd = static_cast<int>(x_shape_[3]);
  const int ho = static_cast<int>(dy.dim(2));
  const int wo = static_cast<int>(dy.dim(3));
  const int64_t p = static_cast<int64_t>(ho) * wo;
  const int64_t np = static_cast<int64_t>(n) * p;
  const int64_t kk = w.dim(1);

  if (dy_mat_.size() != static_cast<int64_t>(out_ch_) * np) dy_mat_.resize({out_ch_, np});

  const int chunks = std::min(n, max_threads());
  std::vector<Tensor> dw_partial;
  if (param_grads) dw_partial.assign(static_cast<size_t>(chunks), Tensor({out_ch_, kk}));
  Tensor dcol;
  Tensor dx;
  if (need_dx) {
    dcol.resize({kk, np});
    dx.resize(x_shape_);
  }

#pragma omp parallel for schedule(static, 1)
  for (int c = 0; c < chunks; ++c) {
    const int ni0 = static_cast<int>(static_cast<int64_t>(n) * c / chunks);
    const int ni1 = static_cast<int>(static_cast<int64_t>(n) * (c + 1) / chunks);
    if (ni0 == ni1) continue;
    const int64_t off = static_cast<int64_t>(ni0) * p;
    const int cols = static_cast<int>((ni1 - ni0) * p);
    for (int ni = ni0; ni < ni1; ++ni)
      for (int co = 0; co < out_ch_; ++co)
        std::memcpy(dy_mat_.data() + static_cast<int64_t>(co) * np + static_cast<int64_t>(ni) * p,
                    dy.data() + (static_cast<int64_t>(ni) * out_ch_ + co) * p,
                    sizeof(float) * static_cast<size_t>(p));
    if (param_grads)
      sgemm(false, true, out_ch_, static_cast<int>(kk), cols, 1.0f, dy_mat_.data() + off,
            static_cast<int>(np), col_.data() + off, static_cast<int>(np), 1.0f,
            dw_partial[static_cast<size_t>(c)].data(), static_cast<int>(kk));
    if (need_dx) {
      sgemm(true, false, static_cast<int>(kk), cols, out_ch_, 1.0f, w.data(),
            static_cast<int>(kk), dy_mat_.data() + off, static_cast<int>(np), 0.0f,
            dcol.data() + off, static_cast<int>(np));
      col2im_range(dx.data(), dcol.data(), h, wd, ho, wo, np, ni0, ni1);
    }
  }

  if (param_grads) {
    for (const auto& part : dw_partial) dw.add_(part);
    if (bias_) {
      for (int co = 0; co < out_ch_; ++co) {
        const float* row = dy_mat_.data() + static_cast<int64_t>(co) * np;
        double acc = 0.0;
        for (int64_t i = 0; i < np; ++i) acc += row[i];
        db[co] += static_cast<float>(acc);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int ch, double momentum, double eps)
    : ch_(ch), momentum_(momentum), eps_(eps) {
  gamma = Tensor::full({ch}, 1.0f);
  beta.resize({ch});
  dgamma.resize({ch});
  dbeta.resize({ch});
  running_mean.resize({ch});
  running_var = Tensor::full({ch}, 1.0f);
  inv_std_.resize(static_cast<size_t>(ch));
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &dgamma});
  out.push_back({prefix + ".beta", &beta, &dbeta});
}

void BatchNorm2d::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  if (x.rank() != 4 || x.dim(1) != ch_)
    throw std::invalid_argument("BatchNorm2d: bad input shape");
  last_train_ = train;
  const int n = static_cast<int>(x.dim(0));
  const int64_t p = x.dim(2) * x.dim(3);
  const int64_t m = static_cast<int64_t>(n) * p;
  Tensor y(x.shape());
  if (train) {
    if (!xhat_.same_shape(x)) xhat_.resize(x.shape());
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch_; ++c) {
      // Single fused pass for sum and sum-of-squares; per-plane float partial
      // sums feed double accumulators to keep the epoch-scale statistics
      // stable without killing vectorization.
      double sum = 0.0, sumsq = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const float* src = x.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float ps = 0.0f, pss = 0.0f;
        for (int64_t i = 0; i < p; ++i) {
          ps += src[i];
          pss += src[i] * src[i];
        }
        sum += ps;
        sumsq += pss;
      }
      const double mean = sum / static_cast<double>(m);
      double var = sumsq / static_cast<double>(m) - mean * mean;
      if (var < 0.0) var = 0.0;
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[static_cast<size_t>(c)] = inv;
      const float g = gamma[c], bt = beta[c];
      for (int ni = 0; ni < n; ++ni) {
        const float* src = x.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float* xh = xhat_.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float* dst = y.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        for (int64_t i = 0; i < p; ++i) {
          const float v = static_cast<float>((src[i] - mean) * inv);
          xh[i] = v;
          dst[i] = g * v + bt;
        }
      }
      running_mean[c] =
          static_cast<float>((1.0 - momentum_) * running_mean[c] + momentum_ * mean);
      running_var[c] = static_cast<float>((1.0 - momentum_) * running_var[c] + momentum_ * var);
    }
  } else {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch_; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps_);
      inv_std_[static_cast<size_t>(c)] = inv;
      const float scale = static_cast<float>(gamma[c] * inv);
      const float shift = static_cast<float>(beta[c] - scale * running_mean[c]);
      for (int ni = 0; ni < n; ++ni) {
        const float* src = x.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float* dst = y.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        for (int64_t i = 0; i < p; ++i) dst[i] = scale * src[i] + shift;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy, bool need_dx, bool param_grads) {
  const int n = static_cast<int>(dy.dim(0));
  const int64_t p = dy.dim(2) * dy.dim(3);
  const int64_t m = static_cast<int64_t>(n) * p;
  Tensor dx;
  if (need_dx) dx.resize(dy.shape());

  if (!last_train_) {
    // Running-stat normalization is an affine map per channel. Eval-mode
    // backward exists for input gradients (trigger synthesis); parameter
    // gradients are not accumulated here.
    if (!need_dx) return dx;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch_; ++c) {
      const float scale = static_cast<float>(gamma[c] * inv_std_[static_cast<size_t>(c)]);
      for (int ni = 0; ni < n; ++ni) {
        const float* d = dy.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float* dst = dx.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        for (int64_t i = 0; i < p; ++i) dst[i] = scale * d[i];
      }
    }
    return dx;
  }

#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int ni = 0; ni < n; ++ni) {
      const float* d = dy.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
      const float* xh = xhat_.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
      for (int64_t i = 0; i < p; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
      }
    }
    if (param_grads) {
      dgamma[c] += static_cast<float>(sum_dy_xhat);
      dbeta[c] += static_cast<float>(sum_dy);
    }
    if (need_dx) {
      const double inv = inv_std_[static_cast<size_t>(c)];
      const double g = gamma[c];
      const double k1 = g * inv / static_cast<double>(m);
      for (int ni = 0; ni < n; ++ni) {
        const float* d = dy.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        const float* xh = xhat_.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        float* dst = dx.data() + (static_cast<int64_t>(ni) * ch_ + c) * p;
        for (int64_t i = 0; i < p; ++i)
          dst[i] = static_cast<float>(k1 * (static_cast<double>(m) * d[i] - sum_dy -
                                            static_cast<double>(xh[i]) * sum_dy_xhat));
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Activations / pooling / flatten

Tensor ReLU::forward(const Tensor& x, bool) {
  mask_.resize(static_cast<size_t>(x.size()));
  Tensor y(x.shape());
  const float* xd = x.data();
  float* yd = y.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < x.size(); ++i) {
    const bool pos = xd[i] > 0.0f;
    mask_[static_cast<size_t>(i)] = pos;
    yd[i] = pos ? xd[i] : 0.0f;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& dy, bool need_dx, bool) {
  if (!need_dx) return {};
  Tensor dx(dy.shape());
  const float* d = dy.data();
  float* o = dx.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < dy.size(); ++i) o[i] = mask_[static_cast<size_t>(i)] ? d[i] : 0.0f;
  return dx;
}

Tensor Tanh::forward(const Tensor& x, bool) {
  y_.resize(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y_[i] = std::tanh(x[i]);
  return y_;
}

Tensor Tanh::backward(const Tensor& dy, bool need_dx, bool) {
  if (!need_dx) return {};
  Tensor dx(dy.shape());
  for (int64_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * (1.0f - y_[i] * y_[i]);
  return dx;
}

Tensor MaxPool2::forward(const Tensor& x, bool) {
  x_shape_ = x.shape();
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  const int ho = h / 2, wo = w / 2;
  Tensor y({n, c, ho, wo});
  argmax_.resize(static_cast<size_t>(y.size()));
#pragma omp parallel for schedule(static)
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* plane = x.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
      const int64_t obase = (static_cast<int64_t>(ni) * c + ci) * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const int iy = oy * 2, ix = ox * 2;
          int best = iy * w + ix;
          float bv = plane[best];
          const int cands[3] = {iy * w + ix + 1, (iy + 1) * w + ix, (iy + 1) * w + ix + 1};
          for (int cand : cands)
            if (plane[cand] > bv) {
              bv = plane[cand];
              best = cand;
            }
          y[obase + static_cast<int64_t>(oy) * wo + ox] = bv;
          argmax_[static_cast<size_t>(obase + static_cast<int64_t>(oy) * wo + ox)] = best;
        }
    }
  return y;
}

Tensor MaxPool2::backward(const Tensor& dy, bool need_dx, bool) {
  if (!need_dx) return {};
  Tensor dx(x_shape_);
  const int n = static_cast<int>(x_shape_[0]), c = static_cast<int>(x_shape_[1]);
  const int h = static_cast<int>(x_shape_[2]), w = static_cast<int>(x_shape_[3]);
  const int64_t po = dy.dim(2) * dy.dim(3);
#pragma omp parallel for schedule(static)
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const int64_t obase = (static_cast<int64_t>(ni) * c + ci) * po;
      float* plane = dx.data() + (static_cast<int64_t>(ni) * c + ci) * h * w;
      for (int64_t i = 0; i < po; ++i)
        plane[argmax_[static_cast<size_t>(obase + i)]] += dy[obase + i];
    }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  x_shape_ = x.shape();
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1));
  const int64_t p = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* src = x.data() + (static_cast<int64_t>(ni) * c + ci) * p;
      double acc = 0.0;
      for (int64_t i = 0; i < p; ++i) acc += src[i];
      y[static_cast<int64_t>(ni) * c + ci] = static_cast<float>(acc / static_cast<double>(p));
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy, bool need_dx, bool) {
  if (!need_dx) return {};
  Tensor dx(x_shape_);
  const int n = static_cast<int>(x_shape_[0]), c = static_cast<int>(x_shape_[1]);
  const int64_t p = x_shape_[2] * x_shape_[3];
  const float scale = 1.0f / static_cast<float>(p);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      float* dst = dx.data() + (static_cast<int64_t>(ni) * c + ci) * p;
      const float v = dy[static_cast<int64_t>(ni) * c + ci] * scale;
      for (int64_t i = 0; i < p; ++i) dst[i] = v;
    }
  return dx;
}

Tensor Flatten::forward(const Tensor& x, bool) {
  x_shape_ = x.shape();
  return x.reshaped({x.dim(0), x.size() / x.dim(0)});
}

Tensor Flatten::backward(const Tensor& dy, bool need_dx, bool) {
  if (!need_dx) return {};
  return dy.reshaped(x_shape_);
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in, int out) : in_(in), out_(out) {
  w.resize({out, in});
  dw.resize({out, in});
  b.resize({out});
  db.resize({out});
}

void Linear::init(Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in_));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normalf(0.0f, static_cast<float>(std));
  b.fill(0.0f);
}

void Linear::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &dw});
  out.push_back({prefix + ".b", &b, &db});
}

void Linear::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

Tensor Linear::forward(const Tensor& x, bool) {
  if (x.rank() != 2 || x.dim(1) != in_)
    throw std::invalid_argument("Linear: bad input shape " + shape_str(x.shape()));
  x_ = x;
  const int n = static_cast<int>(x.dim(0));
  Tensor y({n, out_});
  // y = x * w^T
  sgemm(false, true, n, out_, in_, 1.0f, x.data(), in_, w.data(), in_, 0.0f, y.data(), out_);
  for (int ni = 0; ni < n; ++ni)
    for (int o = 0; o < out_; ++o) y[static_cast<int64_t>(ni) * out_ + o] += b[o];
  return y;
}

Tensor Linear::backward(const Tensor& dy, bool need_dx, bool param_grads) {
  const int n = static_cast<int>(dy.dim(0));
  if (param_grads) {
    // dw += dy^T * x
    sgemm(true, false, out_, in_, n, 1.0f, dy.data(), out_, x_.data(), in_, 1.0f, dw.data(), in_);
    for (int o = 0; o < out_; ++o) {
      double acc = 0.0;
      for (int ni = 0; ni < n; ++ni) acc += dy[static_cast<int64_t>(ni) * out_ + o];
      db[o] += static_cast<float>(acc);
    }
  }
  if (!need_dx) return {};
  Tensor dx({n, in_});
  sgemm(false, false, n, in_, out_, 1.0f, dy.data(), out_, w.data(), in_, 0.0f, dx.data(), in_);
  return dx;
}

// ---------------------------------------------------------------------------
// ResidualBlock

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride)
    : conv1_(in_ch, out_ch, 3, stride, 1, false),
      conv2_(out_ch, out_ch, 3, 1, 1, false),
      bn1_(out_ch),
      bn2_(out_ch),
      projected_(stride != 1 || in_ch != out_ch) {
  if (projected_) {
    conv_s_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false);
    bn_s_ = std::make_unique<BatchNorm2d>(out_ch);
  }
}

void ResidualBlock::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  if (projected_) conv_s_->init(rng);
}

void ResidualBlock::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  conv1_.collect_params(prefix + ".conv1", out);
  bn1_.collect_params(prefix + ".bn1", out);
  conv2_.collect_params(prefix + ".conv2", out);
  bn2_.collect_params(prefix + ".bn2", out);
  if (projected_) {
    conv_s_->collect_params(prefix + ".conv_s", out);
    bn_s_->collect_params(prefix + ".bn_s", out);
  }
}

void ResidualBlock::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  conv1_.collect_state(prefix + ".conv1", out);
  bn1_.collect_state(prefix + ".bn1", out);
  conv2_.collect_state(prefix + ".conv2", out);
  bn2_.collect_state(prefix + ".bn2", out);
  if (projected_) {
    conv_s_->collect_state(prefix + ".conv_s", out);
    bn_s_->collect_state(prefix + ".bn_s", out);
  }
}

Tensor ResidualBlock::forward(const Tensor& x, bool train) {
  Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
  Tensor z = bn2_.forward(conv2_.forward(h, train), train);
  Tensor s = projected_ ? bn_s_->forward(conv_s_->forward(x, train), train) : x;
  if (!z.same_shape(s)) throw std::runtime_error("ResidualBlock: branch shape mismatch");
  Tensor y(z.shape());
  out_mask_.resize(static_cast<size_t>(z.size()));
  const float* zd = z.data();
  const float* sd = s.data();
  float* yd = y.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < z.size(); ++i) {
    const float v = zd[i] + sd[i];
    const bool pos = v > 0.0f;
    out_mask_[static_cast<size_t>(i)] = pos;
    yd[i] = pos ? v : 0.0f;
  }
  return y;
}

Tensor ResidualBlock::backward(const Tensor& dy, bool need_dx, bool param_grads) {
  Tensor dz(dy.shape());
  const float* d = dy.data();
  float* o = dz.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < dy.size(); ++i)
    o[i] = out_mask_[static_cast<size_t>(i)] ? d[i] : 0.0f;

  const bool need_input_grad = need_dx || projected_;
  Tensor dh = bn2_.backward(dz, true, param_grads);
  dh = conv2_.backward(dh, true, param_grads);
  dh = relu1_.backward(dh, true, param_grads);
  dh = bn1_.backward(dh, true, param_grads);
  Tensor dx_main = conv1_.backward(dh, need_dx, param_grads);

  if (projected_) {
    Tensor ds = bn_s_->backward(dz, true, param_grads);
    ds = conv_s_->backward(ds, need_dx, param_grads);
    if (need_dx) dx_main.add_(ds);
  } else if (need_dx) {
    dx_main.add_(dz);
  }
  (void)need_input_grad;
  return dx_main;
}

// ---------------------------------------------------------------------------
// Network

Tensor Network::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& l : layers) h = l->forward(h, train);
  return h;
}

Tensor Network::backward(const Tensor& dy, bool need_dx, bool param_grads) {
  Tensor g = dy;
  for (size_t i = layers.size(); i-- > 0;) {
    const bool want_dx = need_dx || i > 0;
    g = layers[i]->backward(g, want_dx, param_grads);
  }
  return g;
}

void Network::init(Rng& rng) {
  for (auto& l : layers) l->init(rng);
}

std::vector<ParamRef> Network::params() {
  std::vector<ParamRef> out;
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i]->collect_params("layer" + std::to_string(i), out);
  return out;
}

std::vector<StateRef> Network::state() {
  std::vector<StateRef> out;
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i]->collect_state("layer" + std::to_string(i), out);
  return out;
}

void Network::zero_grad() {
  for (auto& p : params()) p.grad->fill(0.0f);
}

int64_t Network::num_params() {
  int64_t n = 0;
  for (auto& p : params()) n += p.value->size();
  return n;
}

Tensor Network::features(const Tensor& x) {
  Tensor h = x;
  for (auto& l : layers) {
    if (dynamic_cast<GlobalAvgPool*>(l.get()) != nullptr) return h;
    h = l->forward(h, false);
  }
  throw std::runtime_error("Network::features: no GlobalAvgPool layer found");
}

// ---------------------------------------------------------------------------
// Loss

CeResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                               bool with_grad) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be 2-D");
  const int n = static_cast<int>(logits.dim(0));
  const int k = static_cast<int>(logits.dim(1));
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  CeResult r;
  r.per_example.resize(static_cast<size_t>(n));
  if (with_grad) r.dlogits.resize(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.data() + static_cast<int64_t>(i) * k;
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    double zmax = z[0];
    for (int j = 1; j < k; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j]) - zmax);
    const double lse = std::log(sum) + zmax;
    const double loss = lse - static_cast<double>(z[y]);
    r.per_example[static_cast<size_t>(i)] = static_cast<float>(loss);
    total += loss;
    if (with_grad) {
      float* g = r.dlogits.data() + static_cast<int64_t>(i) * k;
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(z[j]) - lse);
        g[j] = static_cast<float>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
    }
  }
  r.mean_loss = total / static_cast<double>(n);
  return r;
}

}  // namespace poisonlab::nn
