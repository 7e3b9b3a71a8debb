#include "eegvlm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "eegvlm/error.hpp"

namespace eegvlm::nn {

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  data.assign(n, fill);
}

Param::Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, 0.0);
  grad.assign(count, 0.0);
}

void Param::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// --- Conv2d -----------------------------------------------------------------

Conv2d::Conv2d(const std::string& name, int in_c, int out_c, int kernel, int stride, int pad)
    : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad),
      weight_(name + ".weight", {out_c, in_c, kernel, kernel}) {}

void Conv2d::init(Rng& rng) {
  // Kaiming normal, fan-out mode.
  const double std_dev = std::sqrt(2.0 / (out_c_ * kernel_ * kernel_));
  std::normal_distribution<double> dist(0.0, std_dev);
  for (double& w : weight_.value) w = dist(rng);
}

kernels::ConvGeometry Conv2d::geometry(const Tensor& x) const {
  return {in_c_, x.dim(2), x.dim(3), out_c_, kernel_, stride_, pad_};
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.shape.size() != 4 || x.dim(1) != in_c_) {
    throw Error(ErrorCode::ShapeMismatch, weight_.name + ": unexpected input channels");
  }
  const auto g = geometry(x);
  Tensor y({x.dim(0), out_c_, g.out_height(), g.out_width()});
  for (int n = 0; n < x.dim(0); ++n) {
    kernels::conv2d_forward(g, x.slice(n), weight_.value, y.slice(n), scratch_);
  }
  input_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, bool need_input_grad) {
  const auto g = geometry(input_);
  Tensor dx;
  if (need_input_grad) dx = Tensor(input_.shape);
  for (int n = 0; n < input_.dim(0); ++n) {
    kernels::conv2d_backward(g, input_.slice(n), weight_.value, grad_out.slice(n),
                             need_input_grad ? dx.slice(n) : std::span<double>(),
                             weight_.grad, scratch_);
  }
  return dx;
}

// --- BatchNorm2d ------------------------------------------------------------

BatchNorm2d::BatchNorm2d(const std::string& name, int channels)
    : channels_(channels),
      gamma_(name + ".gamma", {channels}),
      beta_(name + ".beta", {channels}),
      running_mean_(name + ".running_mean", {channels}),
      running_var_(name + ".running_var", {channels}) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  if (x.shape.size() != 4 || x.dim(1) != channels_) {
    throw Error(ErrorCode::ShapeMismatch, gamma_.name + ": unexpected input channels");
  }
  const int n_batch = x.dim(0);
  const int hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n_batch) * hw;
  Tensor y(x.shape);
  xhat_ = Tensor(x.shape);
  inv_std_.assign(channels_, 0.0);
  cached_training_ = training;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels_; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (training) {
      for (int n = 0; n < n_batch; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * channels_ + c) * hw;
        for (int i = 0; i < hw; ++i) mean += p[i];
      }
      mean /= count;
      for (int n = 0; n < n_batch; ++n) {
        const double* p = x.data.data() + (static_cast<std::size_t>(n) * channels_ + c) * hw;
        for (int i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean_.value[c] = (1 - kMomentum) * running_mean_.value[c] + kMomentum * mean;
      running_var_.value[c] = (1 - kMomentum) * running_var_.value[c] + kMomentum * unbiased;
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    for (int n = 0; n < n_batch; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        const double xh = (x.data[off + i] - mean) * inv;
        xhat_.data[off + i] = xh;
        y.data[off + i] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const int n_batch = grad_out.dim(0);
  const int hw = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(n_batch) * hw;
  Tensor dx(grad_out.shape);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int n = 0; n < n_batch; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        sum_dy += grad_out.data[off + i];
        sum_dy_xhat += grad_out.data[off + i] * xhat_.data[off + i];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double g = gamma_.value[c];
    const double inv = inv_std_[c];
    for (int n = 0; n < n_batch; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        if (cached_training_) {
          dx.data[off + i] = g * inv / count *
                             (count * grad_out.data[off + i] - sum_dy - xhat_.data[off + i] * sum_dy_xhat);
        } else {
          dx.data[off + i] = g * inv * grad_out.data[off + i];
        }
      }
    }
  }
  return dx;
}

// --- Relu / MaxPool ---------------------------------------------------------

Tensor Relu::forward(const Tensor& x) {
  Tensor y(x.shape);
  mask_.resize(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(x.size()); ++i) {
    const bool on = x.data[i] > 0.0;
    mask_[i] = on;
    y.data[i] = on ? x.data[i] : 0.0;
  }
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) const {
  Tensor dx(grad_out.shape);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(grad_out.size()); ++i) {
    dx.data[i] = mask_[i] ? grad_out.data[i] : 0.0;
  }
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x) {
  kernels::PoolGeometry g{x.dim(1), x.dim(2), x.dim(3), kernel_, stride_, pad_};
  Tensor y({x.dim(0), x.dim(1), g.out_height(), g.out_width()});
  in_shape_ = x.shape;
  argmax_.resize(y.size());
  const std::size_t per_out = y.stride0();
  for (int n = 0; n < x.dim(0); ++n) {
    kernels::maxpool_forward(g, x.slice(n), y.slice(n),
                             std::span<int>(argmax_.data() + n * per_out, per_out));
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) const {
  kernels::PoolGeometry g{in_shape_[1], in_shape_[2], in_shape_[3], kernel_, stride_, pad_};
  Tensor dx(in_shape_);
  const std::size_t per_out = grad_out.stride0();
  for (int n = 0; n < grad_out.dim(0); ++n) {
    kernels::maxpool_backward(g, grad_out.slice(n),
                              std::span<const int>(argmax_.data() + n * per_out, per_out),
                              dx.slice(n));
  }
  return dx;
}

// --- Linear -----------------------------------------------------------------

Linear::Linear(const std::string& name, int in, int out)
    : in_(in), out_(out), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {}

void Linear::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& w : weight_.value) w = dist(rng);
  for (double& b : bias_.value) b = dist(rng);
}

void Linear::apply(std::span<const double> x, int rows, std::span<double> y) const {
  kernels::gemm(false, true, rows, out_, in_, x, weight_.value, y, false);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < out_; ++j) y[static_cast<std::size_t>(r) * out_ + j] += bias_.value[j];
  }
}

Tensor Linear::forward(const Tensor& x) {
  const int rows = x.shape.empty() ? 0 : x.dim(0);
  if (x.stride0() != static_cast<std::size_t>(in_)) {
    throw Error(ErrorCode::ShapeMismatch, weight_.name + ": expected " + std::to_string(in_) +
                                              " input features, got " + std::to_string(x.stride0()));
  }
  Tensor y({rows, out_});
  apply(x.data, rows, y.data);
  input_ = x;
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const int rows = grad_out.dim(0);
  kernels::gemm(true, false, out_, in_, rows, grad_out.data, input_.data, weight_.grad, true);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < out_; ++j) bias_.grad[j] += grad_out.data[static_cast<std::size_t>(r) * out_ + j];
  }
  Tensor dx(input_.shape);
  kernels::gemm(false, false, rows, in_, out_, grad_out.data, weight_.value, dx.data, false);
  return dx;
}

// --- activations / loss -----------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, Tensor* grad) {
  const int rows = logits.dim(0);
  const int k = logits.dim(1);
  if (grad != nullptr) *grad = Tensor(logits.shape);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* z = logits.data.data() + static_cast<std::size_t>(r) * k;
    const double zmax = *std::max_element(z, z + k);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const double log_sum = std::log(sum) + zmax;
    loss += log_sum - z[targets[r]];
    if (grad != nullptr) {
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(z[j] - log_sum);
        grad->data[static_cast<std::size_t>(r) * k + j] = (p - (j == targets[r] ? 1.0 : 0.0)) / rows;
      }
    }
  }
  return loss / rows;
}

// --- Adam -------------------------------------------------------------------

void Adam::step(std::span<Param* const> params) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->value.size(), 0.0);
      v_[i].assign(params[i]->value.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    auto& m = m_[i];
    auto& v = v_[i];
#pragma omp parallel for schedule(static)
    for (long j = 0; j < static_cast<long>(p.value.size()); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
      p.value[j] -= cfg_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

}  // namespace eegvlm::nn
