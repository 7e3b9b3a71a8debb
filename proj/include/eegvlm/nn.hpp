#pragma once

// Minimal layer library with explicit forward/backward passes. Layers cache
// what their backward pass needs, so each instance serves one forward/backward
// pair at a time.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/kernels/kernels.hpp"

namespace eegvlm::nn {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  // Elements per leading-dimension slice.
  std::size_t stride0() const { return shape.empty() ? 0 : data.size() / shape[0]; }
  std::span<double> slice(int n) { return {data.data() + n * stride0(), stride0()}; }
  std::span<const double> slice(int n) const { return {data.data() + n * stride0(), stride0()}; }
};

struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s);
  void zero_grad();
};

using Rng = std::mt19937_64;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_c, int out_c, int kernel, int stride, int pad);

  void init(Rng& rng);
  // x: [N, C, H, W]
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out, bool need_input_grad = true);
  std::vector<Param*> params() { return {&weight_}; }
  int out_channels() const { return out_c_; }
  Param& weight() { return weight_; }

 private:
  kernels::ConvGeometry geometry(const Tensor& x) const;

  int in_c_ = 0, out_c_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  Param weight_;
  Tensor input_;
  std::vector<double> scratch_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels);

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& grad_out);
  std::vector<Param*> params() { return {&gamma_, &beta_}; }
  // Running statistics, checkpointed but not trained.
  std::vector<Param*> buffers() { return {&running_mean_, &running_var_}; }
  int channels() const { return channels_; }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  int channels_ = 0;
  Param gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool cached_training_ = true;
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<std::uint8_t> mask_;
};

class MaxPool2d {
 public:
  MaxPool2d(int kernel = 3, int stride = 2, int pad = 1) : kernel_(kernel), stride_(stride), pad_(pad) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  int kernel_, stride_, pad_;
  std::vector<int> in_shape_;
  std::vector<int> argmax_;
};

// Rows in, rows out: x [N, in] -> [N, out]. weight stored [out, in].
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out);

  void init(Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  std::vector<Param*> params() { return {&weight_, &bias_}; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

  // Stateless evaluation (no caching), usable concurrently.
  void apply(std::span<const double> x, int rows, std::span<double> y) const;

 private:
  int in_ = 0, out_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

// Exact (erf-based) GELU; f(0) = 0.
double gelu(double x);
double gelu_grad(double x);

// Mean softmax cross-entropy over rows of logits [N, K]; fills grad with the
// gradient of the mean loss.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, Tensor* grad);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(std::span<Param* const> params);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace eegvlm::nn
