#pragma once

// Dense numeric kernels shared by the vision backbone, the projection and the
// toy language model. Everything here is row-major double precision. The
// functions in this header are OpenMP-parallel; kernels/reference.hpp holds
// straightforward serial versions with identical signatures that the tests
// compare against.

#include <span>
#include <vector>

namespace eegvlm::kernels {

// C[m,n] = op(A) * op(B) (+ C when accumulate). op(A) is [m,k], op(B) is [k,n].
// With trans_a, A is stored [k,m]; with trans_b, B is stored [n,k].
void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);

struct ConvGeometry {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  int input_size() const { return in_channels * in_height * in_width; }
  int output_size() const { return out_channels * out_height() * out_width(); }
  int weight_size() const { return out_channels * in_channels * kernel * kernel; }
};

// Single-image convolution without bias. input [C,H,W], weight [O,C,k,k],
// output [O,OH,OW]. `scratch` is resized as needed and may be reused.
void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<double> output,
                    std::vector<double>& scratch);

// grad_weight is accumulated; grad_input is overwritten unless empty.
void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight,
                     std::span<const double> grad_output,
                     std::span<double> grad_input,
                     std::span<double> grad_weight,
                     std::vector<double>& scratch);

struct PoolGeometry {
  int channels = 0;
  int in_height = 0;
  int in_width = 0;
  int kernel = 3;
  int stride = 2;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
};

// argmax receives the flat input index chosen for each output element.
void maxpool_forward(const PoolGeometry& g, std::span<const double> input,
                     std::span<double> output, std::span<int> argmax);
void maxpool_backward(const PoolGeometry& g, std::span<const double> grad_output,
                      std::span<const int> argmax, std::span<double> grad_input);

}  // namespace eegvlm::kernels
