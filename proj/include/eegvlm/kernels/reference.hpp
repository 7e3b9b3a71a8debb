#pragma once

// Serial reference kernels. Direct loops, no im2col, no OpenMP. Used by the
// tests as an independent route and by the benchmark as the baseline.

#include "eegvlm/kernels/kernels.hpp"

namespace eegvlm::kernels::reference {

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate);

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<double> output);

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight,
                     std::span<const double> grad_output,
                     std::span<double> grad_input,
                     std::span<double> grad_weight);

void maxpool_forward(const PoolGeometry& g, std::span<const double> input,
                     std::span<double> output, std::span<int> argmax);

}  // namespace eegvlm::kernels::reference
