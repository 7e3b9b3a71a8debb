#include "eegvlm/kernels/reference.hpp"

#include <algorithm>
#include <limits>

namespace eegvlm::kernels::reference {

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<double> output) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int o = 0; o < g.out_channels; ++o) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int c = 0; c < g.in_channels; ++c) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = y * g.stride - g.pad + ky;
              const int ix = x * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              s += input[(c * g.in_height + iy) * g.in_width + ix] *
                   weight[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
            }
          }
        }
        output[(o * oh + y) * ow + x] = s;
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight,
                     std::span<const double> grad_output,
                     std::span<double> grad_input,
                     std::span<double> grad_weight) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  if (!grad_input.empty()) std::fill(grad_input.begin(), grad_input.end(), 0.0);
  for (int o = 0; o < g.out_channels; ++o) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double go = grad_output[(o * oh + y) * ow + x];
        for (int c = 0; c < g.in_channels; ++c) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = y * g.stride - g.pad + ky;
              const int ix = x * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              const int in_idx = (c * g.in_height + iy) * g.in_width + ix;
              const int w_idx = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
              grad_weight[w_idx] += go * input[in_idx];
              if (!grad_input.empty()) grad_input[in_idx] += go * weight[w_idx];
            }
          }
        }
      }
    }
  }
}

void maxpool_forward(const PoolGeometry& g, std::span<const double> input,
                     std::span<double> output, std::span<int> argmax) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int c = 0; c < g.channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        int best_index = -1;
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = y * g.stride - g.pad + ky;
            const int ix = x * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
            const int idx = (c * g.in_height + iy) * g.in_width + ix;
            if (input[idx] > best) {
              best = input[idx];
              best_index = idx;
            }
          }
        }
        output[(c * oh + y) * ow + x] = best;
        argmax[(c * oh + y) * ow + x] = best_index;
      }
    }
  }
}

}  // namespace eegvlm::kernels::reference
