#include "eegvlm/kernels/kernels.hpp"

#include <algorithm>
#include <limits>

namespace eegvlm::kernels {

namespace {

constexpr int kBlockK = 256;

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c) {
  for (int p0 = 0; p0 < k; p0 += kBlockK) {
    const int p1 = std::min(k, p0 + kBlockK);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<long>(i) * n;
      for (int p = p0; p < p1; ++p) {
        const double aip = a[static_cast<long>(i) * k + p];
        if (aip == 0.0) continue;
        const double* bp = b + static_cast<long>(p) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c) {
  for (int p0 = 0; p0 < k; p0 += kBlockK) {
    const int p1 = std::min(k, p0 + kBlockK);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<long>(i) * n;
      for (int p = p0; p < p1; ++p) {
        const double aip = a[static_cast<long>(p) * m + i];
        if (aip == 0.0) continue;
        const double* bp = b + static_cast<long>(p) * n;
#pragma omp simd
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<long>(i) * k;
    double* ci = c + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<long>(j) * k;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

void gemm_tt(int m, int n, int k, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) {
        s += a[static_cast<long>(p) * m + i] * b[static_cast<long>(j) * k + p];
      }
      ci[j] += s;
    }
  }
}

void im2col(const ConvGeometry& g, const double* input, double* col) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int kk = g.kernel * g.kernel;
  const int rows = g.in_channels * kk;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / kk;
    const int ky = (r % kk) / g.kernel;
    const int kx = r % g.kernel;
    double* dst = col + static_cast<long>(r) * oh * ow;
    const double* src = input + static_cast<long>(c) * g.in_height * g.in_width;
    for (int y = 0; y < oh; ++y) {
      const int iy = y * g.stride - g.pad + ky;
      if (iy < 0 || iy >= g.in_height) {
        std::fill(dst + y * ow, dst + (y + 1) * ow, 0.0);
        continue;
      }
      for (int x = 0; x < ow; ++x) {
        const int ix = x * g.stride - g.pad + kx;
        dst[y * ow + x] = (ix >= 0 && ix < g.in_width) ? src[iy * g.in_width + ix] : 0.0;
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* input) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int kk = g.kernel * g.kernel;
  std::fill(input, input + g.input_size(), 0.0);
  // Parallel over input channels so no two threads write the same plane.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    double* dst = input + static_cast<long>(c) * g.in_height * g.in_width;
    for (int r = c * kk; r < (c + 1) * kk; ++r) {
      const int ky = (r % kk) / g.kernel;
      const int kx = r % g.kernel;
      const double* src = col + static_cast<long>(r) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const int iy = y * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_height) continue;
        for (int x = 0; x < ow; ++x) {
          const int ix = x * g.stride - g.pad + kx;
          if (ix >= 0 && ix < g.in_width) dst[iy * g.in_width + ix] += src[y * ow + x];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<long>(m) * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  if (!trans_a && !trans_b) {
    gemm_nn(m, n, k, a.data(), b.data(), c.data());
  } else if (trans_a && !trans_b) {
    gemm_tn(m, n, k, a.data(), b.data(), c.data());
  } else if (!trans_a && trans_b) {
    gemm_nt(m, n, k, a.data(), b.data(), c.data());
  } else {
    gemm_tt(m, n, k, a.data(), b.data(), c.data());
  }
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<double> output,
                    std::vector<double>& scratch) {
  const int hw = g.out_height() * g.out_width();
  const int ckk = g.in_channels * g.kernel * g.kernel;
  if (is_pointwise(g)) {
    gemm(false, false, g.out_channels, hw, ckk, weight, input, output, false);
    return;
  }
  scratch.resize(static_cast<std::size_t>(ckk) * hw);
  im2col(g, input.data(), scratch.data());
  gemm(false, false, g.out_channels, hw, ckk, weight, scratch, output, false);
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weight,
                     std::span<const double> grad_output,
                     std::span<double> grad_input,
                     std::span<double> grad_weight,
                     std::vector<double>& scratch) {
  const int hw = g.out_height() * g.out_width();
  const int ckk = g.in_channels * g.kernel * g.kernel;
  if (is_pointwise(g)) {
    gemm(false, true, g.out_channels, ckk, hw, grad_output, input, grad_weight, true);
    if (!grad_input.empty()) {
      gemm(true, false, ckk, hw, g.out_channels, weight, grad_output, grad_input, false);
    }
    return;
  }
  scratch.resize(static_cast<std::size_t>(ckk) * hw);
  im2col(g, input.data(), scratch.data());
  gemm(false, true, g.out_channels, ckk, hw, grad_output, scratch, grad_weight, true);
  if (!grad_input.empty()) {
    gemm(true, false, ckk, hw, g.out_channels, weight, grad_output, scratch, false);
    col2im(g, scratch.data(), grad_input.data());
  }
}

void maxpool_forward(const PoolGeometry& g, std::span<const double> input,
                     std::span<double> output, std::span<int> argmax) {
  const int oh = g.out_height();
  const int ow = g.out_width();
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.channels; ++c) {
    const int plane = c * g.in_height * g.in_width;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        int best_index = -1;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = y * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = x * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_width) continue;
            const int idx = plane + iy * g.in_width + ix;
            if (input[idx] > best) {
              best = input[idx];
              best_index = idx;
            }
          }
        }
        const int o = (c * oh + y) * ow + x;
        output[o] = best;
        argmax[o] = best_index;
      }
    }
  }
}

void maxpool_backward(const PoolGeometry& g, std::span<const double> grad_output,
                      std::span<const int> argmax, std::span<double> grad_input) {
  std::fill(grad_input.begin(), grad_input.end(), 0.0);
  const int per_channel = g.out_height() * g.out_width();
  // Each argmax stays within its own channel plane.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.channels; ++c) {
    for (int o = c * per_channel; o < (c + 1) * per_channel; ++o) {
      grad_input[argmax[o]] += grad_output[o];
    }
  }
}

}  // namespace eegvlm::kernels
