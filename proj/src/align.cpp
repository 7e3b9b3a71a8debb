#include "eegvlm/align.hpp"

#include <algorithm>
#include <cmath>

#include "eegvlm/error.hpp"
#include "eegvlm/kernels/kernels.hpp"

namespace eegvlm::align {

ToyPatchEncoder::ToyPatchEncoder(const EncoderOptions& opts) : opts_(opts) {
  if (opts.patch_px < 1 || opts.feature_dim < 1) {
    throw Error(ErrorCode::ShapeMismatch, "toy encoder needs positive patch size and feature dim");
  }
  const int in = 3 * opts.patch_px * opts.patch_px;
  weight_.resize(static_cast<std::size_t>(opts.feature_dim) * in);
  bias_.resize(opts.feature_dim);
  nn::Rng rng(opts.seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
  for (double& w : weight_) w = dist(rng);
  std::normal_distribution<double> bias_dist(0.0, 0.1);
  for (double& b : bias_) b = bias_dist(rng);
}

PatchTokens ToyPatchEncoder::encode(const render::EpochImage& image) const {
  const int ps = opts_.patch_px;
  if (image.width % ps != 0 || image.height % ps != 0) {
    throw Error(ErrorCode::ShapeMismatch, "image size is not a multiple of the patch size");
  }
  PatchTokens out;
  out.grid_rows = image.height / ps;
  out.grid_cols = image.width / ps;
  const int p = out.grid_rows * out.grid_cols;
  const int in = 3 * ps * ps;
  std::vector<double> patches(static_cast<std::size_t>(p) * in);
  for (int gr = 0; gr < out.grid_rows; ++gr) {
    for (int gc = 0; gc < out.grid_cols; ++gc) {
      double* dst = patches.data() + static_cast<std::size_t>(gr * out.grid_cols + gc) * in;
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < ps; ++y) {
          for (int x = 0; x < ps; ++x) {
            dst[(c * ps + y) * ps + x] = 1.0 - image.at(gr * ps + y, gc * ps + x, c) / 255.0;
          }
        }
      }
    }
  }
  out.tokens = nn::Tensor({p, opts_.feature_dim});
  kernels::gemm(false, true, p, opts_.feature_dim, in, patches, weight_, out.tokens.data, false);
  for (int r = 0; r < p; ++r) {
    for (int j = 0; j < opts_.feature_dim; ++j) {
      out.tokens.data[static_cast<std::size_t>(r) * opts_.feature_dim + j] += bias_[j];
    }
  }
  return out;
}

EncoderRegistry::EncoderRegistry() {
  factories_["toy-patch"] = [](const EncoderOptions& o) { return std::make_unique<ToyPatchEncoder>(o); };
  factories_["clip-vit-l14"] = nullptr;  // plug-in slot
}

EncoderRegistry& EncoderRegistry::global() {
  static EncoderRegistry registry;
  return registry;
}

void EncoderRegistry::register_factory(const std::string& id, EncoderFactory factory) {
  factories_[id] = std::move(factory);
}

bool EncoderRegistry::is_known(const std::string& id) const { return factories_.contains(id); }

bool EncoderRegistry::is_available(const std::string& id) const {
  const auto it = factories_.find(id);
  return it != factories_.end() && it->second != nullptr;
}

std::unique_ptr<LowLevelEncoder> EncoderRegistry::create(const std::string& id,
                                                         const EncoderOptions& opts) const {
  const auto it = factories_.find(id);
  if (it == factories_.end()) throw Error(ErrorCode::EncoderUnavailable, "unknown encoder id '" + id + "'");
  if (!it->second) throw Error(ErrorCode::EncoderUnavailable, "encoder plug-in '" + id + "' is not installed");
  return it->second(opts);
}

// --- projection ---------------------------------------------------------------

ProjectionW::ProjectionW(int in_dim, int out_dim, std::uint64_t seed, int hidden_dim)
    : fc1_("projection.fc1", in_dim, hidden_dim > 0 ? hidden_dim : out_dim),
      fc2_("projection.fc2", hidden_dim > 0 ? hidden_dim : out_dim, out_dim) {
  nn::Rng rng(seed);
  fc1_.init(rng);
  fc2_.init(rng);
}

nn::Tensor ProjectionW::forward(const nn::Tensor& z, Cache* cache) const {
  if (z.shape.size() != 2 || z.dim(1) != in_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "projection expects [*, " + std::to_string(in_dim()) + "] input");
  }
  const int rows = z.dim(0);
  nn::Tensor pre({rows, hidden_dim()});
  fc1_.apply(z.data, rows, pre.data);
  nn::Tensor act(pre.shape);
  for (std::size_t i = 0; i < pre.size(); ++i) act.data[i] = nn::gelu(pre.data[i]);
  nn::Tensor out({rows, out_dim()});
  fc2_.apply(act.data, rows, out.data);
  if (cache != nullptr) {
    cache->input = z;
    cache->hidden_pre = std::move(pre);
  }
  return out;
}

nn::Tensor ProjectionW::backward(const nn::Tensor& grad_out, const Cache& cache) {
  const int rows = grad_out.dim(0);
  const int d = out_dim();
  const int hd = hidden_dim();
  nn::Tensor act(cache.hidden_pre.shape);
  for (std::size_t i = 0; i < act.size(); ++i) act.data[i] = nn::gelu(cache.hidden_pre.data[i]);
  kernels::gemm(true, false, d, hd, rows, grad_out.data, act.data, fc2_.weight().grad, true);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < d; ++j) fc2_.bias().grad[j] += grad_out.data[static_cast<std::size_t>(r) * d + j];
  }
  nn::Tensor g_act({rows, hd});
  kernels::gemm(false, false, rows, hd, d, grad_out.data, fc2_.weight().value, g_act.data, false);
  for (std::size_t i = 0; i < g_act.size(); ++i) g_act.data[i] *= nn::gelu_grad(cache.hidden_pre.data[i]);
  kernels::gemm(true, false, hd, in_dim(), rows, g_act.data, cache.input.data, fc1_.weight().grad, true);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < hd; ++j) fc1_.bias().grad[j] += g_act.data[static_cast<std::size_t>(r) * hd + j];
  }
  nn::Tensor dz({rows, in_dim()});
  kernels::gemm(false, false, rows, in_dim(), hd, g_act.data, fc1_.weight().value, dz.data, false);
  return dz;
}

std::vector<nn::Param*> ProjectionW::params() {
  return {&fc1_.weight(), &fc1_.bias(), &fc2_.weight(), &fc2_.bias()};
}

void ProjectionW::add_to(checkpoint::Archive& archive) const {
  archive.add(fc1_.weight());
  archive.add(fc1_.bias());
  archive.add(fc2_.weight());
  archive.add(fc2_.bias());
}

void ProjectionW::load_from(const checkpoint::Archive& archive) {
  for (auto* p : params()) archive.restore(*p);
}

// --- expand / align -----------------------------------------------------------

nn::Tensor expand(const nn::Tensor& h_f, int p) {
  if (p < 1) throw Error(ErrorCode::InvalidP, "expand needs p >= 1, got " + std::to_string(p));
  if (h_f.shape.size() != 2 || h_f.dim(0) != 1) {
    throw Error(ErrorCode::ShapeMismatch, "expand takes a single [1, D] row");
  }
  const int d = h_f.dim(1);
  nn::Tensor out({p, d});
  for (int r = 0; r < p; ++r) {
    std::copy(h_f.data.begin(), h_f.data.end(), out.data.begin() + static_cast<long>(r) * d);
  }
  return out;
}

nn::Tensor align(const nn::Tensor& h_v, const nn::Tensor& h_f) {
  if (h_v.shape.size() != 2 || h_f.shape.size() != 2 || h_f.dim(0) != 1 || h_v.dim(1) != h_f.dim(1)) {
    throw Error(ErrorCode::ShapeMismatch, "align needs h_v [P, D] and h_f [1, D]");
  }
  const int p = h_v.dim(0);
  const int d = h_v.dim(1);
  nn::Tensor out(h_v.shape);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < p; ++r) {
    for (int j = 0; j < d; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * d + j;
      out.data[i] = h_v.data[i] + h_f.data[j];
    }
  }
  return out;
}

EmbeddingTokens embed_visual(const PatchTokens& z_v, std::span<const double> z_f, const ProjectionW& w) {
  EmbeddingTokens t;
  t.h_v = w.project(z_v.tokens);
  nn::Tensor zf({1, static_cast<int>(z_f.size())});
  std::copy(z_f.begin(), z_f.end(), zf.data.begin());
  t.h_f = w.project(zf);
  t.h_f_prime = align(t.h_v, t.h_f);
  return t;
}

}  // namespace eegvlm::align
