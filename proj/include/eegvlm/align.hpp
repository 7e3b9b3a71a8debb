#pragma once

// Low-level patch encoder g, the shared two-layer projection W, Expand and
// the multi-level alignment H'_f = H_v + Expand(H_f).

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>

#include "eegvlm/checkpoint.hpp"
#include "eegvlm/nn.hpp"
#include "eegvlm/render.hpp"

namespace eegvlm::align {

// Z_v: one row per patch, row-major over the patch grid.
struct PatchTokens {
  nn::Tensor tokens;  // [P, feature_dim]
  int grid_rows = 0;
  int grid_cols = 0;

  int count() const { return tokens.shape.empty() ? 0 : tokens.dim(0); }
};

class LowLevelEncoder {
 public:
  virtual ~LowLevelEncoder() = default;
  virtual std::string id() const = 0;
  virtual int feature_dim() const = 0;
  // Deterministic at inference. Throws ShapeMismatch for unsupported sizes.
  virtual PatchTokens encode(const render::EpochImage& image) const = 0;
};

struct EncoderOptions {
  int patch_px = 14;
  int feature_dim = 1024;
  std::uint64_t seed = 0;
};

// Non-overlapping patch grid with a fixed random linear embedding of each
// patch's ink intensity (1 - pixel / 255).
class ToyPatchEncoder final : public LowLevelEncoder {
 public:
  explicit ToyPatchEncoder(const EncoderOptions& opts);

  std::string id() const override { return "toy-patch"; }
  int feature_dim() const override { return opts_.feature_dim; }
  int patch_px() const { return opts_.patch_px; }
  PatchTokens encode(const render::EpochImage& image) const override;

 private:
  EncoderOptions opts_;
  std::vector<double> weight_;  // [feature_dim, 3 * patch^2]
  std::vector<double> bias_;    // [feature_dim]
};

using EncoderFactory = std::function<std::unique_ptr<LowLevelEncoder>(const EncoderOptions&)>;

// String-keyed encoder plug-ins. "toy-patch" is built in; "clip-vit-l14" is a
// known id whose factory must be registered by an external plug-in.
class EncoderRegistry {
 public:
  static EncoderRegistry& global();

  void register_factory(const std::string& id, EncoderFactory factory);
  bool is_known(const std::string& id) const;
  bool is_available(const std::string& id) const;
  // Throws EncoderUnavailable.
  std::unique_ptr<LowLevelEncoder> create(const std::string& id, const EncoderOptions& opts) const;

 private:
  EncoderRegistry();
  std::map<std::string, EncoderFactory> factories_;
};

// W: Linear(in -> hidden), GELU, Linear(hidden -> D); hidden defaults to D.
// One instance projects both Z_v and Z_f.
class ProjectionW {
 public:
  struct Cache {
    nn::Tensor input;
    nn::Tensor hidden_pre;
  };

  ProjectionW() = default;
  ProjectionW(int in_dim, int out_dim, std::uint64_t seed, int hidden_dim = 0);

  int in_dim() const { return fc1_.in_features(); }
  int hidden_dim() const { return fc1_.out_features(); }
  int out_dim() const { return fc2_.out_features(); }

  // z [rows, in_dim] -> [rows, D]. Throws ShapeMismatch.
  nn::Tensor project(const nn::Tensor& z) const { return forward(z, nullptr); }
  nn::Tensor forward(const nn::Tensor& z, Cache* cache) const;
  // Accumulates parameter gradients; returns d/dz.
  nn::Tensor backward(const nn::Tensor& grad_out, const Cache& cache);

  std::vector<nn::Param*> params();
  nn::Linear& layer1() { return fc1_; }
  nn::Linear& layer2() { return fc2_; }
  void add_to(checkpoint::Archive& archive) const;
  void load_from(const checkpoint::Archive& archive);

 private:
  nn::Linear fc1_;
  nn::Linear fc2_;
};

// Replicates the single row of h_f p times. Throws InvalidP / ShapeMismatch.
nn::Tensor expand(const nn::Tensor& h_f, int p);
// h_v + expand(h_f, rows(h_v)). Throws ShapeMismatch.
nn::Tensor align(const nn::Tensor& h_v, const nn::Tensor& h_f);

struct EmbeddingTokens {
  nn::Tensor h_v;        // [P, D]
  nn::Tensor h_f;        // [1, D]
  nn::Tensor h_f_prime;  // [P, D]
};

EmbeddingTokens embed_visual(const PatchTokens& z_v, std::span<const double> z_f, const ProjectionW& w);

}  // namespace eegvlm::align
