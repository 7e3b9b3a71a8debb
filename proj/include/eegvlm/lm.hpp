#pragma once

// Language side: token assembly [H_v; H'_f; H_q], the language-model contract
// with an in-repo toy decoder, greedy generation and stage extraction.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "eegvlm/checkpoint.hpp"
#include "eegvlm/nn.hpp"
#include "eegvlm/stage.hpp"

namespace eegvlm::lm {

// Row-wise concatenation h_v, then h_f_prime, then h_q. Throws ShapeMismatch
// (including for an empty h_q).
nn::Tensor assemble_inputs(const nn::Tensor& h_v, const nn::Tensor& h_f_prime, const nn::Tensor& h_q);

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::string id() const = 0;
  virtual int embed_dim() const = 0;
  // H_q: [T, D].
  virtual nn::Tensor embed(const std::string& text) const = 0;
  // Greedy decoding continuing `sequence`; at most max_length tokens.
  virtual std::string generate(const nn::Tensor& sequence, int max_length) const = 0;
};

// Throws ModelUnavailable when lm is null.
std::string generate(const LanguageModel* lm, const nn::Tensor& sequence, int max_length);

struct StagePrediction {
  Stage label = Stage::Wake;
  std::string raw_text;
  std::size_t extraction_site = 0;  // character offset of the decisive mention
};

// Last canonical mention wins ("Wake"/"W", "N1"/"Stage 1", "N2"/"Stage 2",
// "N3"/"SWS"/"Stage 3"/"Stage 4", "REM"/"R"). Throws NoStageFound.
StagePrediction extract_stage(std::string_view text);

// Word-level tokenizer: splits on whitespace and keeps punctuation as tokens.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Tokenizer();
  static std::vector<std::string> split(std::string_view text);
  void add_texts(const std::vector<std::string>& texts);
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  void set_words(std::vector<std::string> words);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct ToyLmConfig {
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int mlp_mult = 4;
  int max_positions = 1024;
};

// Small pre-norm causal transformer decoder over embedding rows.
class ToyLanguageModel final : public LanguageModel {
 public:
  ToyLanguageModel(const ToyLmConfig& cfg, Tokenizer tokenizer, std::uint64_t seed);

  std::string id() const override { return "toy-lm"; }
  int embed_dim() const override { return cfg_.embed_dim; }
  nn::Tensor embed(const std::string& text) const override;
  std::string generate(const nn::Tensor& sequence, int max_length) const override;

  nn::Tensor embed_ids(const std::vector<int>& ids) const;
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const ToyLmConfig& config() const { return cfg_; }

  // Teacher-forced pass: rows [S, D], targets[i] is the token expected after
  // row i (-1 for none). Returns the mean cross-entropy over targets and
  // accumulates parameter gradients; d(loss)/d(rows) goes to grad_rows.
  double train_step(const nn::Tensor& rows, const std::vector<int>& targets, nn::Tensor* grad_rows);
  // Logits for every row of a full (uncached) forward pass: [S, V].
  nn::Tensor forward_logits(const nn::Tensor& rows) const;
  // Adds gradient for embedding rows produced by embed_ids.
  void accumulate_embedding_grad(const std::vector<int>& ids, const nn::Tensor& grad_rows, int row_offset);

  std::vector<nn::Param*> params();
  void add_to(checkpoint::Archive& archive) const;
  void load_from(const checkpoint::Archive& archive);

 private:
  struct Layer {
    nn::Param norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
  };
  struct LayerCache;
  struct ForwardCache;

  double forward(const nn::Tensor& rows, ForwardCache* cache, nn::Tensor* logits) const;

  ToyLmConfig cfg_;
  Tokenizer tokenizer_;
  nn::Param token_embedding_;     // [V, D]
  nn::Param position_embedding_;  // [max_positions, D]
  std::vector<Layer> layers_;
  nn::Param final_norm_;
  nn::Param unembed_;  // [V, D]
};

using LmFactory = std::function<std::unique_ptr<LanguageModel>()>;

// String-keyed language-model plug-ins. "toy-lm" is built in and trained by
// the joint trainer, so the registry only records external ids.
class LmRegistry {
 public:
  static LmRegistry& global();
  void register_factory(const std::string& id, LmFactory factory);
  bool is_known(const std::string& id) const;
  // Throws ModelUnavailable for unknown or uninstalled external ids.
  std::unique_ptr<LanguageModel> create(const std::string& id) const;

 private:
  LmRegistry();
  std::map<std::string, LmFactory> factories_;
};

}  // namespace eegvlm::lm
