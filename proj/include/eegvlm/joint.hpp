#pragma once

// Joint fine-tuning of the projection W and the toy language model on
// (patch tokens, semantic feature, question, answer) samples, with the
// ablation wirings selectable by preset name.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/align.hpp"
#include "eegvlm/checkpoint.hpp"
#include "eegvlm/lm.hpp"
#include "eegvlm/stage.hpp"

namespace eegvlm::joint {

enum class Wiring {
  PatchAligned,  // [H_v; H_v + Expand(H_f); H_q]
  RawHf,         // [H_v; H_f; H_q]
  VisualOnly,    // [H_v; H_q]
};

struct Preset {
  std::string name;
  Wiring wiring = Wiring::PatchAligned;
  bool chain_of_thought = true;  // train on the assembled reasoning, not just the label
};

// "patch-aligned", "raw-hf", "wo-feature-embedding", "wo-cot". Throws ConfigInvalid.
Preset preset_by_name(const std::string& name);
std::vector<std::string> preset_names();

struct JointSample {
  align::PatchTokens z_v;
  std::vector<double> z_f;
  std::string question;
  std::string answer;
  Stage truth = Stage::Wake;
};

// Short answer used when chain-of-thought targets are disabled.
std::string label_answer(Stage stage);

lm::Tokenizer build_tokenizer(std::span<const JointSample> samples);

class JointModel {
 public:
  JointModel(const Preset& preset, int feature_dim, const lm::ToyLmConfig& lm_cfg, lm::Tokenizer tokenizer,
             std::uint64_t seed);

  const Preset& preset() const { return preset_; }
  int feature_dim() const { return w_.in_dim(); }
  lm::ToyLanguageModel& language_model() { return lm_; }
  const lm::ToyLanguageModel& language_model() const { return lm_; }
  const align::ProjectionW& projection() const { return w_; }

  // The prefix fed to the language model before decoding starts.
  nn::Tensor sequence(const align::PatchTokens& z_v, std::span<const double> z_f, const std::string& question) const;
  std::string answer(const align::PatchTokens& z_v, std::span<const double> z_f, const std::string& question,
                     int max_new_tokens) const;

  // Teacher-forced loss on one sample; accumulates gradients into params().
  double accumulate(const JointSample& sample);

  std::vector<nn::Param*> params();
  checkpoint::Archive to_archive() const;
  static JointModel from_archive(const checkpoint::Archive& archive);

 private:
  Preset preset_;
  align::ProjectionW w_;
  lm::ToyLanguageModel lm_;
};

struct JointTrainConfig {
  int epochs = 2;
  double learning_rate = 3e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

struct JointEpochLog {
  int epoch = 0;
  double loss = 0.0;
};

// Throws EmptyDataset or NonFiniteLoss.
std::vector<JointEpochLog> train_joint(JointModel& model, std::span<const JointSample> samples,
                                       const JointTrainConfig& cfg,
                                       const std::function<void(const JointEpochLog&)>& on_epoch = {});

}  // namespace eegvlm::joint
