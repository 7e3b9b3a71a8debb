#pragma once

// Specialized vision module: a ResNet-18 whose last convolution widens to
// 1024 channels (with matching batch norm and a 1x1 projection shortcut),
// followed by a fully connected stage classifier on the flattened map.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/checkpoint.hpp"
#include "eegvlm/nn.hpp"
#include "eegvlm/render.hpp"
#include "eegvlm/stage.hpp"

namespace eegvlm::vision {

struct VisionConfig {
  int input_channels = 3;
  int input_height = 224;
  int input_width = 224;
  int num_classes = kNumStages;
  double width_scale = 1.0;  // desk-scale reduction knob, (0, 1]

  int base_channels() const;   // round(64 * width_scale)
  int final_channels() const;  // round(1024 * width_scale)
  // Spatial size of the pre-classifier map.
  int feature_height() const;
  int feature_width() const;
  void validate() const;
  std::string digest() const;
  nlohmann::json to_json() const;
  static VisionConfig from_json(const nlohmann::json& j);
};

// Z_f: pooled pre-classifier feature, optionally with the spatial map.
struct SemanticFeature {
  std::vector<double> pooled;              // [C]
  std::optional<nn::Tensor> spatial_map;   // [C, h, w]

  // The classifier input: the flattened spatial map when present, otherwise
  // the pooled vector.
  std::span<const double> flattened() const;
};

struct StageLogits {
  std::array<double, kNumStages> values{};
  Stage argmax() const;
};

class ClassifierHead {
 public:
  ClassifierHead() = default;
  explicit ClassifierHead(int in_features, const std::string& name = "classifier");

  void init(nn::Rng& rng) { fc_.init(rng); }
  // Throws ShapeMismatch.
  StageLogits classify(const SemanticFeature& feature) const;
  nn::Linear& linear() { return fc_; }
  const nn::Linear& linear() const { return fc_; }

 private:
  nn::Linear fc_;
};

// [3, H, W] tensor with values in [0, 1].
nn::Tensor image_to_tensor(const render::EpochImage& image);

class VisionModel {
 public:
  VisionModel(const VisionConfig& cfg, std::uint64_t seed);

  const VisionConfig& config() const { return cfg_; }

  // images [N, 3, H, W] in [0, 1] -> pre-classifier map [N, C, h, w].
  nn::Tensor forward_spatial(const nn::Tensor& images, bool training);
  // Inference-mode Z_f for one image [3, H, W]. Throws ShapeMismatch.
  SemanticFeature forward_features(const nn::Tensor& image, bool keep_spatial = true);
  StageLogits classify(const SemanticFeature& feature) const { return head_.classify(feature); }

  // Batch logits [N, 5]; caches activations for backward.
  nn::Tensor forward_logits(const nn::Tensor& images, bool training);
  // Accumulates parameter gradients; returns d(loss)/d(images).
  nn::Tensor backward_logits(const nn::Tensor& grad_logits, bool need_input_grad = false);

  void set_input_normalization(std::array<double, 3> mean, std::array<double, 3> std_dev);
  std::array<double, 3> input_mean() const { return mean_; }
  std::array<double, 3> input_std() const { return std_; }

  std::vector<nn::Param*> params();
  std::vector<nn::Param*> buffers();
  void zero_grad();
  ClassifierHead& head() { return head_; }

  checkpoint::Archive to_archive() const;
  void load_archive(const checkpoint::Archive& archive);

 private:
  struct Block {
    nn::Conv2d conv1;
    nn::BatchNorm2d bn1;
    nn::Relu relu1;
    nn::Conv2d conv2;
    nn::BatchNorm2d bn2;
    bool projection = false;
    nn::Conv2d shortcut_conv;
    nn::BatchNorm2d shortcut_bn;
    nn::Relu relu_out;

    Block(const std::string& name, int in_c, int out_c, int stride, int mid_c);
    nn::Tensor forward(const nn::Tensor& x, bool training);
    nn::Tensor backward(const nn::Tensor& grad);
    void collect(std::vector<nn::Param*>& params, std::vector<nn::Param*>& buffers);
  };

  nn::Tensor normalize(const nn::Tensor& images) const;
  void check_input(const nn::Tensor& images) const;

  VisionConfig cfg_;
  nn::Conv2d stem_conv_;
  nn::BatchNorm2d stem_bn_;
  nn::Relu stem_relu_;
  nn::MaxPool2d pool_;
  std::vector<Block> blocks_;
  ClassifierHead head_;
  std::vector<int> spatial_shape_;
  std::array<double, 3> mean_{0.0, 0.0, 0.0};
  std::array<double, 3> std_{1.0, 1.0, 1.0};
};

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 5e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  // Optional cap on optimizer steps (0 = no cap); used for short sanity runs.
  long max_steps = 0;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
};

// Cross-entropy training with Adam. Sets the model's input normalization
// from the dataset's per-channel statistics. Throws EmptyDataset or
// NonFiniteLoss.
TrainResult train_vision(VisionModel& model, std::span<const nn::Tensor> images,
                         std::span<const Stage> labels, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {});

std::string training_log_csv(std::span<const EpochLog> log);

}  // namespace eegvlm::vision
